"""Define-by-run reverse-mode differentiation over numpy arrays.

Operations performed while a :class:`Tape` is active, on at least one
:class:`Variable` that requires grad, are recorded in execution order.
:func:`backward` walks the tape in reverse recording order.

Gradient fan-in is deterministic: the contributions a variable receives from
its consumers are summed in ascending consumer order, whatever order the
reverse sweep produces them in. Contributions are either dense arrays or
:class:`Sparse` scatter-adds applied with ``np.add.at`` (sequential, in index
order). Two graphs that compute the same sums in the same order therefore
produce the same gradient values, which is what lets the grouped dispatch
path be checked bitwise against the per-slice loop.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Sequence

import numpy as np

from . import numerics as nx
from .errors import ContractError, DimensionError

_local = threading.local()


class Sparse:
    """Gradient contribution ``np.add.at(grad, index, values)``."""

    __slots__ = ("index", "values")

    def __init__(self, index, values: np.ndarray) -> None:
        self.index = index
        self.values = values


class Variable:
    __slots__ = ("value", "grad", "node", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None) -> None:
        value = np.asarray(value)
        if value.dtype.kind != "f":
            value = value.astype(nx.DEFAULT_DTYPE)
        self.value = value
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(value) if requires_grad else None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.value)

    def item(self) -> float:
        return float(self.value)

    def __add__(self, other: "Variable") -> "Variable":
        return add(self, other)

    def __mul__(self, other: "Variable") -> "Variable":
        return mul(self, other)

    def __matmul__(self, other: "Variable") -> "Variable":
        return matmul(self, other)

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Variable{tag}(shape={self.shape}, requires_grad={self.requires_grad})"


class Node:
    __slots__ = ("id", "out", "parents", "backward", "tape")

    def __init__(self, id: int, out: Variable, parents, backward, tape: "Tape") -> None:
        self.id = id
        self.out = out
        self.parents = parents
        self.backward = backward
        self.tape = tape


class Tape:
    """Ordered record of differentiable operations for one step."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)


def _stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording (operations still compute values)."""
    _stack().append(None)
    try:
        yield
    finally:
        _stack().pop()


def record(value: np.ndarray, parents: Sequence[Variable], backward: Callable) -> Variable:
    """Wrap ``value`` in a Variable, recording ``backward`` if any parent needs grad.

    ``backward(g)`` must return one contribution (array, Sparse or None) per parent.
    """
    nx.check_finite(value, "operation output")
    out = Variable(value)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(len(tape.nodes), out, tuple(parents), backward, tape)
        tape.nodes.append(out.node)
    return out


def _accumulate(contribs: list, like: np.ndarray) -> np.ndarray:
    # contribs arrive in reverse consumer order; re-sort ascending (stable keeps parent order)
    contribs = sorted(contribs, key=lambda t: t[0])
    first = contribs[0][1]
    if isinstance(first, Sparse):
        buf = np.zeros_like(like)
        np.add.at(buf, first.index, first.values)
    else:
        buf = np.array(first, dtype=like.dtype, copy=True).reshape(like.shape)
    for _, c in contribs[1:]:
        if isinstance(c, Sparse):
            np.add.at(buf, c.index, c.values)
        else:
            buf += c
    return buf


def backward(loss: Variable) -> None:
    """Populate ``.grad`` of every variable that ``loss`` depends on.

    Leaf gradients accumulate across calls; call :func:`zero_grad` in between
    to start fresh. Intermediate variables receive their gradient for this
    call only.
    """
    if loss.value.size != 1 or loss.value.ndim > 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any variable that requires grad")
    if loss.node is None:
        loss.grad = loss.grad + 1.0
        return

    pending: dict[int, list] = {id(loss): [(len(loss.node.tape.nodes), np.ones_like(loss.value))]}
    owners: dict[int, Variable] = {id(loss): loss}
    for node in reversed(loss.node.tape.nodes[: loss.node.id + 1]):
        contribs = pending.pop(id(node.out), None)
        if contribs is None:
            continue
        g = _accumulate(contribs, node.out.value)
        node.out.grad = g
        for parent, c in zip(node.parents, node.backward(g)):
            if c is None or not parent.requires_grad:
                continue
            key = id(parent)
            owners[key] = parent
            pending.setdefault(key, []).append((node.id, c))

    for key, contribs in pending.items():
        leaf = owners[key]
        if leaf.node is not None:
            # produced on another tape; treat as a constant boundary
            continue
        leaf.grad = leaf.grad + _accumulate(contribs, leaf.value)


def zero_grad(params) -> None:
    for p in params.values() if isinstance(params, dict) else params:
        p.zero_grad()


# --------------------------------------------------------------------------
# generic differentiable operations
# --------------------------------------------------------------------------


def constant(value) -> Variable:
    return Variable(np.asarray(value), requires_grad=False)


def add(a: Variable, b: Variable) -> Variable:
    if a.shape != b.shape:
        raise DimensionError(f"add expects equal shapes, got {a.shape} and {b.shape}")
    return record(a.value + b.value, (a, b), lambda g: (g, g))


def add_const(x: Variable, c: np.ndarray) -> Variable:
    return record(x.value + c, (x,), lambda g: (g,))


def mul(a: Variable, b: Variable) -> Variable:
    if a.shape != b.shape:
        raise DimensionError(f"mul expects equal shapes, got {a.shape} and {b.shape}")
    av, bv = a.value, b.value
    return record(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(x: Variable, s: float) -> Variable:
    return record(x.value * s, (x,), lambda g: (g * s,))


def matmul(a: Variable, b: Variable) -> Variable:
    av, bv = a.value, b.value
    out = nx.matmul(av, bv)

    def back(g):
        ga = nx.matmul(g, bv.T) if a.requires_grad else None
        gb = nx.matmul(av.T, g) if b.requires_grad else None
        return ga, gb

    return record(out, (a, b), back)


def batched_matmul(a: Variable, b: Variable) -> Variable:
    av, bv = a.value, b.value
    out = nx.batched_matmul(av, bv)

    def back(g):
        ga = nx.batched_matmul(g, np.swapaxes(bv, -1, -2)) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bv.ndim == 3:
                gb = nx.batched_matmul(np.swapaxes(av, 1, 2), g)
            else:
                k, n = bv.shape
                gb = nx.matmul(av.reshape(-1, k).T, g.reshape(-1, n))
        return ga, gb

    return record(out, (a, b), back)


def add_bias(x: Variable, b: Variable) -> Variable:
    """Row-broadcast bias add: ``x[n, c] + b[c]``."""
    if x.ndim != 2 or b.shape != (x.shape[1],):
        raise DimensionError(f"add_bias expects (n,c) + (c,), got {x.shape} + {b.shape}")
    return record(x.value + b.value, (x, b), lambda g: (g, nx.sum_rows(g)))


def relu(x: Variable) -> Variable:
    xv = x.value
    return record(nx.relu(xv), (x,), lambda g: (np.where(xv > 0, g, 0.0).astype(g.dtype, copy=False),))


def softmax(x: Variable, temperature: float = 1.0) -> Variable:
    y = nx.softmax(x.value, temperature)

    def back(g):
        g2 = np.atleast_2d(g)
        y2 = np.atleast_2d(y)
        dot = nx.row_dot(g2, y2)[:, None]
        return ((y2 * (g2 - dot) / temperature).reshape(y.shape),)

    return record(y, (x,), back)


def reshape(x: Variable, shape) -> Variable:
    src = x.shape
    return record(x.value.reshape(shape), (x,), lambda g: (g.reshape(src),))


def take_rows(x: Variable, rows: np.ndarray) -> Variable:
    rows = np.asarray(rows, dtype=np.intp)
    return record(x.value[rows], (x,), lambda g: (Sparse(rows, g),))


def take_along(x: Variable, idx: np.ndarray) -> Variable:
    """``out[i, j] = x[i, idx[i, j]]`` for 2-D ``x``."""
    idx = np.asarray(idx, dtype=np.intp)
    rows = np.broadcast_to(np.arange(x.shape[0])[:, None], idx.shape)
    return record(np.take_along_axis(x.value, idx, axis=1), (x,), lambda g: (Sparse((rows, idx), g),))


def select(x: Variable, i: int) -> Variable:
    """``x[i]`` along the leading axis."""
    i = int(i)
    return record(x.value[i], (x,), lambda g: (Sparse(i, g),))


def permute_columns(x: Variable, perm: np.ndarray) -> Variable:
    """``out[:, j] = x[:, perm[j]]`` for a bijection ``perm``."""
    perm = np.asarray(perm, dtype=np.intp)

    def back(g):
        d = np.empty_like(g)
        d[:, perm] = g
        return (d,)

    return record(x.value[:, perm], (x,), back)


def concat_rows(parts: Sequence[Variable]) -> Variable:
    sizes = np.cumsum([p.shape[0] for p in parts])[:-1]
    return record(
        np.concatenate([p.value for p in parts], axis=0),
        tuple(parts),
        lambda g: tuple(np.split(g, sizes, axis=0)),
    )


def total(x: Variable) -> Variable:
    """Sum of all entries, accumulated in row-major order."""
    flat = x.value.reshape(1, -1)
    s = nx.row_sum(flat)[0] if flat.shape[1] else np.zeros((), x.value.dtype)[()]
    return record(np.asarray(s), (x,), lambda g: (np.full(x.shape, g, dtype=x.value.dtype),))


# --------------------------------------------------------------------------
# finite-difference oracle
# --------------------------------------------------------------------------


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences ``(f(x + h e_i) - f(x - h e_i)) / 2h`` for every coordinate."""
    x = np.array(x, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max over entries of ``|a - n| / max(1, |a|, |n|)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    return float(np.max(np.abs(a - n) / denom))
