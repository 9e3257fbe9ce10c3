"""Slice experts and the two dispatch paths.

``dispatch_naive`` evaluates every (token, slice, rank) assignment on its own
and is the correctness oracle. ``dispatch_grouped`` stacks all rows bound for
one expert and runs each expert layer as one matrix multiply; with
``batched=True`` every expert layer across all experts becomes a single
zero-padded batched multiply. All paths produce bit-identical outputs and
gradients because rows are stacked in ascending assignment order and outputs
are combined in ascending rank order.
"""

from __future__ import annotations

import contextlib
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterator

import numpy as np

from . import autodiff as ad
from . import numerics as nx
from .autodiff import Sparse, Variable
from .config import SliceMoEConfig
from .errors import ContractError, DimensionError
from .router import RoutingDecision


@dataclass
class ExpertParams:
    """Parameters of all E slice experts, stacked along a leading expert axis."""

    w1: Variable  # (E, w, F)
    b1: Variable  # (E, F)
    w2: Variable  # (E, F, w)
    b2: Variable  # (E, w)

    @classmethod
    def init(cls, cfg: SliceMoEConfig, rng: nx.Rng) -> "ExpertParams":
        e, w, f = cfg.n_experts, cfg.slice_width, cfg.ffn_width
        return cls(
            w1=Variable(nx.gaussian(rng.child(0), (e, w, f)) / np.sqrt(w), requires_grad=True, name="experts.w1"),
            b1=Variable(np.zeros((e, f)), requires_grad=True, name="experts.b1"),
            w2=Variable(nx.gaussian(rng.child(1), (e, f, w)) / np.sqrt(f), requires_grad=True, name="experts.w2"),
            b2=Variable(np.zeros((e, w)), requires_grad=True, name="experts.b2"),
        )

    def named(self) -> dict[str, Variable]:
        return {"experts.w1": self.w1, "experts.b1": self.b1, "experts.w2": self.w2, "experts.b2": self.b2}

    @property
    def n_experts(self) -> int:
        return self.w1.shape[0]

    @property
    def block_params(self) -> int:
        """Parameter count of a single expert."""
        return sum(v.value[0].size for v in self.named().values())


# --------------------------------------------------------------------------
# instrumentation
# --------------------------------------------------------------------------

_touch = threading.local()


class TouchCounter:
    """Rows processed per expert while active."""

    def __init__(self, n_experts: int) -> None:
        self.rows = np.zeros(n_experts, dtype=np.int64)
        self.calls = 0


@contextlib.contextmanager
def count_expert_rows(n_experts: int) -> Iterator[TouchCounter]:
    counter = TouchCounter(n_experts)
    prev = getattr(_touch, "counter", None)
    _touch.counter = counter
    try:
        yield counter
    finally:
        _touch.counter = prev


def _report_rows(e: int, n: int) -> None:
    counter = getattr(_touch, "counter", None)
    if counter is not None:
        counter.rows[e] += n
        counter.calls += 1


# --------------------------------------------------------------------------
# expert FFN and gating
# --------------------------------------------------------------------------


def expert_ffn(x: Variable, experts: ExpertParams, e: int) -> Variable:
    """``relu(x @ W1[e] + b1[e]) @ W2[e] + b2[e]`` applied rowwise."""
    if x.ndim != 2 or x.shape[1] != experts.w1.shape[1]:
        raise DimensionError(f"expert {e} expects rows of width {experts.w1.shape[1]}, got {x.shape}")
    _report_rows(e, x.shape[0])
    h = ad.relu(ad.add_bias(ad.matmul(x, ad.select(experts.w1, e)), ad.select(experts.b1, e)))
    return ad.add_bias(ad.matmul(h, ad.select(experts.w2, e)), ad.select(experts.b2, e))


def _expert_ffn_values(x: np.ndarray, experts: ExpertParams, e: int) -> np.ndarray:
    h = nx.relu(nx.matmul(x, experts.w1.value[e]) + experts.b1.value[e])
    return nx.matmul(h, experts.w2.value[e]) + experts.b2.value[e]


def gate_rows(slabs: Variable, weights: Variable, assignments: np.ndarray) -> Variable:
    """Weighted slice rows: ``out[r] = weights.flat[a_r] * slabs[a_r // k]``."""
    k = weights.shape[1]
    a = np.asarray(assignments, dtype=np.intp)
    rows, ranks = a // k, a % k
    wv = weights.value[rows, ranks]
    xv = slabs.value[rows]

    def back(g):
        return Sparse(rows, wv[:, None] * g), Sparse((rows, ranks), nx.row_dot(g, xv))

    return ad.record(wv[:, None] * xv, (slabs, weights), back)


@dataclass
class ExpertBatch:
    """Gated slice rows grouped by destination expert."""

    inputs: list  # per expert: Variable (n_e, w) or None when n_e == 0
    assignments: list  # per expert: flat assignment indices (row * k + rank), ascending
    origins: list  # per expert: (n_e, 3) int array of (token, slice, rank)

    @property
    def counts(self) -> np.ndarray:
        return np.array([len(a) for a in self.assignments], dtype=np.int64)


def _flat_slabs(slabs: Variable) -> Variable:
    if slabs.ndim == 3:
        b, s, w = slabs.shape
        return ad.reshape(slabs, (b * s, w))
    if slabs.ndim != 2:
        raise DimensionError(f"slabs must be (B, S, w) or (B*S, w), got {slabs.shape}")
    return slabs


def _check_decision(x2: Variable, decision: RoutingDecision) -> None:
    if decision.n_rows != x2.shape[0]:
        raise ContractError(f"decision covers {decision.n_rows} slices, slabs hold {x2.shape[0]}")


def gate_and_assign(slabs, decision: RoutingDecision, n_experts: int) -> ExpertBatch:
    x2 = _flat_slabs(slabs if isinstance(slabs, Variable) else ad.constant(slabs))
    _check_decision(x2, decision)
    n, k = decision.expert_ids.shape
    gated = gate_rows(x2, decision.weights, np.arange(n * k))
    flat_ids = decision.expert_ids.reshape(-1)
    inputs, assignments, origins = [], [], []
    s = decision.n_slices
    for e in range(n_experts):
        a = np.flatnonzero(flat_ids == e)
        assignments.append(a)
        row = a // k
        origins.append(np.stack([row // s, row % s, a % k], axis=1))
        inputs.append(ad.take_rows(gated, a) if a.size else None)
    return ExpertBatch(inputs, assignments, origins)


def _combine(outputs: list[Variable], assignments: list[np.ndarray], n: int, k: int) -> Variable:
    """``out[r] = sum_j y[r*k + j]`` summed over ascending rank j."""
    w = outputs[0].shape[1]
    slots = np.empty((n * k, w), dtype=outputs[0].value.dtype)
    for y, a in zip(outputs, assignments):
        slots[a] = y.value
    slots = slots.reshape(n, k, w)
    out = slots[:, 0].copy()
    for j in range(1, k):
        out += slots[:, j]
    return ad.record(out, tuple(outputs), lambda g: tuple(g[a // k] for a in assignments))


def _reassemble(out2: Variable, decision: RoutingDecision) -> Variable:
    return ad.reshape(out2, (decision.n_tokens, decision.n_slices * out2.shape[1]))


# --------------------------------------------------------------------------
# dispatch paths
# --------------------------------------------------------------------------


def dispatch_naive(slabs, decision: RoutingDecision, experts: ExpertParams) -> Variable:
    """Reference loop: one expert call per (token, slice, rank); returns (B, d)."""
    x2 = _flat_slabs(slabs if isinstance(slabs, Variable) else ad.constant(slabs))
    _check_decision(x2, decision)
    n, k = decision.expert_ids.shape
    outs = []
    for r in range(n):
        acc = None
        for j in range(k):
            row = gate_rows(x2, decision.weights, [r * k + j])
            y = expert_ffn(row, experts, int(decision.expert_ids[r, j]))
            acc = y if acc is None else ad.add(acc, y)
        outs.append(acc)
    return _reassemble(ad.concat_rows(outs), decision)


def _pad_stack(gated: Variable, assignments: list[np.ndarray], n_max: int) -> Variable:
    e = len(assignments)
    w = gated.shape[1]
    out = np.zeros((e, n_max, w), dtype=gated.value.dtype)
    for i, a in enumerate(assignments):
        out[i, : a.size] = gated.value[a]
    all_a = np.concatenate(assignments)

    def back(g):
        return (Sparse(all_a, np.concatenate([g[i, : a.size] for i, a in enumerate(assignments)])),)

    return ad.record(out, (gated,), back)


def _add_bias_batched(x: Variable, b: Variable) -> Variable:
    def back(g):
        return g, np.stack([nx.sum_rows(gi) for gi in g])

    return ad.record(x.value + b.value[:, None, :], (x, b), back)


def _unpad_combine(y: Variable, assignments: list[np.ndarray], n: int, k: int) -> Variable:
    w = y.shape[2]
    slots = np.empty((n * k, w), dtype=y.value.dtype)
    for i, a in enumerate(assignments):
        slots[a] = y.value[i, : a.size]
    slots = slots.reshape(n, k, w)
    out = slots[:, 0].copy()
    for j in range(1, k):
        out += slots[:, j]

    def back(g):
        d = np.zeros_like(y.value)
        for i, a in enumerate(assignments):
            d[i, : a.size] = g[a // k]
        return (d,)

    return ad.record(out, (y,), back)


def dispatch_grouped(
    slabs,
    decision: RoutingDecision,
    experts: ExpertParams,
    threads: int = 1,
    batched: bool = False,
) -> Variable:
    """Group rows per expert, one GEMM per expert layer, scatter-add back; returns (B, d).

    ``batched=True`` pads every expert group to the largest and evaluates each
    layer of all experts with one batched multiply. ``threads > 1`` evaluates
    expert groups concurrently; it is forward-only (no tape may be recording).
    """
    x2 = _flat_slabs(slabs if isinstance(slabs, Variable) else ad.constant(slabs))
    _check_decision(x2, decision)
    n, k = decision.expert_ids.shape
    n_experts = experts.n_experts
    if batched:
        gated = gate_rows(x2, decision.weights, np.arange(n * k))
        flat_ids = decision.expert_ids.reshape(-1)
        assignments = [np.flatnonzero(flat_ids == e) for e in range(n_experts)]
        n_max = max(a.size for a in assignments)
        for e, a in enumerate(assignments):
            _report_rows(e, a.size)
        xs = _pad_stack(gated, assignments, n_max)
        h = ad.relu(_add_bias_batched(ad.batched_matmul(xs, experts.w1), experts.b1))
        y = _add_bias_batched(ad.batched_matmul(h, experts.w2), experts.b2)
        return _reassemble(_unpad_combine(y, assignments, n, k), decision)

    batch = gate_and_assign(x2, decision, n_experts)
    live = [e for e in range(n_experts) if batch.inputs[e] is not None]
    if threads > 1:
        tape = ad.active_tape()
        if tape is not None and any(batch.inputs[e].requires_grad for e in live):
            raise ContractError("threaded dispatch is forward-only; run it under no_grad()")
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(_expert_ffn_values, batch.inputs[e].value, experts, e) for e in live]
            outputs = [ad.constant(f.result()) for f in futures]
        for e in live:
            _report_rows(e, batch.inputs[e].shape[0])
    else:
        outputs = [expert_ffn(batch.inputs[e], experts, e) for e in live]
    return _reassemble(_combine(outputs, [batch.assignments[e] for e in live], n, k), decision)


def dispatch(slabs, decision: RoutingDecision, experts: ExpertParams, mode: str = "grouped", threads: int = 1) -> Variable:
    if mode == "naive":
        return dispatch_naive(slabs, decision, experts)
    if mode == "grouped":
        return dispatch_grouped(slabs, decision, experts, threads=threads)
    if mode == "batched":
        return dispatch_grouped(slabs, decision, experts, batched=True)
    raise ContractError(f"unknown dispatch mode {mode!r}")


# --------------------------------------------------------------------------
# accounting
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ActiveParams:
    """Per-token parameter accounting.

    Expert parameters are counted per invocation: each token runs ``k * S``
    slice-expert evaluations, out of ``E * S`` possible (every expert on every
    slice), so the active expert fraction is ``k / E``.
    """

    router_params: int
    expert_block_params: int
    active_expert_params: int
    expert_slot_params: int
    stored_expert_params: int
    dense_ffn_params: int

    @property
    def active_fraction(self) -> Fraction:
        return Fraction(self.active_expert_params, self.expert_slot_params)

    @property
    def active_params(self) -> int:
        return self.router_params + self.active_expert_params

    @property
    def dense_ratio(self) -> float:
        """Dense width-4d FFN parameters per active parameter."""
        return self.dense_ffn_params / self.active_params


def expert_block_params(cfg: SliceMoEConfig) -> int:
    w, f = cfg.slice_width, cfg.ffn_width
    return w * f + f + f * w + w


def router_params(cfg: SliceMoEConfig) -> int:
    w, h, e = cfg.slice_width, cfg.router_hidden, cfg.n_experts
    return w * h + h + h * e + e


def active_param_count(cfg: SliceMoEConfig) -> ActiveParams:
    block = expert_block_params(cfg)
    d = cfg.d
    return ActiveParams(
        router_params=router_params(cfg),
        expert_block_params=block,
        active_expert_params=cfg.top_k * cfg.n_slices * block,
        expert_slot_params=cfg.n_experts * cfg.n_slices * block,
        stored_expert_params=cfg.n_experts * block,
        dense_ffn_params=d * 4 * d + 4 * d + 4 * d * d + d,
    )
