"""Dense numeric substrate: deterministic matmul, fixed-order reductions, softmax, seeded RNG.

Every reduction here accumulates in a fixed, documented order (ascending index,
accumulator seeded with the first term) so that results do not depend on how
the work is batched. ``matmul(a, b)[i]`` is bit-identical to
``matmul(a[i:i+1], b)[0]``; the grouped dispatch path relies on that.

Kernels are JIT-compiled with numba when available. Set ``SLICEMOE_NO_JIT=1``
to force the pure-numpy kernels; both produce identical bits.
"""

from __future__ import annotations

import contextlib
import os
import threading
from typing import Iterator, Sequence

import numpy as np

from .errors import DimensionError, NumericError, ParameterError

DEFAULT_DTYPE = np.float64

try:  # pragma: no cover - exercised implicitly
    if os.environ.get("SLICEMOE_NO_JIT"):
        raise ImportError("JIT disabled by SLICEMOE_NO_JIT")
    from numba import njit
except ImportError:  # pragma: no cover
    njit = None


# --------------------------------------------------------------------------
# kernels
# --------------------------------------------------------------------------


def _mm_numpy(a: np.ndarray, b: np.ndarray, out: np.ndarray) -> None:
    k = a.shape[1]
    np.multiply(a[:, 0:1], b[0], out=out)
    if k > 1:
        tmp = np.empty_like(out)
        for kk in range(1, k):
            np.multiply(a[:, kk : kk + 1], b[kk], out=tmp)
            out += tmp


def _bmm_numpy(a: np.ndarray, b: np.ndarray, out: np.ndarray) -> None:
    for i in range(a.shape[0]):
        _mm_numpy(a[i], b[i], out[i])


def _bmm_shared_numpy(a: np.ndarray, b: np.ndarray, out: np.ndarray) -> None:
    for i in range(a.shape[0]):
        _mm_numpy(a[i], b, out[i])


def _sum_rows_numpy(x: np.ndarray, out: np.ndarray) -> None:
    out[:] = x[0]
    for r in range(1, x.shape[0]):
        out += x[r]


def _row_sum_numpy(x: np.ndarray, out: np.ndarray) -> None:
    out[:] = x[:, 0]
    for c in range(1, x.shape[1]):
        out += x[:, c]


def _row_dot_numpy(x: np.ndarray, y: np.ndarray, out: np.ndarray) -> None:
    np.multiply(x[:, 0], y[:, 0], out=out)
    for c in range(1, x.shape[1]):
        out += x[:, c] * y[:, c]


if njit is not None:

    @njit(cache=True, nogil=True)
    def _mm_jit(a, b, out):  # pragma: no cover - compiled
        m, k = a.shape
        n = b.shape[1]
        for i in range(m):
            for j in range(n):
                out[i, j] = a[i, 0] * b[0, j]
            for kk in range(1, k):
                aik = a[i, kk]
                for j in range(n):
                    out[i, j] += aik * b[kk, j]

    @njit(cache=True, nogil=True)
    def _bmm_jit(a, b, out):  # pragma: no cover - compiled
        for bb in range(a.shape[0]):
            _mm_jit(a[bb], b[bb], out[bb])

    @njit(cache=True, nogil=True)
    def _bmm_shared_jit(a, b, out):  # pragma: no cover - compiled
        for bb in range(a.shape[0]):
            _mm_jit(a[bb], b, out[bb])

    @njit(cache=True, nogil=True)
    def _sum_rows_jit(x, out):  # pragma: no cover - compiled
        n, c = x.shape
        for j in range(c):
            out[j] = x[0, j]
        for r in range(1, n):
            for j in range(c):
                out[j] += x[r, j]

    @njit(cache=True, nogil=True)
    def _row_sum_jit(x, out):  # pragma: no cover - compiled
        n, c = x.shape
        for i in range(n):
            acc = x[i, 0]
            for j in range(1, c):
                acc += x[i, j]
            out[i] = acc

    @njit(cache=True, nogil=True)
    def _row_dot_jit(x, y, out):  # pragma: no cover - compiled
        n, c = x.shape
        for i in range(n):
            acc = x[i, 0] * y[i, 0]
            for j in range(1, c):
                acc += x[i, j] * y[i, j]
            out[i] = acc

    _KERNELS = {
        "mm": _mm_jit,
        "bmm": _bmm_jit,
        "bmm_shared": _bmm_shared_jit,
        "sum_rows": _sum_rows_jit,
        "row_sum": _row_sum_jit,
        "row_dot": _row_dot_jit,
    }
else:  # pragma: no cover
    _KERNELS = {}

_NUMPY_KERNELS = {
    "mm": _mm_numpy,
    "bmm": _bmm_numpy,
    "bmm_shared": _bmm_shared_numpy,
    "sum_rows": _sum_rows_numpy,
    "row_sum": _row_sum_numpy,
    "row_dot": _row_dot_numpy,
}

_state = threading.local()


def jit_enabled() -> bool:
    return bool(_KERNELS) and not getattr(_state, "force_numpy", False)


@contextlib.contextmanager
def numpy_kernels() -> Iterator[None]:
    """Temporarily route every kernel through the pure-numpy implementation."""
    prev = getattr(_state, "force_numpy", False)
    _state.force_numpy = True
    try:
        yield
    finally:
        _state.force_numpy = prev


def _kernel(name: str):
    if jit_enabled():
        return _KERNELS[name]
    return _NUMPY_KERNELS[name]


# --------------------------------------------------------------------------
# FLOP instrumentation
# --------------------------------------------------------------------------


class FlopCounter:
    """Accumulates 2*m*n*k for every matmul issued while active."""

    def __init__(self) -> None:
        self.flops = 0
        self.calls = 0


@contextlib.contextmanager
def count_flops() -> Iterator[FlopCounter]:
    counter = FlopCounter()
    stack = getattr(_state, "flop_counters", None)
    if stack is None:
        stack = _state.flop_counters = []
    stack.append(counter)
    try:
        yield counter
    finally:
        stack.remove(counter)


def _report_flops(flops: int) -> None:
    for counter in getattr(_state, "flop_counters", ()):
        counter.flops += flops
        counter.calls += 1


# --------------------------------------------------------------------------
# public operations
# --------------------------------------------------------------------------


def check_finite(x: np.ndarray, what: str = "result") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")
    return x


def _float_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    dtype = np.result_type(a.dtype, b.dtype, np.float32)
    return (
        np.ascontiguousarray(a, dtype=dtype),
        np.ascontiguousarray(b, dtype=dtype),
    )


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with inner sums accumulated over k in ascending order."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    a, b = _float_pair(a, b)
    m, k = a.shape
    n = b.shape[1]
    out = np.empty((m, n), dtype=a.dtype)
    if k == 0:
        out.fill(0.0)
    elif m and n:
        _kernel("mm")(a, b, out)
    _report_flops(2 * m * n * k)
    return check_finite(out, "matmul")


def batched_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``out[i] = matmul(a[i], b)`` (shared ``b``) or ``matmul(a[i], b[i])``, bit for bit."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 3 or b.ndim not in (2, 3):
        raise DimensionError(f"batched_matmul expects (B,m,k) x (k,n)|(B,k,n), got {a.shape}, {b.shape}")
    kb = b.shape[-2]
    if a.shape[2] != kb or (b.ndim == 3 and b.shape[0] != a.shape[0]):
        raise DimensionError(f"batched_matmul shapes disagree: {a.shape} x {b.shape}")
    a, b = _float_pair(a, b)
    nb, m, k = a.shape
    n = b.shape[-1]
    out = np.empty((nb, m, n), dtype=a.dtype)
    if k == 0:
        out.fill(0.0)
    elif nb and m and n:
        _kernel("bmm" if b.ndim == 3 else "bmm_shared")(a, b, out)
    _report_flops(2 * nb * m * n * k)
    return check_finite(out, "batched_matmul")


def sum_rows(x: np.ndarray) -> np.ndarray:
    """Column sums of a 2-D array, accumulated row 0, 1, 2, ... in order."""
    x = np.ascontiguousarray(x)
    if x.ndim != 2:
        raise DimensionError(f"sum_rows expects a 2-D array, got {x.shape}")
    out = np.zeros(x.shape[1], dtype=x.dtype)
    if x.shape[0] and x.shape[1]:
        _kernel("sum_rows")(x, out)
    return out


def row_sum(x: np.ndarray) -> np.ndarray:
    """Row sums of a 2-D array, accumulated column 0, 1, 2, ... in order."""
    x = np.ascontiguousarray(x)
    if x.ndim != 2:
        raise DimensionError(f"row_sum expects a 2-D array, got {x.shape}")
    out = np.zeros(x.shape[0], dtype=x.dtype)
    if x.shape[0] and x.shape[1]:
        _kernel("row_sum")(x, out)
    return out


def row_dot(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-row dot products ``sum_c x[i,c] * y[i,c]`` in ascending ``c``."""
    x, y = _float_pair(np.asarray(x), np.asarray(y))
    if x.ndim != 2 or x.shape != y.shape:
        raise DimensionError(f"row_dot expects equal 2-D shapes, got {x.shape}, {y.shape}")
    out = np.zeros(x.shape[0], dtype=x.dtype)
    if x.shape[0] and x.shape[1]:
        _kernel("row_dot")(x, y, out)
    return out


def relu(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x, 0.0).astype(x.dtype, copy=False)


def softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Softmax of ``logits / temperature`` along the last axis (rank 1 or 2)."""
    if not temperature > 0:
        raise ParameterError(f"temperature must be > 0, got {temperature}")
    logits = np.asarray(logits)
    if logits.ndim not in (1, 2):
        raise DimensionError(f"softmax expects rank 1 or 2, got {logits.shape}")
    z = np.atleast_2d(logits) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    probs = e / row_sum(e)[:, None]
    return check_finite(probs.reshape(logits.shape), "softmax")


# --------------------------------------------------------------------------
# randomness
# --------------------------------------------------------------------------

# Stream identifiers. A stream is addressed by (seed, *keys) so any draw can be
# replayed without replaying the draws that preceded it.
STREAM_INIT = 1
STREAM_DATA = 2
STREAM_SHUFFLE = 3
STREAM_DROPOUT = 4
STREAM_NOISE = 5
STREAM_PERMUTATION = 6
STREAM_BENCH = 7
STREAM_STEP = 8
STREAM_EVAL = 9

_U64 = (1 << 64) - 1


class Rng:
    """Counter-based (Philox) generator addressed by ``(seed, *stream)``."""

    def __init__(self, seed: int, stream: Sequence[int] = ()) -> None:
        if seed < 0 or seed > _U64:
            raise ParameterError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = int(seed)
        self.stream = tuple(int(s) for s in stream)
        entropy = [self.seed & 0xFFFFFFFF, self.seed >> 32, *self.stream]
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

    def child(self, *keys: int) -> "Rng":
        return Rng(self.seed, self.stream + tuple(keys))

    def normal(self, shape, dtype=DEFAULT_DTYPE) -> np.ndarray:
        return self._gen.standard_normal(shape).astype(dtype, copy=False)

    def uniform(self, shape, lo: float = 0.0, hi: float = 1.0, dtype=DEFAULT_DTYPE) -> np.ndarray:
        return self._gen.uniform(lo, hi, shape).astype(dtype, copy=False)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, lo: int, hi: int, shape=None) -> np.ndarray:
        return self._gen.integers(lo, hi, size=shape)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream})"


def gaussian(rng: Rng, shape, dtype=DEFAULT_DTYPE) -> np.ndarray:
    return rng.normal(shape, dtype=dtype)


def uniform(rng: Rng, shape, lo: float, hi: float, dtype=DEFAULT_DTYPE) -> np.ndarray:
    return rng.uniform(shape, lo, hi, dtype=dtype)
