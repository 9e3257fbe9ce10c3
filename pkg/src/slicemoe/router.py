"""Shared slice router: slicing, routing MLP, top-k selection and cross-slice dropout."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import numerics as nx
from .autodiff import Variable
from .config import SliceMoEConfig
from .errors import ConfigError, ContractError, DimensionError, ParameterError


@dataclass
class RouterParams:
    w1: Variable  # (slice_width, router_hidden)
    b1: Variable  # (router_hidden,)
    w2: Variable  # (router_hidden, n_experts)
    b2: Variable  # (n_experts,)

    @classmethod
    def init(cls, cfg: SliceMoEConfig, rng: nx.Rng) -> "RouterParams":
        w, h, e = cfg.slice_width, cfg.router_hidden, cfg.n_experts
        return cls(
            w1=Variable(nx.gaussian(rng.child(0), (w, h)) / np.sqrt(w), requires_grad=True, name="router.w1"),
            b1=Variable(np.zeros(h), requires_grad=True, name="router.b1"),
            w2=Variable(nx.gaussian(rng.child(1), (h, e)) / np.sqrt(h), requires_grad=True, name="router.w2"),
            b2=Variable(np.zeros(e), requires_grad=True, name="router.b2"),
        )

    def named(self) -> dict[str, Variable]:
        return {"router.w1": self.w1, "router.b1": self.b1, "router.w2": self.w2, "router.b2": self.b2}

    @property
    def n_params(self) -> int:
        return sum(v.value.size for v in self.named().values())


def _as_var(x) -> tuple[Variable, bool]:
    if isinstance(x, Variable):
        return x, True
    return ad.constant(x), False


# --------------------------------------------------------------------------
# slicing
# --------------------------------------------------------------------------


def partition_slices(h, n_slices: int):
    """``(B, d) -> (B, S, d/S)``; slice ``s`` of token ``b`` is ``h[b, s*w:(s+1)*w]``."""
    hv, wrapped = _as_var(h)
    if hv.ndim != 2:
        raise DimensionError(f"partition_slices expects (B, d), got {hv.shape}")
    b, d = hv.shape
    if n_slices < 1 or d % n_slices:
        raise ConfigError(f"d={d} is not divisible by n_slices={n_slices}")
    out = ad.reshape(hv, (b, n_slices, d // n_slices))
    return out if wrapped else out.value


def concat_slices(slabs):
    """Inverse of :func:`partition_slices`: ``(B, S, w) -> (B, S*w)``."""
    sv, wrapped = _as_var(slabs)
    if sv.ndim != 3:
        raise DimensionError(f"concat_slices expects (B, S, w), got {sv.shape}")
    b, s, w = sv.shape
    out = ad.reshape(sv, (b, s * w))
    return out if wrapped else out.value


def make_permutation(mode: str, d: int, rng: nx.Rng) -> np.ndarray | None:
    """Coordinate permutation for the shuffled-slice ablation (None when contiguous)."""
    if mode == "contiguous":
        return None
    if mode == "shuffled":
        return rng.permutation(d)
    raise ConfigError(f"unknown permutation mode {mode!r}")


def validate_permutation(perm, d: int) -> np.ndarray:
    perm = np.asarray(perm)
    if perm.shape != (d,) or perm.dtype.kind not in "iu" or not np.array_equal(np.sort(perm), np.arange(d)):
        raise ConfigError(f"permutation is not a bijection on [0, {d})")
    return perm.astype(np.intp)


def apply_permutation(slabs, perm):
    """Reorder coordinates (``out[:, j] = x[:, perm[j]]``) before slicing; identity when ``perm`` is None."""
    sv, wrapped = _as_var(slabs)
    if perm is None:
        return slabs
    if sv.ndim != 3:
        raise DimensionError(f"apply_permutation expects (B, S, w), got {sv.shape}")
    b, s, w = sv.shape
    perm = validate_permutation(perm, s * w)
    flat = ad.permute_columns(ad.reshape(sv, (b, s * w)), perm)
    out = ad.reshape(flat, (b, s, w))
    return out if wrapped else out.value


# --------------------------------------------------------------------------
# routing
# --------------------------------------------------------------------------


def route(
    slices,
    params: RouterParams,
    temperature: float = 1.0,
    noise_sigma: float = 0.0,
    rng: nx.Rng | None = None,
    noise: np.ndarray | None = None,
) -> tuple[Variable, Variable]:
    """Router MLP on each row of ``slices`` (``(N, w)`` or a single ``(w,)`` slice).

    Returns ``(logits, probs)``. With ``noise_sigma > 0`` the logits are
    perturbed by ``noise_sigma * N(0, 1)`` drawn from ``rng`` (or taken from
    ``noise``, standard-normal, when replaying) before the softmax.
    """
    if not temperature > 0:
        raise ParameterError(f"temperature must be > 0, got {temperature}")
    if noise_sigma < 0:
        raise ParameterError(f"noise_sigma must be >= 0, got {noise_sigma}")
    x, _ = _as_var(slices)
    single = x.ndim == 1
    if single:
        x = ad.reshape(x, (1, x.shape[0]))
    if x.ndim != 2 or x.shape[1] != params.w1.shape[0]:
        raise DimensionError(f"router expects rows of width {params.w1.shape[0]}, got {x.shape}")
    hidden = ad.relu(ad.add_bias(ad.matmul(x, params.w1), params.b1))
    logits = ad.add_bias(ad.matmul(hidden, params.w2), params.b2)
    if noise_sigma > 0:
        if noise is None:
            if rng is None:
                raise ContractError("noise_sigma > 0 requires an rng")
            noise = nx.gaussian(rng, logits.shape, dtype=logits.value.dtype)
        logits = ad.add_const(logits, noise_sigma * noise)
    probs = ad.softmax(logits, temperature)
    if single:
        e = logits.shape[1]
        return ad.reshape(logits, (e,)), ad.reshape(probs, (e,))
    return logits, probs


def top_k_select(probs, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices and values of the ``k`` largest probabilities, descending, ties to the lower index."""
    p = np.asarray(probs.value if isinstance(probs, Variable) else probs)
    n_experts = p.shape[-1]
    if not 1 <= k <= n_experts:
        raise ConfigError(f"top_k must lie in [1, {n_experts}], got {k}")
    order = np.argsort(-p, axis=-1, kind="stable")[..., :k]
    return order, np.take_along_axis(p, order, axis=-1)


@dataclass
class RoutingDecision:
    """Per (token, slice) routing, flattened to ``N = B*S`` rows of ``k`` assignments."""

    expert_ids: np.ndarray  # (N, k) int
    gate_probs: Variable  # (N, k) softmax probabilities of the selected experts
    weights: Variable  # (N, k) values used to scale the slice
    n_tokens: int
    n_slices: int
    keep: np.ndarray | None = None  # (N, k) dropout survivors, None when dropout inactive

    @property
    def top_k(self) -> int:
        return self.expert_ids.shape[1]

    @property
    def n_rows(self) -> int:
        return self.expert_ids.shape[0]


def select_experts(probs: Variable, k: int, n_tokens: int, n_slices: int) -> RoutingDecision:
    ids, _ = top_k_select(probs, k)
    gate = ad.take_along(probs, ids)
    return RoutingDecision(ids, gate, gate, n_tokens, n_slices)


def renormalize_kept(probs: Variable, keep: np.ndarray) -> Variable:
    """``w = keep * p / sum_j(keep * p)`` row by row."""
    kept = np.where(keep, probs.value, 0.0)
    z = nx.row_sum(kept)[:, None]
    # survivors whose probabilities all underflowed to 0 share the weight equally
    flat = (z == 0)[:, 0]
    z_safe = np.where(z == 0, 1.0, z)
    w = kept / z_safe
    if flat.any():
        w[flat] = keep[flat] / keep[flat].sum(axis=1, keepdims=True)

    def back(g):
        dot = nx.row_dot(g, w)[:, None]
        d = np.where(keep, (g - dot) / z_safe, 0.0)
        d[flat] = 0.0
        return (d,)

    return ad.record(w, (probs,), back)


def dropout_mask(rng: nx.Rng, shape: tuple[int, int], rate: float) -> np.ndarray:
    """Bernoulli survivors; a row that loses every assignment keeps its top one."""
    keep = nx.uniform(rng, shape, 0.0, 1.0) >= rate
    dead = ~keep.any(axis=1)
    keep[dead, 0] = True
    return keep


def cross_slice_dropout(
    decision: RoutingDecision,
    rate: float,
    rng: nx.Rng | None,
    training: bool,
    keep: np.ndarray | None = None,
) -> RoutingDecision:
    """Zero each of the k assignments with probability ``rate`` and renormalize survivors.

    In eval mode, or with ``rate == 0``, the weights are the gate probabilities.
    ``keep`` replays a previously drawn mask.
    """
    if not 0 <= rate < 1:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0:
        return RoutingDecision(
            decision.expert_ids, decision.gate_probs, decision.gate_probs,
            decision.n_tokens, decision.n_slices,
        )
    if keep is None:
        if rng is None:
            raise ContractError("training-mode dropout requires an rng")
        keep = dropout_mask(rng, decision.expert_ids.shape, rate)
    weights = renormalize_kept(decision.gate_probs, keep)
    return RoutingDecision(
        decision.expert_ids, decision.gate_probs, weights,
        decision.n_tokens, decision.n_slices, keep=keep,
    )
