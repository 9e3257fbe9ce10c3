"""Training losses and balance metrics."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import numerics as nx
from .autodiff import Variable
from .errors import ContractError, DataError
from .router import RoutingDecision


def capacity_loss(soft_counts, alpha: float) -> Variable:
    """``alpha * (std / mean)**2`` over per-expert loads, population std.

    A batch with no load at all (mean 0) contributes 0 and emits a warning.
    """
    c = soft_counts if isinstance(soft_counts, Variable) else ad.constant(np.asarray(soft_counts, dtype=np.float64))
    if c.ndim != 1:
        raise ContractError(f"capacity_loss expects a vector of counts, got shape {c.shape}")
    n = c.shape[0]
    cv = c.value
    mean = nx.row_sum(cv[None])[0] / n
    if mean == 0:
        warnings.warn("capacity_loss on a batch with no assignments; returning 0", RuntimeWarning, stacklevel=2)
        return ad.record(np.zeros((), cv.dtype), (c,), lambda g: (np.zeros_like(cv),))
    if n < 2 or np.all(cv == cv[0]):
        # equal loads: zero loss and zero gradient, exactly
        return ad.record(np.zeros((), cv.dtype), (c,), lambda g: (np.zeros_like(cv),))
    dev = cv - mean
    var = nx.row_sum((dev * dev)[None])[0] / n
    loss = alpha * var / (mean * mean)

    def back(g):
        return (g * alpha * (2.0 * dev / (n * mean * mean) - 2.0 * var / (n * mean**3)),)

    return ad.record(np.asarray(loss), (c,), back)


def ele(loads) -> float:
    """Normalized load entropy ``-sum(l log l) / log E``: 1 when uniform, 0 when one expert takes all."""
    loads = np.asarray(loads, dtype=np.float64)
    if loads.ndim != 1 or loads.size == 0:
        raise ContractError(f"ele expects a non-empty load vector, got shape {loads.shape}")
    if np.any(loads < 0):
        raise ContractError("loads must be non-negative")
    if abs(float(loads.sum()) - 1.0) > 1e-9:
        raise ContractError(f"loads must sum to 1, got {loads.sum()!r}")
    n = loads.size
    if n == 1 or np.all(loads == loads[0]):
        return 1.0
    nz = loads[loads > 0]
    h = -float(np.sum(nz * np.log(nz)))
    return min(max(h / math.log(n), 0.0), 1.0) + 0.0  # no -0.0


def ele_from_counts(counts) -> float:
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise ContractError("ele needs at least one assignment")
    return ele(counts / total)


def cross_entropy(logits: Variable, labels) -> Variable:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    x = logits.value
    labels = np.asarray(labels)
    if x.ndim != 2 or labels.shape != (x.shape[0],):
        raise ContractError(f"cross_entropy expects (B, C) logits and (B,) labels, got {x.shape}, {labels.shape}")
    if labels.dtype.kind not in "iu" or np.any(labels < 0) or np.any(labels >= x.shape[1]):
        raise DataError(f"labels must be integers in [0, {x.shape[1]})")
    b = x.shape[0]
    rows = np.arange(b)
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    z = nx.row_sum(e)
    per_row = np.log(z) - shifted[rows, labels]
    loss = nx.row_sum(per_row[None])[0] / b

    def back(g):
        d = e / z[:, None]
        d[rows, labels] -= 1.0
        return (d * (g / b),)

    return ad.record(np.asarray(loss), (logits,), back)


def soft_counts(decision: RoutingDecision, n_experts: int) -> Variable:
    """Per-expert sum of the (pre-dropout) gate probabilities of assignments routed there."""
    ids = decision.expert_ids.reshape(-1)
    gp = decision.gate_probs
    out = np.zeros(n_experts, dtype=gp.value.dtype)
    np.add.at(out, ids, gp.value.reshape(-1))
    shape = gp.shape
    return ad.record(out, (gp,), lambda g: (g[ids].reshape(shape),))


def hard_counts(decision: RoutingDecision, n_experts: int) -> np.ndarray:
    """Number of assignments routed to each expert."""
    return np.bincount(decision.expert_ids.reshape(-1), minlength=n_experts).astype(np.int64)


@dataclass
class LossBundle:
    task: Variable
    cap: Variable
    total: Variable

    @property
    def task_value(self) -> float:
        return float(self.task.value)

    @property
    def cap_value(self) -> float:
        return float(self.cap.value)

    @property
    def total_value(self) -> float:
        return float(self.total.value)


def combine_losses(task: Variable, cap: Variable) -> LossBundle:
    return LossBundle(task, cap, ad.add(task, cap))
