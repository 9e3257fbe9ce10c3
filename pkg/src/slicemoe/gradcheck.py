"""Finite-difference gradient checks for every differentiable op and the composed layer.

Each case draws a random point, records a scalar function of its inputs,
backpropagates, and compares against central differences. Anything discrete
or random (top-k selection, dropout masks, logit noise) is drawn once at the
point and then held fixed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

from . import autodiff as ad
from . import numerics as nx
from .autodiff import Variable
from .config import SliceMoEConfig
from .dispatch import ExpertParams, expert_ffn, gate_rows
from .model import SliceMoEClassifier
from .objectives import capacity_loss, combine_losses, cross_entropy, soft_counts
from .router import RouterParams, renormalize_kept, route

TOLERANCE = 1e-4
DEFAULT_H = 1e-5

Sample = tuple[dict[str, np.ndarray], Any]


@dataclass(frozen=True)
class GradCase:
    name: str
    sample: Callable[[nx.Rng], Sample]
    build: Callable[[dict[str, Variable], Any], Variable]


def _project(out: Variable, weights: np.ndarray) -> Variable:
    """Fixed random linear functional so array-valued ops reduce to a scalar."""
    return ad.total(ad.mul(out, ad.constant(weights)))


def _away_from_zero(rng: nx.Rng, shape, margin: float = 0.05) -> np.ndarray:
    x = nx.gaussian(rng, shape)
    return np.where(x >= 0, x + margin, x - margin)


def _matmul_case(rng):
    a, b = nx.gaussian(rng.child(0), (4, 3)), nx.gaussian(rng.child(1), (3, 5))
    return {"a": a, "b": b}, nx.gaussian(rng.child(2), (4, 5))


def _bmm_case(rng):
    a, b = nx.gaussian(rng.child(0), (3, 4, 2)), nx.gaussian(rng.child(1), (3, 2, 5))
    return {"a": a, "b": b}, nx.gaussian(rng.child(2), (3, 4, 5))


def _bmm_shared_case(rng):
    a, b = nx.gaussian(rng.child(0), (3, 4, 2)), nx.gaussian(rng.child(1), (2, 5))
    return {"a": a, "b": b}, nx.gaussian(rng.child(2), (3, 4, 5))


def _softmax_case(rng):
    return {"x": nx.gaussian(rng.child(0), (4, 6))}, nx.gaussian(rng.child(1), (4, 6))


def _relu_case(rng):
    return {"x": _away_from_zero(rng.child(0), (5, 4))}, nx.gaussian(rng.child(1), (5, 4))


def _gate_case(rng):
    slabs = nx.gaussian(rng.child(0), (3, 4))
    weights = nx.uniform(rng.child(1), (3, 2), 0.1, 1.0)
    assignments = rng.child(2).permutation(6)
    return {"slabs": slabs, "weights": weights}, (assignments, nx.gaussian(rng.child(3), (6, 4)))


def _renorm_case(rng):
    p = nx.uniform(rng.child(0), (5, 3), 0.05, 1.0)
    keep = nx.uniform(rng.child(1), (5, 3), 0.0, 1.0) >= 0.4
    keep[~keep.any(axis=1), 0] = True
    return {"p": p}, (keep, nx.gaussian(rng.child(2), (5, 3)))


def _capacity_case(rng):
    return {"c": nx.uniform(rng.child(0), (6,), 0.5, 4.0)}, 0.1


def _xent_case(rng):
    logits = 2.0 * nx.gaussian(rng.child(0), (8, 3))
    return {"logits": logits}, rng.child(1).integers(0, 3, 8)


def _small_config(dropout: float = 0.5, noise: float = 0.3) -> SliceMoEConfig:
    return SliceMoEConfig(
        d=8, n_slices=2, top_k=2, n_experts=3, router_hidden=6, expert_hidden=8,
        alpha=0.1, dropout=dropout, noise_sigma=noise,
    )


def _nonzero_biases(params: dict[str, Variable], rng: nx.Rng) -> dict[str, np.ndarray]:
    out = {}
    for i, (k, v) in enumerate(params.items()):
        val = v.value
        if k.endswith(("b1", "b2", ".b")):
            val = 0.1 * nx.gaussian(rng.child(i), v.shape)
        out[k] = val.copy()
    return out


def _expert_case(rng):
    cfg = _small_config()
    experts = ExpertParams.init(cfg, rng.child(0))
    inputs = _nonzero_biases(experts.named(), rng.child(1))
    inputs["x"] = nx.gaussian(rng.child(2), (5, cfg.slice_width))
    return inputs, (1, nx.gaussian(rng.child(3), (5, cfg.slice_width)))


def _expert_build(v, ctx):
    e, proj = ctx
    experts = ExpertParams(v["experts.w1"], v["experts.b1"], v["experts.w2"], v["experts.b2"])
    return _project(expert_ffn(v["x"], experts, e), proj)


def _router_case(rng):
    cfg = _small_config()
    router = RouterParams.init(cfg, rng.child(0))
    inputs = _nonzero_biases(router.named(), rng.child(1))
    inputs["x"] = nx.gaussian(rng.child(2), (6, cfg.slice_width))
    noise = nx.gaussian(rng.child(3), (6, cfg.n_experts))
    return inputs, (cfg, noise, nx.gaussian(rng.child(4), (6, cfg.n_experts)))


def _router_build(v, ctx):
    cfg, noise, proj = ctx
    router = RouterParams(v["router.w1"], v["router.b1"], v["router.w2"], v["router.b2"])
    _, probs = route(v["x"], router, 0.8, cfg.noise_sigma, noise=noise)
    return _project(probs, proj)


def _layer_case(rng):
    """Whole classifier: slicing, routing, Eq. 1 gating, experts, reassembly, CE + capacity loss."""
    cfg = _small_config()
    model = SliceMoEClassifier(cfg, 3, seed=int(rng.integers(0, 2**31)))
    inputs = _nonzero_biases(model.parameters(), rng.child(0))
    x = nx.gaussian(rng.child(1), (4, cfg.d))
    labels = rng.child(2).integers(0, 3, 4)
    bound = model.bind({k: ad.constant(v) for k, v in inputs.items()})
    with ad.no_grad():
        _, lo = bound.forward(x, training=True, rng=rng.child(3))
    inputs["x"] = x
    return inputs, (model, labels, lo.trace)


def _layer_build(v, ctx):
    model, labels, trace = ctx
    x = v["x"]
    params = {k: var for k, var in v.items() if k != "x"}
    bundle, _ = model.bind(params).loss(x, labels, training=True, frozen=trace)
    return bundle.total


def _layer_cap_only_build(v, ctx):
    """Capacity loss alone, differentiated through soft counts into the router."""
    model, labels, trace = ctx
    params = {k: var for k, var in v.items() if k != "x"}
    _, lo = model.bind(params).forward(v["x"], training=True, frozen=trace)
    return capacity_loss(soft_counts(lo.decision, model.config.n_experts), model.config.alpha)


CASES: dict[str, GradCase] = {
    c.name: c
    for c in (
        GradCase("matmul", _matmul_case, lambda v, r: _project(ad.matmul(v["a"], v["b"]), r)),
        GradCase("batched_matmul", _bmm_case, lambda v, r: _project(ad.batched_matmul(v["a"], v["b"]), r)),
        GradCase("batched_matmul_shared", _bmm_shared_case, lambda v, r: _project(ad.batched_matmul(v["a"], v["b"]), r)),
        GradCase("softmax", _softmax_case, lambda v, r: _project(ad.softmax(v["x"], 0.7), r)),
        GradCase("relu", _relu_case, lambda v, r: _project(ad.relu(v["x"]), r)),
        GradCase(
            "gate", _gate_case,
            lambda v, c: _project(gate_rows(v["slabs"], v["weights"], c[0]), c[1]),
        ),
        GradCase(
            "dropout_renormalize", _renorm_case,
            lambda v, c: _project(renormalize_kept(v["p"], c[0]), c[1]),
        ),
        GradCase("capacity_loss", _capacity_case, lambda v, a: capacity_loss(v["c"], a)),
        GradCase("cross_entropy", _xent_case, lambda v, y: cross_entropy(v["logits"], y)),
        GradCase("expert_ffn", _expert_case, _expert_build),
        GradCase("router", _router_case, _router_build),
        GradCase("router_capacity", _layer_case, _layer_cap_only_build),
        GradCase("layer", _layer_case, _layer_build),
    )
}


def check_case(case: GradCase, rng: nx.Rng, h: float = DEFAULT_H) -> float:
    """Max relative error between backprop and central differences over all inputs at one point."""
    inputs, ctx = case.sample(rng)
    leaves = {k: Variable(np.array(v, dtype=np.float64), requires_grad=True, name=k) for k, v in inputs.items()}
    with ad.Tape():
        out = case.build(leaves, ctx)
        ad.backward(out)
    worst = 0.0
    for name, base in inputs.items():
        def f(arr, name=name):
            with ad.no_grad():
                vals = {k: ad.constant(arr if k == name else inputs[k]) for k in inputs}
                return float(case.build(vals, ctx).value)

        numeric = ad.finite_diff_grad(f, base, h)
        worst = max(worst, ad.relative_error(leaves[name].grad, numeric))
    return worst


def run_gradcheck(
    names: list[str] | None = None,
    points: int = 10,
    seed: int = 0,
    h: float = DEFAULT_H,
) -> dict[str, float]:
    """Max relative error per case over ``points`` random points."""
    results = {}
    for name in names or list(CASES):
        case = CASES[name]
        rng = nx.Rng(seed).child(11, sum(name.encode()))
        results[name] = max(check_case(case, rng.child(p), h) for p in range(points))
    return results
