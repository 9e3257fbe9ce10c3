"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..autodiff import Variable
from ..errors import ContractError


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(0, {k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    hyper: AdamHyper,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One Adam update. Returns new parameter arrays and a new state; inputs are not modified."""
    if set(grads) != set(params):
        raise ContractError(f"grads keys {sorted(grads)} do not match params {sorted(params)}")
    t = state.step + 1
    c1 = 1.0 - hyper.beta1**t
    c2 = 1.0 - hyper.beta2**t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = np.asarray(grads[name])
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        if g.shape != p.shape or m.shape != p.shape or v.shape != p.shape:
            raise ContractError(f"{name}: param {p.shape}, grad {g.shape}, state {m.shape}/{v.shape}")
        m = hyper.beta1 * m + (1.0 - hyper.beta1) * g
        v = hyper.beta2 * v + (1.0 - hyper.beta2) * (g * g)
        new_params[name] = p - hyper.lr * (m / c1) / (np.sqrt(v / c2) + hyper.eps)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(t, new_m, new_v)


class Adam:
    """Applies :func:`adam_step` to a dict of Variables in place, using their ``.grad``."""

    def __init__(self, params: dict[str, Variable], hyper: AdamHyper = AdamHyper()) -> None:
        self.params = params
        self.hyper = hyper
        self.state = AdamState.zeros_like({k: p.value for k, p in params.items()})

    def step(self) -> None:
        values = {k: p.value for k, p in self.params.items()}
        grads = {k: p.grad for k, p in self.params.items()}
        new, self.state = adam_step(values, grads, self.state, self.hyper)
        for k, p in self.params.items():
            p.value = new[k]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()
