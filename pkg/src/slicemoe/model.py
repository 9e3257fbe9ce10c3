"""The SliceMoE layer and the toy classifier built on it."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import autodiff as ad
from . import numerics as nx
from .autodiff import Variable
from .config import SliceMoEConfig
from .dispatch import ExpertParams, count_expert_rows, dispatch
from .objectives import LossBundle, capacity_loss, combine_losses, cross_entropy, soft_counts
from .router import (
    RouterParams,
    RoutingDecision,
    cross_slice_dropout,
    make_permutation,
    route,
    select_experts,
    validate_permutation,
)

@dataclass
class RoutingTrace:
    """Everything random or discrete about one forward pass, for exact replay."""

    expert_ids: np.ndarray
    keep: np.ndarray | None
    noise: np.ndarray | None


@dataclass
class LayerOutput:
    out: Variable
    decision: RoutingDecision
    probs: Variable
    trace: RoutingTrace


class SliceMoELayer:
    def __init__(self, cfg: SliceMoEConfig, rng: nx.Rng, permutation: np.ndarray | None = None) -> None:
        self.config = cfg
        self.router = RouterParams.init(cfg, rng.child(0))
        self.experts = ExpertParams.init(cfg, rng.child(1))
        self.permutation = None if permutation is None else validate_permutation(permutation, cfg.d)
        self._inverse = None if permutation is None else np.argsort(self.permutation)

    def parameters(self) -> dict[str, Variable]:
        return {**self.router.named(), **self.experts.named()}

    def forward(
        self,
        x,
        *,
        training: bool = False,
        rng: nx.Rng | None = None,
        frozen: RoutingTrace | None = None,
        mode: str = "grouped",
        threads: int = 1,
        eval_noise: bool = False,
    ) -> LayerOutput:
        """Route and process ``x`` of shape ``(B, d)`` (or ``(B, T, d)`` in sequence mode).

        ``rng`` is the per-step stream; dropout and logit noise draw from its
        children. ``frozen`` replays a previous pass's selection, dropout mask
        and noise instead of drawing them.
        """
        cfg = self.config
        xv = x if isinstance(x, Variable) else ad.constant(x)
        lead = xv.shape[:-1]
        if xv.ndim == 3:
            xv = ad.reshape(xv, (lead[0] * lead[1], cfg.d))
        n_tokens = xv.shape[0]
        if self.permutation is not None:
            xv = ad.permute_columns(xv, self.permutation)
        slabs = ad.reshape(xv, (n_tokens * cfg.n_slices, cfg.slice_width))

        sigma = cfg.noise_sigma if (training or eval_noise) else 0.0
        noise = None
        if sigma > 0:
            if frozen is not None and frozen.noise is not None:
                noise = frozen.noise
            else:
                if rng is None:
                    raise ValueError("router noise requires an rng")
                noise = nx.gaussian(rng.child(nx.STREAM_NOISE), (slabs.shape[0], cfg.n_experts), slabs.value.dtype)
        _, probs = route(slabs, self.router, cfg.temperature, sigma, noise=noise)

        if frozen is not None:
            gate = ad.take_along(probs, frozen.expert_ids)
            decision = RoutingDecision(frozen.expert_ids, gate, gate, n_tokens, cfg.n_slices)
        else:
            decision = select_experts(probs, cfg.top_k, n_tokens, cfg.n_slices)
        decision = cross_slice_dropout(
            decision,
            cfg.dropout,
            None if rng is None else rng.child(nx.STREAM_DROPOUT),
            training,
            keep=None if frozen is None else frozen.keep,
        )
        out = dispatch(slabs, decision, self.experts, mode=mode, threads=threads)
        if self._inverse is not None:
            out = ad.permute_columns(out, self._inverse)
        if len(lead) == 2:
            out = ad.reshape(out, (*lead, cfg.d))
        trace = RoutingTrace(decision.expert_ids, decision.keep, noise)
        return LayerOutput(out, decision, probs, trace)

    def measure_active_params(self, x) -> dict:
        """Instrumented eval forward: parameter touches per token from actual expert calls."""
        cfg = self.config
        block = self.experts.block_params
        with ad.no_grad(), count_expert_rows(cfg.n_experts) as counter:
            self.forward(x, training=False)
        n_tokens = np.asarray(x).reshape(-1, cfg.d).shape[0]
        touched = Fraction(int(counter.rows.sum()) * block, n_tokens)
        slots = cfg.n_slices * cfg.n_experts * block
        return {
            "rows_per_expert": counter.rows.copy(),
            "active_expert_params": touched,
            "active_fraction": touched / slots,
        }


class SliceMoEClassifier:
    """SliceMoE layer followed by a linear head ``d -> n_classes``."""

    def __init__(
        self,
        cfg: SliceMoEConfig,
        n_classes: int,
        seed: int = 0,
        permutation: np.ndarray | None = None,
    ) -> None:
        root = nx.Rng(seed)
        init = root.child(nx.STREAM_INIT)
        if permutation is None:
            permutation = make_permutation(cfg.permutation, cfg.d, root.child(nx.STREAM_PERMUTATION))
        self.config = cfg
        self.n_classes = n_classes
        self.seed = seed
        self.layer = SliceMoELayer(cfg, init, permutation)
        self.head_w = Variable(
            nx.gaussian(init.child(2), (cfg.d, n_classes)) / np.sqrt(cfg.d), requires_grad=True, name="head.w"
        )
        self.head_b = Variable(np.zeros(n_classes), requires_grad=True, name="head.b")

    @property
    def permutation(self) -> np.ndarray | None:
        return self.layer.permutation

    def parameters(self) -> dict[str, Variable]:
        return {**self.layer.parameters(), "head.w": self.head_w, "head.b": self.head_b}

    def bind(self, params: dict[str, Variable]) -> "SliceMoEClassifier":
        """Shallow copy whose parameters are the given Variables (missing names keep the originals)."""
        clone = copy.copy(self)
        clone.layer = copy.copy(self.layer)
        clone.layer.router = copy.copy(self.layer.router)
        clone.layer.experts = copy.copy(self.layer.experts)
        for name, var in params.items():
            group, attr = name.split(".")
            if group == "router":
                setattr(clone.layer.router, attr, var)
            elif group == "experts":
                setattr(clone.layer.experts, attr, var)
            elif name == "head.w":
                clone.head_w = var
            elif name == "head.b":
                clone.head_b = var
            else:
                raise KeyError(name)
        return clone

    def forward(self, x, **kwargs) -> tuple[Variable, LayerOutput]:
        lo = self.layer.forward(x, **kwargs)
        logits = ad.add_bias(ad.matmul(lo.out, self.head_w), self.head_b)
        return logits, lo

    def loss(self, x, labels, **kwargs) -> tuple[LossBundle, LayerOutput]:
        logits, lo = self.forward(x, **kwargs)
        task = cross_entropy(logits, labels)
        cap = capacity_loss(soft_counts(lo.decision, self.config.n_experts), self.config.alpha)
        return combine_losses(task, cap), lo
