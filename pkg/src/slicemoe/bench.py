"""Naive vs grouped dispatch timing, plus analytic FLOP accounting."""

from __future__ import annotations

import csv
import hashlib
import itertools
import statistics
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from . import numerics as nx
from .autodiff import Variable
from .config import SliceMoEConfig
from .dispatch import ExpertParams, dispatch_grouped, dispatch_naive
from .errors import ConfigError, EquivalenceError
from .router import RouterParams, RoutingDecision, route, select_experts

BENCH_HEADER = (
    "batch", "d", "n_slices", "n_experts", "top_k", "ffn", "dtype", "threads",
    "naive_ms", "grouped_ms", "speedup", "flops", "checksum",
)

F32_RTOL = 1e-5


@dataclass(frozen=True)
class BenchSpec:
    batch: int
    d: int
    n_slices: int
    n_experts: int
    top_k: int
    ffn: int | None = None
    router_hidden: int = 256
    dtype: str = "float64"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.batch < 1:
            raise ConfigError(f"batch must be >= 1, got {self.batch}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be float64 or float32, got {self.dtype!r}")
        self.model_config()

    def model_config(self) -> SliceMoEConfig:
        return SliceMoEConfig(
            d=self.d, n_slices=self.n_slices, top_k=self.top_k, n_experts=self.n_experts,
            router_hidden=self.router_hidden, expert_hidden=self.ffn, dropout=0.0,
        )

    @property
    def ffn_width(self) -> int:
        return self.model_config().ffn_width


@dataclass(frozen=True)
class FlopCount:
    routing: int
    experts: int
    dense_reference: int

    @property
    def total(self) -> int:
        return self.routing + self.experts


def flop_count(
    batch: int,
    d: int,
    n_slices: int,
    top_k: int,
    n_experts: int,
    router_hidden: int = 256,
    ffn: int | None = None,
) -> FlopCount:
    """Closed-form multiply-add FLOPs (2 per MAC) of one layer forward over ``batch`` tokens.

    ``top_k = 0`` is accepted as a boundary case with no expert work.
    """
    w = d // n_slices
    f = 4 * w if ffn is None else ffn
    slices = batch * n_slices
    routing = slices * (2 * w * router_hidden + 2 * router_hidden * n_experts)
    experts = slices * top_k * (2 * w * f + 2 * f * w)
    dense = 2 * batch * (2 * d * 4 * d)
    return FlopCount(routing, experts, dense)


def flop_count_for(cfg: SliceMoEConfig, batch: int) -> FlopCount:
    return flop_count(batch, cfg.d, cfg.n_slices, cfg.top_k, cfg.n_experts, cfg.router_hidden, cfg.ffn_width)


def median_ms(fn: Callable[[], object], repeats: int = 20, warmup: int = 3) -> float:
    """Median wall time of ``fn`` in milliseconds over ``repeats`` calls after ``warmup`` untimed ones."""
    if repeats < 1 or warmup < 0:
        raise ConfigError("repeats must be >= 1 and warmup >= 0")
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1000.0)
    return statistics.median(times)


@dataclass
class BenchInstance:
    spec: BenchSpec
    slabs: Variable
    decision: RoutingDecision
    experts: ExpertParams
    router: RouterParams


def build_instance(spec: BenchSpec) -> BenchInstance:
    """Random layer and inputs, with routing computed once (eval mode) so only dispatch is timed."""
    cfg = spec.model_config()
    dtype = np.dtype(spec.dtype)
    rng = nx.Rng(spec.seed).child(nx.STREAM_BENCH)
    router = RouterParams.init(cfg, rng.child(0))
    experts = ExpertParams.init(cfg, rng.child(1))
    # non-zero biases so every term of the FFN is exercised
    experts.b1.value = 0.1 * nx.gaussian(rng.child(2), experts.b1.shape)
    experts.b2.value = 0.1 * nx.gaussian(rng.child(3), experts.b2.shape)
    for group in (router, experts):
        for var in group.named().values():
            var.value = var.value.astype(dtype)
    x = nx.gaussian(rng.child(4), (spec.batch, spec.d), dtype=dtype)
    with ad.no_grad():
        slabs = ad.constant(x.reshape(spec.batch * spec.n_slices, cfg.slice_width))
        _, probs = route(slabs, router, cfg.temperature)
        decision = select_experts(probs, cfg.top_k, spec.batch, spec.n_slices)
    return BenchInstance(spec, slabs, decision, experts, router)


def checksum(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()[:16]


def _outputs_match(a: np.ndarray, b: np.ndarray, dtype: str) -> bool:
    if a.shape != b.shape or a.dtype != b.dtype:
        return False
    if dtype == "float64":
        return a.tobytes() == b.tobytes()
    return bool(np.allclose(a, b, rtol=F32_RTOL, atol=0.0))


@dataclass
class BenchResult:
    spec: BenchSpec
    threads: int
    naive_ms: float
    grouped_ms: float
    checksum_naive: str
    checksum_grouped: str
    flops: FlopCount

    @property
    def speedup(self) -> float:
        return self.naive_ms / self.grouped_ms

    @property
    def checksum(self) -> str:
        return self.checksum_grouped


GroupedFn = Callable[[Variable, RoutingDecision, ExpertParams], Variable]


def bench_one(
    spec: BenchSpec,
    *,
    repeats: int = 20,
    warmup: int = 3,
    threads: int = 1,
    grouped_impl: GroupedFn | None = None,
) -> BenchResult:
    inst = build_instance(spec)

    def grouped():
        if grouped_impl is not None:
            return grouped_impl(inst.slabs, inst.decision, inst.experts)
        return dispatch_grouped(inst.slabs, inst.decision, inst.experts, threads=threads)

    def naive():
        return dispatch_naive(inst.slabs, inst.decision, inst.experts)

    with ad.no_grad():
        out_naive = naive().value
        out_grouped = grouped().value
        if not _outputs_match(out_naive, out_grouped, spec.dtype):
            raise EquivalenceError(f"grouped dispatch diverges from the naive path for {spec}; refusing to time")
        naive_ms = median_ms(naive, repeats, warmup)
        grouped_ms = median_ms(grouped, repeats, warmup)
    cfg = spec.model_config()
    return BenchResult(
        spec, threads, naive_ms, grouped_ms, checksum(out_naive), checksum(out_grouped), flop_count_for(cfg, spec.batch)
    )


def run_bench(
    grid: Iterable[BenchSpec],
    *,
    repeats: int = 20,
    warmup: int = 3,
    threads: int = 1,
    out_csv: str | Path | None = None,
    grouped_impl: GroupedFn | None = None,
) -> list[BenchResult]:
    """Verify then time every spec; the CSV is written only once every spec has passed verification."""
    specs = list(grid)
    results = [
        bench_one(s, repeats=repeats, warmup=warmup, threads=threads, grouped_impl=grouped_impl) for s in specs
    ]
    if out_csv is not None:
        write_bench_csv(results, out_csv)
    return results


def write_bench_csv(results: Sequence[BenchResult], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(BENCH_HEADER)
        for r in results:
            s = r.spec
            writer.writerow([
                s.batch, s.d, s.n_slices, s.n_experts, s.top_k, s.ffn_width, s.dtype, r.threads,
                f"{r.naive_ms:.4f}", f"{r.grouped_ms:.4f}", f"{r.speedup:.3f}", r.flops.total, r.checksum,
            ])


def grid_from_lists(
    batch: Sequence[int],
    d: Sequence[int],
    n_slices: Sequence[int],
    n_experts: Sequence[int],
    top_k: Sequence[int],
    ffn: Sequence[int | None] = (None,),
    dtype: str = "float64",
    router_hidden: int = 256,
    seed: int = 0,
) -> list[BenchSpec]:
    return [
        BenchSpec(b, dd, s, e, k, f, router_hidden, dtype, seed)
        for b, dd, s, e, k, f in itertools.product(batch, d, n_slices, n_experts, top_k, ffn)
    ]
