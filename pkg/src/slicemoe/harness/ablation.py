"""Ablation sweeps over one config knob with paired seeds."""

from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from ..config import TrainConfig
from ..errors import ConfigError
from .data import generate_synthetic
from .train import train

SWEEPS: dict[str, tuple[str, tuple]] = {
    "slices": ("n_slices", (1, 2, 4, 8, 16)),
    "k": ("top_k", (1, 2, 3)),
    "noise": ("noise_sigma", (0.0, 0.1, 0.5, 1.0, 2.0)),
    "temperature": ("temperature", (0.25, 0.5, 1.0, 2.0, 4.0)),
    "shuffle": ("permutation", ("contiguous", "shuffled")),
}

ABLATION_HEADER = ("sweep", "setting", "seed", "val_acc", "ele", "val_loss", "train_loss", "cap_loss", "wall_ms")


@dataclass
class AblationRow:
    sweep: str
    setting: Any
    seed: int
    val_acc: float
    ele: float
    val_loss: float
    train_loss: float
    cap_loss: float
    wall_ms: float


@dataclass
class AblationTable:
    sweep: str
    key: str
    rows: list[AblationRow]

    def settings(self) -> list:
        seen: list = []
        for r in self.rows:
            if r.setting not in seen:
                seen.append(r.setting)
        return seen

    def mean(self, setting, metric: str = "val_acc") -> float:
        vals = [getattr(r, metric) for r in self.rows if r.setting == setting]
        return float(np.mean(vals))

    def summary(self, metric: str = "val_acc") -> dict:
        return {s: self.mean(s, metric) for s in self.settings()}

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(ABLATION_HEADER)
            for r in self.rows:
                writer.writerow(
                    [r.sweep, r.setting, r.seed]
                    + [repr(float(getattr(r, k))) for k in ABLATION_HEADER[3:8]]
                    + [f"{r.wall_ms:.3f}"]
                )


def sweep_configs(sweep: str, base: TrainConfig, values: Sequence | None = None) -> tuple[str, list[tuple[Any, TrainConfig]]]:
    """Build (and thereby validate) every config of the sweep before anything runs."""
    if sweep not in SWEEPS:
        raise ConfigError(f"unknown sweep {sweep!r}; choose from {', '.join(SWEEPS)}")
    key, default_values = SWEEPS[sweep]
    values = tuple(values) if values is not None else default_values
    if not values:
        raise ConfigError("sweep has no values")
    out = []
    for v in values:
        try:
            out.append((v, base.replace(**{key: v})))
        except ConfigError as exc:
            raise ConfigError(f"invalid {sweep} sweep value {v!r}: {exc}") from None
    return key, out


def _run_one(args) -> AblationRow:
    sweep, setting, seed, cfg = args
    res = train(cfg, generate_synthetic(cfg.data))
    m = res.final
    wall = sum(h.wall_ms for h in res.history)
    return AblationRow(sweep, setting, seed, m.val_acc, m.ele, m.val_loss, m.train_loss, m.cap_loss, wall)


def ablate(
    sweep: str,
    base: TrainConfig,
    *,
    values: Sequence | None = None,
    seeds: Sequence[int] = (0, 1, 2),
    workers: int = 1,
) -> AblationTable:
    """Run every sweep value under each seed. Settings sharing a seed share data and initialization streams."""
    key, configs = sweep_configs(sweep, base, values)
    jobs = [
        (sweep, setting, seed, cfg.replace(seed=seed, data_seed=seed))
        for seed in seeds
        for setting, cfg in configs
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_one, jobs))
    else:
        rows = [_run_one(job) for job in jobs]
    rows.sort(key=lambda r: ([s for s, _ in configs].index(r.setting), r.seed))
    return AblationTable(sweep, key, rows)
