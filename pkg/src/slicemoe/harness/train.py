"""Training loop, evaluation and per-epoch metrics."""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .. import autodiff as ad
from .. import numerics as nx
from ..config import TrainConfig
from ..dispatch import active_param_count
from ..errors import NumericError
from ..model import SliceMoEClassifier
from ..objectives import cross_entropy, ele_from_counts, hard_counts
from .data import Dataset, generate_synthetic
from .optim import Adam, AdamHyper

METRICS_HEADER = ("epoch", "train_loss", "cap_loss", "val_loss", "val_acc", "ele", "active_params", "wall_ms")


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    cap_loss: float
    val_loss: float
    val_acc: float
    ele: float
    active_params: int
    wall_ms: float


@dataclass
class EvalResult:
    loss: float
    accuracy: float
    ele: float
    counts: np.ndarray


@dataclass
class TrainResult:
    config: TrainConfig
    history: list[EpochMetrics]
    model: SliceMoEClassifier
    optimizer: Adam
    dataset: Dataset

    @property
    def final(self) -> EpochMetrics:
        return self.history[-1]


def evaluate(
    model: SliceMoEClassifier,
    x: np.ndarray,
    y: np.ndarray,
    batch_size: int = 256,
    *,
    eval_noise: bool = False,
    seed: int = 0,
    mode: str = "grouped",
) -> EvalResult:
    """Loss, accuracy and hard-count ELE with dropout off (and noise off unless ``eval_noise``)."""
    counts = np.zeros(model.config.n_experts, dtype=np.int64)
    loss_sum = 0.0
    correct = 0
    with ad.no_grad():
        for i, start in enumerate(range(0, len(x), batch_size)):
            xb, yb = x[start : start + batch_size], y[start : start + batch_size]
            rng = nx.Rng(seed).child(nx.STREAM_EVAL, i) if eval_noise else None
            logits, lo = model.forward(xb, training=False, rng=rng, eval_noise=eval_noise, mode=mode)
            loss_sum += float(cross_entropy(logits, yb).value) * len(xb)
            correct += int(np.sum(np.argmax(logits.value, axis=1) == yb))
            counts += hard_counts(lo.decision, model.config.n_experts)
    n = len(x)
    return EvalResult(loss_sum / n, correct / n, ele_from_counts(counts), counts)


def _check_step(bundle, epoch: int, step: int) -> None:
    if not (np.isfinite(bundle.task_value) and np.isfinite(bundle.cap_value)):
        raise NumericError(
            f"non-finite loss at epoch {epoch} step {step}: task={bundle.task_value!r} cap={bundle.cap_value!r}"
        )


def train(
    config: TrainConfig,
    dataset: Dataset | None = None,
    *,
    on_epoch: Callable[[EpochMetrics], None] | None = None,
) -> TrainResult:
    data = dataset if dataset is not None else generate_synthetic(config.data)
    model = SliceMoEClassifier(config.model, data.n_classes, seed=config.seed)
    params = model.parameters()
    opt = Adam(params, AdamHyper(config.lr, config.beta1, config.beta2, config.eps))
    root = nx.Rng(config.seed)
    active = active_param_count(config.model).active_params
    n_train = len(data.x_train)

    history: list[EpochMetrics] = []
    step = 0
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = root.child(nx.STREAM_SHUFFLE, epoch).permutation(n_train)
        task_sum = cap_sum = 0.0
        for start in range(0, n_train, config.batch_size):
            idx = order[start : start + config.batch_size]
            try:
                with ad.Tape():
                    bundle, _ = model.loss(
                        data.x_train[idx],
                        data.y_train[idx],
                        training=True,
                        rng=root.child(nx.STREAM_STEP, step),
                        mode=config.dispatch,
                    )
                    _check_step(bundle, epoch, step)
                    ad.backward(bundle.total)
            except NumericError as exc:
                if "epoch" in str(exc):
                    raise
                raise NumericError(f"non-finite value at epoch {epoch} step {step}: {exc}") from exc
            for name, p in params.items():
                if not np.all(np.isfinite(p.grad)):
                    raise NumericError(
                        f"non-finite gradient for {name} at epoch {epoch} step {step}: "
                        f"task={bundle.task_value!r} cap={bundle.cap_value!r}"
                    )
            opt.step()
            opt.zero_grad()
            task_sum += bundle.task_value * len(idx)
            cap_sum += bundle.cap_value * len(idx)
            step += 1
        ev = evaluate(
            model, data.x_val, data.y_val, config.eval_batch_size,
            eval_noise=config.eval_noise, seed=config.seed, mode=config.dispatch,
        )
        wall_ms = (time.perf_counter() - t0) * 1000.0
        m = EpochMetrics(epoch, task_sum / n_train, cap_sum / n_train, ev.loss, ev.accuracy, ev.ele, active, wall_ms)
        history.append(m)
        if on_epoch is not None:
            on_epoch(m)
    return TrainResult(config, history, model, opt, data)


def write_metrics_csv(history: list[EpochMetrics], path: str | Path, *, include_wall_time: bool = False) -> None:
    """Write ``metrics.csv``. ``wall_ms`` is left empty unless requested so the file is reproducible."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for m in history:
            row = asdict(m)
            row["wall_ms"] = f"{m.wall_ms:.3f}" if include_wall_time else ""
            writer.writerow([_fmt(row[k]) for k in METRICS_HEADER])


def write_timing_csv(history: list[EpochMetrics], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("epoch", "wall_ms"))
        for m in history:
            writer.writerow((m.epoch, f"{m.wall_ms:.3f}"))


def read_metrics_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


__all__ = [
    "METRICS_HEADER",
    "EpochMetrics",
    "EvalResult",
    "TrainResult",
    "evaluate",
    "read_metrics_csv",
    "train",
    "write_metrics_csv",
    "write_timing_csv",
]
