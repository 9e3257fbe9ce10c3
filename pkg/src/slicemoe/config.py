"""Configuration dataclasses and the flat ``key = value`` config format."""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .errors import ConfigError

PERMUTATION_MODES = ("contiguous", "shuffled")
DISPATCH_MODES = ("grouped", "batched", "naive")


@dataclass(frozen=True)
class SliceMoEConfig:
    d: int = 64
    n_slices: int = 8
    top_k: int = 2
    n_experts: int = 16
    router_hidden: int = 256
    expert_hidden: int | None = None  # None -> 4 * slice width
    alpha: float = 0.05
    dropout: float = 0.2
    temperature: float = 1.0
    noise_sigma: float = 0.0
    permutation: str = "contiguous"

    def __post_init__(self) -> None:
        if self.d < 1 or self.n_slices < 1:
            raise ConfigError(f"d and n_slices must be positive, got d={self.d}, S={self.n_slices}")
        if self.d % self.n_slices:
            raise ConfigError(f"d={self.d} is not divisible by n_slices={self.n_slices}")
        if self.n_experts < 1:
            raise ConfigError(f"n_experts must be >= 1, got {self.n_experts}")
        if not 1 <= self.top_k <= self.n_experts:
            raise ConfigError(f"top_k must lie in [1, n_experts={self.n_experts}], got {self.top_k}")
        if self.router_hidden < 1:
            raise ConfigError(f"router_hidden must be >= 1, got {self.router_hidden}")
        if self.expert_hidden is not None and self.expert_hidden < 1:
            raise ConfigError(f"expert_hidden must be >= 1, got {self.expert_hidden}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.permutation not in PERMUTATION_MODES:
            raise ConfigError(f"permutation must be one of {PERMUTATION_MODES}, got {self.permutation!r}")

    @property
    def slice_width(self) -> int:
        return self.d // self.n_slices

    @property
    def ffn_width(self) -> int:
        return self.expert_hidden if self.expert_hidden is not None else 4 * self.slice_width


@dataclass(frozen=True)
class SyntheticSpec:
    """Segment-structured classification data: each segment shows one of C concepts."""

    n_samples: int = 5000
    d: int = 64
    n_segments: int = 4
    n_concepts: int = 4
    noise_std: float = 0.1
    scale: float = 1.0
    label_segment: int = 0
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_samples < 2:
            raise ConfigError(f"n_samples must be >= 2, got {self.n_samples}")
        if self.n_segments < 1 or self.d % self.n_segments:
            raise ConfigError(f"d={self.d} is not divisible by n_segments={self.n_segments}")
        if self.n_concepts < 2:
            raise ConfigError(f"n_concepts must be >= 2, got {self.n_concepts}")
        if not 0 <= self.label_segment < self.n_segments:
            raise ConfigError(f"label_segment must lie in [0, {self.n_segments}), got {self.label_segment}")
        if self.noise_std < 0:
            raise ConfigError(f"noise_std must be >= 0, got {self.noise_std}")
        if not 0 < self.val_fraction < 1:
            raise ConfigError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")


@dataclass(frozen=True)
class TrainConfig:
    model: SliceMoEConfig = field(default_factory=SliceMoEConfig)
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    batch_size: int = 32
    eval_batch_size: int = 256
    epochs: int = 5
    seed: int = 0
    dispatch: str = "grouped"
    eval_noise: bool = False

    def __post_init__(self) -> None:
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if not self.eps > 0:
            raise ConfigError(f"eps must be > 0, got {self.eps}")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.dispatch not in DISPATCH_MODES:
            raise ConfigError(f"dispatch must be one of {DISPATCH_MODES}, got {self.dispatch!r}")
        if self.data.d != self.model.d:
            raise ConfigError(f"data d={self.data.d} does not match model d={self.model.d}")

    def replace(self, **flat: Any) -> "TrainConfig":
        merged = to_flat(self)
        merged.update(flat)
        return from_flat(merged)


# --------------------------------------------------------------------------
# flat key=value mapping
# --------------------------------------------------------------------------

_MODEL_FIELDS = [f.name for f in fields(SliceMoEConfig)]
_DATA_FIELDS = [f.name for f in fields(SyntheticSpec) if f.name not in ("d", "seed")]
_TRAIN_FIELDS = [f.name for f in fields(TrainConfig) if f.name not in ("model", "data")]
FLAT_KEYS = tuple(_MODEL_FIELDS + _DATA_FIELDS + ["data_seed"] + _TRAIN_FIELDS)


def to_flat(cfg: TrainConfig) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for name in _MODEL_FIELDS:
        out[name] = getattr(cfg.model, name)
    for name in _DATA_FIELDS:
        out[name] = getattr(cfg.data, name)
    out["data_seed"] = cfg.data.seed
    for name in _TRAIN_FIELDS:
        out[name] = getattr(cfg, name)
    return out


def _coerce(key: str, raw: Any, default: Any) -> Any:
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if key == "expert_hidden":
            return None if text.lower() in ("", "none", "auto") else int(text)
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"cannot parse {key}={raw!r}") from None
    return text


def from_flat(values: dict[str, Any]) -> TrainConfig:
    unknown = sorted(set(values) - set(FLAT_KEYS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    defaults = to_flat(TrainConfig())
    merged = {k: _coerce(k, values[k], defaults[k]) if k in values else defaults[k] for k in FLAT_KEYS}
    model = SliceMoEConfig(**{k: merged[k] for k in _MODEL_FIELDS})
    data = SyntheticSpec(d=model.d, seed=merged["data_seed"], **{k: merged[k] for k in _DATA_FIELDS})
    return TrainConfig(model=model, data=data, **{k: merged[k] for k in _TRAIN_FIELDS})


def read_config_file(path: str | Path) -> dict[str, str]:
    """Parse a flat ``key = value`` file. Optional ``[section]`` headers are ignored."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror or exc}") from None
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string("[__root__]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    flat: dict[str, str] = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            if key in flat:
                raise ConfigError(f"{path}: duplicate key {key!r}")
            flat[key] = value
    return flat


def resolve(file_values: dict[str, Any] | None = None, overrides: dict[str, Any] | None = None) -> TrainConfig:
    """Built-in defaults < config file < explicit overrides."""
    merged: dict[str, Any] = {}
    merged.update(file_values or {})
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    # data_seed follows seed unless pinned explicitly
    if "seed" in merged and "data_seed" not in merged:
        merged["data_seed"] = merged["seed"]
    return from_flat(merged)


def as_dict(cfg: TrainConfig) -> dict[str, Any]:
    return dataclasses.asdict(cfg)
