"""Checkpoint files: a JSON header with a tensor directory, then raw little-endian float64 data.

Layout::

    SLICEMOE-CKPT\\n
    header-bytes <N>\\n
    <N bytes of UTF-8 JSON>
    <body>
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .config import TrainConfig, from_flat, to_flat
from .errors import IntegrityError, SchemaError
from .harness.optim import Adam, AdamState
from .model import SliceMoEClassifier

MAGIC = b"SLICEMOE-CKPT\n"
SCHEMA_VERSION = 1
_DTYPE = np.dtype("<f8")


def write_tensors(path: str | Path, tensors: dict[str, np.ndarray], meta: dict[str, Any] | None = None) -> None:
    directory = []
    offset = 0
    for name, arr in tensors.items():
        n = int(np.asarray(arr).size) * _DTYPE.itemsize
        directory.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "length": n})
        offset += n
    header = {"schema_version": SCHEMA_VERSION, "meta": meta or {}, "tensors": directory, "body_length": offset}
    blob = json.dumps(header, indent=1, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(f"header-bytes {len(blob)}\n".encode())
        fh.write(blob)
        for arr in tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype=_DTYPE).tobytes())


def read_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IntegrityError(f"cannot read checkpoint {path}: {exc.strerror or exc}") from None
    if not raw.startswith(MAGIC):
        raise IntegrityError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)
    nl = raw.find(b"\n", pos)
    line = raw[pos:nl].decode("ascii", "replace") if nl >= 0 else ""
    parts = line.split()
    if len(parts) != 2 or parts[0] != "header-bytes" or not parts[1].isdigit():
        raise IntegrityError(f"{path}: malformed header length line")
    start = nl + 1
    end = start + int(parts[1])
    if end > len(raw):
        raise IntegrityError(f"{path}: truncated header")
    try:
        header = json.loads(raw[start:end])
    except ValueError as exc:
        raise IntegrityError(f"{path}: corrupt header ({exc})") from None
    if not isinstance(header, dict) or header.get("schema_version") != SCHEMA_VERSION:
        version = header.get("schema_version") if isinstance(header, dict) else None
        raise SchemaError(f"{path}: unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")

    body = raw[end:]
    expected = header.get("body_length")
    if len(body) != expected:
        raise IntegrityError(f"{path}: body is {len(body)} bytes, header declares {expected}")
    tensors: dict[str, np.ndarray] = {}
    cursor = 0
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        if entry["offset"] != cursor or entry["length"] != count * _DTYPE.itemsize:
            raise IntegrityError(f"{path}: inconsistent directory entry for {entry['name']!r}")
        if cursor + entry["length"] > len(body):
            raise IntegrityError(f"{path}: tensor {entry['name']!r} runs past end of body")
        tensors[entry["name"]] = np.frombuffer(body, _DTYPE, count, cursor).reshape(shape).astype(np.float64)
        cursor += entry["length"]
    if cursor != len(body):
        raise IntegrityError(f"{path}: {len(body) - cursor} trailing bytes after last tensor")
    return tensors, header["meta"]


@dataclass
class Checkpoint:
    model: SliceMoEClassifier
    config: TrainConfig
    optimizer_state: AdamState | None
    meta: dict[str, Any]


def save_checkpoint(
    path: str | Path,
    model: SliceMoEClassifier,
    config: TrainConfig,
    optimizer: Adam | None = None,
    extra: dict[str, Any] | None = None,
) -> None:
    tensors = {k: v.value for k, v in model.parameters().items()}
    meta: dict[str, Any] = {
        "config": to_flat(config),
        "n_classes": model.n_classes,
        "seed": model.seed,
        "permutation": None if model.permutation is None else model.permutation.tolist(),
        "optimizer_step": None,
    }
    if optimizer is not None:
        meta["optimizer_step"] = optimizer.state.step
        for k in tensors.copy():
            tensors[f"adam.m/{k}"] = optimizer.state.m[k]
            tensors[f"adam.v/{k}"] = optimizer.state.v[k]
    if extra:
        meta["extra"] = extra
    write_tensors(path, tensors, meta)


def load_checkpoint(path: str | Path) -> Checkpoint:
    tensors, meta = read_tensors(path)
    try:
        config = from_flat(meta["config"])
        perm = meta["permutation"]
        model = SliceMoEClassifier(
            config.model, int(meta["n_classes"]), seed=int(meta["seed"]),
            permutation=None if perm is None else np.asarray(perm, dtype=np.intp),
        )
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"{path}: missing or malformed metadata ({exc})") from None
    for name, var in model.parameters().items():
        if name not in tensors:
            raise IntegrityError(f"{path}: missing tensor {name!r}")
        if tensors[name].shape != var.shape:
            raise IntegrityError(f"{path}: tensor {name!r} has shape {tensors[name].shape}, expected {var.shape}")
        var.value = tensors[name]
        var.zero_grad()
    state = None
    if meta.get("optimizer_step") is not None:
        names = list(model.parameters())
        missing = [k for k in names if f"adam.m/{k}" not in tensors or f"adam.v/{k}" not in tensors]
        if missing:
            raise IntegrityError(f"{path}: optimizer state missing for {missing[0]!r}")
        state = AdamState(
            int(meta["optimizer_step"]),
            {k: tensors[f"adam.m/{k}"] for k in names},
            {k: tensors[f"adam.v/{k}"] for k in names},
        )
    return Checkpoint(model, config, state, meta)
