"""Segment-structured synthetic classification data."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import numerics as nx
from ..config import SyntheticSpec


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    centroids: np.ndarray  # (G, C, d/G), unit norm
    concepts: np.ndarray  # (n_samples, G) concept shown in each segment, before the split
    spec: SyntheticSpec

    @property
    def n_classes(self) -> int:
        return self.spec.n_concepts


def make_centroids(spec: SyntheticSpec, rng: nx.Rng) -> np.ndarray:
    width = spec.d // spec.n_segments
    raw = nx.gaussian(rng, (spec.n_segments, spec.n_concepts, width))
    return raw / np.linalg.norm(raw, axis=-1, keepdims=True)


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Each sample shows one concept per segment; the label is the concept in ``label_segment``.

    Segment values are ``scale * centroid + N(0, noise_std)``. Train/val are
    split by a seeded shuffle.
    """
    rng = nx.Rng(spec.seed).child(nx.STREAM_DATA)
    g, n = spec.n_segments, spec.n_samples
    centroids = make_centroids(spec, rng.child(0))
    concepts = rng.child(1).integers(0, spec.n_concepts, (n, g))
    x = (centroids[np.arange(g), concepts] * spec.scale).reshape(n, spec.d)
    if spec.noise_std > 0:
        x = x + spec.noise_std * nx.gaussian(rng.child(2), (n, spec.d))
    labels = concepts[:, spec.label_segment].astype(np.int64)

    order = rng.child(3).permutation(n)
    n_val = min(max(int(round(n * spec.val_fraction)), 1), n - 1)
    val, train = order[:n_val], order[n_val:]
    return Dataset(x[train], labels[train], x[val], labels[val], centroids, concepts, spec)
