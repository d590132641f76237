"""Synthetic labeled datasets: blobs, rings, spiral, uniform noise.

All generators are deterministic given the seed, emit class-balanced
labels (counts differ by at most one), and shuffle the rows so batches
mix classes.  ``uniform-noise`` doubles as the auxiliary OOD source; see
``uniform_noise_like`` for noise drawn over an inflated bounding box of
some reference inputs.
"""

from __future__ import annotations

import numpy as np

from ._rng import derive_seed, generator, permutation
from .nets import LabeledDataset

DATASET_NAMES = ("blobs", "rings", "spiral", "uniform-noise")


def _class_counts(n: int, classes: int) -> list[int]:
    base, extra = divmod(n, classes)
    return [base + (1 if c < extra else 0) for c in range(classes)]


def _assemble(points, labels, seed) -> LabeledDataset:
    inputs = np.vstack(points)
    labels = np.concatenate(labels)
    perm = permutation(len(inputs), derive_seed(seed, "dataset-shuffle"))
    return LabeledDataset(inputs[perm], labels[perm], int(labels.max()) + 1)


def make_blobs(n: int, classes: int = 2, dim: int = 2, separation: float = 10.0,
               noise: float = 1.0, seed: int = 0) -> LabeledDataset:
    """Gaussian blobs; adjacent centers are ``separation`` noise-sigmas apart."""
    rng = generator(seed, "blobs")
    if classes == 1:
        centers = np.zeros((1, dim))
    else:
        # centers on a circle in the first two coordinates
        radius = separation * noise / (2.0 * np.sin(np.pi / classes))
        angles = 2.0 * np.pi * np.arange(classes) / classes
        centers = np.zeros((classes, dim))
        centers[:, 0] = radius * np.cos(angles)
        centers[:, 1] = radius * np.sin(angles) if dim > 1 else 0.0
    points, labels = [], []
    for c, count in enumerate(_class_counts(n, classes)):
        points.append(centers[c] + noise * rng.standard_normal((count, dim)))
        labels.append(np.full(count, c, dtype=np.int64))
    return _assemble(points, labels, seed)


def make_rings(n: int, classes: int = 2, noise: float = 0.05, seed: int = 0) -> LabeledDataset:
    """Concentric rings of radius 1, 2, ... with radial noise."""
    rng = generator(seed, "rings")
    points, labels = [], []
    for c, count in enumerate(_class_counts(n, classes)):
        theta = rng.uniform(0.0, 2.0 * np.pi, count)
        r = (c + 1.0) + noise * rng.standard_normal(count)
        points.append(np.column_stack([r * np.cos(theta), r * np.sin(theta)]))
        labels.append(np.full(count, c, dtype=np.int64))
    return _assemble(points, labels, seed)


def make_spiral(n: int, classes: int = 3, noise: float = 0.05, turns: float = 1.75,
                seed: int = 0) -> LabeledDataset:
    """Interleaved spiral arms, one per class; not linearly separable."""
    rng = generator(seed, "spiral")
    points, labels = [], []
    for c, count in enumerate(_class_counts(n, classes)):
        t = rng.uniform(0.0, 1.0, count)
        radius = 0.1 + 0.9 * t
        theta = 2.0 * np.pi * (turns * t + c / classes)
        pts = np.column_stack([radius * np.cos(theta), radius * np.sin(theta)])
        points.append(pts + noise * rng.standard_normal((count, 2)))
        labels.append(np.full(count, c, dtype=np.int64))
    return _assemble(points, labels, seed)


def make_uniform_noise(n: int, classes: int = 2, dim: int = 2, low: float = -1.0,
                       high: float = 1.0, seed: int = 0) -> LabeledDataset:
    """Uniform box noise with balanced (hence chance-level) labels."""
    rng = generator(seed, "uniform-noise")
    points, labels = [], []
    for c, count in enumerate(_class_counts(n, classes)):
        points.append(rng.uniform(low, high, (count, dim)))
        labels.append(np.full(count, c, dtype=np.int64))
    return _assemble(points, labels, seed)


def uniform_noise_like(inputs: np.ndarray, n: int, inflate: float = 3.0,
                       seed: int = 0) -> np.ndarray:
    """Uniform samples over the bounding box of ``inputs`` inflated about
    its center by ``inflate``; the stand-in auxiliary OOD distribution."""
    inputs = np.asarray(inputs, dtype=np.float64)
    lo, hi = inputs.min(axis=0), inputs.max(axis=0)
    center, half = (lo + hi) / 2.0, (hi - lo) / 2.0
    half = np.where(half == 0.0, 1.0, half) * inflate
    rng = generator(seed, "noise-like")
    return rng.uniform(center - half, center + half, (n, inputs.shape[1]))


_GENERATORS = {
    "blobs": make_blobs,
    "rings": make_rings,
    "spiral": make_spiral,
    "uniform-noise": make_uniform_noise,
}


def generate_dataset(name: str, params: dict | None = None, seed: int = 0) -> LabeledDataset:
    """Dispatch by name with a parameter dict (as used by experiment configs)."""
    if name not in _GENERATORS:
        raise ValueError(f"unknown dataset {name!r}; choose from {DATASET_NAMES}")
    params = dict(params or {})
    if "n" not in params:
        raise ValueError("dataset params must include n")
    if params.get("n", 1) < 1:
        raise ValueError("n must be >= 1")
    if params.get("classes", 2) < 2:
        raise ValueError("need at least 2 classes")
    return _GENERATORS[name](seed=seed, **params)
