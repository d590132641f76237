"""Activation tensors: n samples x s positions x c channels, plus labels.

The position axis stands in for spatial/token structure; dense layers
produce s = 1.  The binary file format (magic ``ACTF``) round-trips
float64 payloads bit-exactly:

    magic   4 bytes  b"ACTF"
    version u32 LE   currently 1
    n, s, c u64 LE each
    flags   u8       bit 0: labels present
    data    n*s*c float64 LE, C order
    labels  n int64 LE (only if flag set)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_MAGIC = b"ACTF"
_VERSION = 1


@dataclass
class ActivationSet:
    """Layer activations for a batch of samples, with optional labels."""

    data: np.ndarray  # (n, s, c) float64
    labels: np.ndarray | None = None  # (n,) int64

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim == 2:  # (n, c) convenience: single position
            self.data = self.data[:, None, :]
        if self.data.ndim != 3:
            raise ValueError(f"expected (n, s, c) activations, got shape {self.data.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.data.shape[0],):
                raise ValueError("labels must be one integer per sample")

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def s(self) -> int:
        return self.data.shape[1]

    @property
    def c(self) -> int:
        return self.data.shape[2]

    def flatten_samples(self) -> np.ndarray:
        """(n, s*c): one row per sample, positions concatenated."""
        return self.data.reshape(self.n, self.s * self.c)

    def positions_as_samples(self) -> np.ndarray:
        """(n*s, c): every (sample, position) pair is a row."""
        return self.data.reshape(self.n * self.s, self.c)

    def mean_pool(self) -> np.ndarray:
        """(n, c): average over the position axis."""
        return self.data.mean(axis=1)

    def take(self, idx) -> "ActivationSet":
        labels = None if self.labels is None else self.labels[idx]
        return ActivationSet(self.data[idx], labels)


def write_activations(acts: ActivationSet, path) -> None:
    path = Path(path)
    flags = 1 if acts.labels is not None else 0
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<QQQ", acts.n, acts.s, acts.c))
        fh.write(struct.pack("<B", flags))
        fh.write(np.ascontiguousarray(acts.data, dtype="<f8").tobytes())
        if acts.labels is not None:
            fh.write(np.ascontiguousarray(acts.labels, dtype="<i8").tobytes())


def read_activations(path) -> ActivationSet:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ValueError(f"{path}: not an activation file (magic {magic!r})")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported activation file version {version}")
        n, s, c = struct.unpack("<QQQ", fh.read(24))
        (flags,) = struct.unpack("<B", fh.read(1))
        data = np.frombuffer(fh.read(n * s * c * 8), dtype="<f8").reshape(n, s, c).copy()
        labels = None
        if flags & 1:
            labels = np.frombuffer(fh.read(n * 8), dtype="<i8").copy()
    return ActivationSet(data, labels)
