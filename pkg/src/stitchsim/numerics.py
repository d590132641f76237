"""Dense float64 matrix kernels: SVD, pseudoinverse, nuclear norm,
low-rank approximation, centering and normalization.

All functions take and return plain 2-D numpy arrays.  LAPACK via
numpy.linalg does the heavy lifting; results are deterministic for
identical input bits.  SVD non-convergence surfaces as
numpy.linalg.LinAlgError rather than silent garbage.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError


def _as_matrix(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ValueError(f"expected a 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix contains non-finite entries")
    return m


@dataclass(frozen=True)
class SvdFactors:
    """Thin SVD m = u @ diag(singular_values) @ vt, k = min(rows, cols)."""

    u: np.ndarray
    singular_values: np.ndarray
    vt: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.singular_values) @ self.vt


def svd(m) -> SvdFactors:
    """Thin SVD with singular values sorted non-increasing."""
    m = _as_matrix(m)
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    return SvdFactors(u=u, singular_values=s, vt=vt)


def default_rcond(m) -> float:
    """eps * max(rows, cols): relative cutoff for negligible singular values."""
    m = np.asarray(m)
    return float(np.finfo(np.float64).eps * max(m.shape))


def pseudoinverse(m, rcond: float | None = None) -> np.ndarray:
    """Moore-Penrose pseudoinverse.

    Singular values <= rcond * sigma_max are treated as exactly zero.
    """
    m = _as_matrix(m)
    if rcond is None:
        rcond = default_rcond(m)
    if rcond < 0:
        raise ValueError("rcond must be >= 0")
    f = svd(m)
    s = f.singular_values
    cutoff = rcond * (s[0] if s.size else 0.0)
    inv = np.where(s > cutoff, np.divide(1.0, s, out=np.zeros_like(s), where=s > 0), 0.0)
    return (f.vt.T * inv) @ f.u.T


def nuclear_norm(m) -> float:
    """Sum of singular values."""
    return float(np.sum(svd(m).singular_values))


def low_rank_approx(m, r: int) -> np.ndarray:
    """Best rank-r approximation in Frobenius norm (truncated SVD)."""
    m = _as_matrix(m)
    if not 1 <= r <= min(m.shape):
        raise ValueError(f"rank {r} out of range for shape {m.shape}")
    f = svd(m)
    return (f.u[:, :r] * f.singular_values[:r]) @ f.vt[:r]


def center_columns(m) -> np.ndarray:
    """Subtract each column's mean; idempotent."""
    m = _as_matrix(m)
    return m - m.mean(axis=0, keepdims=True)


def normalize_frobenius(m) -> np.ndarray:
    """Scale to unit Frobenius norm."""
    m = _as_matrix(m)
    norm = np.linalg.norm(m)
    if norm == 0.0:
        raise DegenerateInputError("cannot normalize a zero matrix")
    return m / norm
