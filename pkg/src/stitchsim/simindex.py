"""Structural similarity indices over activation matrices.

Implements linear centered kernel alignment, projection-weighted CCA, the
orthogonal Procrustes distance, and the affine direct-matching residual,
together with the preprocessing conventions they expect:

* ``lcka``: each sample flattened to one row of length s*c, columns
  centered.
* ``pwcca`` / ``opd`` / ``dm-structural``: all positions taken as samples
  (rows = n*s, cols = c), columns centered, then the whole matrix scaled
  to unit Frobenius norm.

All indices are pure functions of the preprocessed pair and deterministic
for identical input bits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics
from .activations import ActivationSet
from .errors import DegenerateInputError

LCKA_FLATTEN = "lcka-flatten"
POSITIONS_AS_SAMPLES = "positions-as-samples"

# True: higher value means more similar; False: the index is a distance.
INDEX_DIRECTION = {
    "lcka": True,
    "pwcca": True,
    "opd": False,
    "dm-structural": False,
}

# Tolerance for truncating near-zero singular values when whitening in CCA.
CCA_RANK_RCOND = 1e-10


@dataclass(frozen=True)
class PreprocessedPair:
    """Two activation matrices with matching rows, ready for an index."""

    a: np.ndarray
    b: np.ndarray
    convention: str


def preprocess(acts_a: ActivationSet, acts_b: ActivationSet, index: str) -> PreprocessedPair:
    """Shape and center/normalize a pair of activation sets for ``index``."""
    if acts_a.n != acts_b.n:
        raise ValueError(f"sample counts differ: {acts_a.n} vs {acts_b.n}")
    if index == "lcka":
        a = numerics.center_columns(acts_a.flatten_samples())
        b = numerics.center_columns(acts_b.flatten_samples())
        return PreprocessedPair(a, b, LCKA_FLATTEN)
    if index in ("pwcca", "opd", "dm-structural", "dm"):
        if acts_a.s != acts_b.s:
            raise ValueError(f"position counts differ: {acts_a.s} vs {acts_b.s}")
        a = numerics.normalize_frobenius(numerics.center_columns(acts_a.positions_as_samples()))
        b = numerics.normalize_frobenius(numerics.center_columns(acts_b.positions_as_samples()))
        return PreprocessedPair(a, b, POSITIONS_AS_SAMPLES)
    raise ValueError(f"unknown index {index!r}")


def lcka(pair: PreprocessedPair) -> float:
    """Linear CKA: ||B^T A||_F^2 / (||A^T A||_F ||B^T B||_F), in [0, 1]."""
    a, b = pair.a, pair.b
    denom = np.linalg.norm(a.T @ a) * np.linalg.norm(b.T @ b)
    if denom == 0.0:
        raise DegenerateInputError("LCKA undefined for all-zero activations")
    value = np.linalg.norm(b.T @ a) ** 2 / denom
    return float(min(max(value, 0.0), 1.0))


@dataclass(frozen=True)
class CcaResult:
    """Canonical correlations plus the direction and projection weights."""

    coefficients: np.ndarray  # (k,) in [0, 1], non-increasing
    weights_a: np.ndarray  # (p1, k): A @ weights_a are A's canonical variates
    weights_b: np.ndarray  # (p2, k)
    alphas: np.ndarray  # (k,) projection weights from the A view


def _whiten(m: np.ndarray):
    """Orthonormal basis of col(m) after dropping negligible directions."""
    f = numerics.svd(m)
    s = f.singular_values
    if s[0] == 0.0:
        raise DegenerateInputError("CCA undefined for an all-zero matrix")
    rank = int(np.sum(s > CCA_RANK_RCOND * s[0]))
    return f.u[:, :rank], f.vt[:rank].T / s[:rank]


def cca(pair: PreprocessedPair) -> CcaResult:
    """Canonical correlation coefficients via whitening + SVD.

    Rank-deficient inputs are truncated to their effective rank; the
    number of coefficients is the smaller effective rank.  Coefficients
    are clamped into [0, 1] (rounding can push them past 1 by ~1e-9).
    """
    ua, back_a = _whiten(pair.a)
    ub, back_b = _whiten(pair.b)
    p, rho, qt = np.linalg.svd(ua.T @ ub, full_matrices=False)
    rho = np.clip(rho, 0.0, 1.0)
    weights_a = back_a @ p
    weights_b = back_b @ qt.T
    variates_a = pair.a @ weights_a
    alphas = np.abs(variates_a.T @ pair.a).sum(axis=1)
    return CcaResult(coefficients=rho, weights_a=weights_a, weights_b=weights_b, alphas=alphas)


def pwcca(pair: PreprocessedPair) -> float:
    """Projection-weighted mean of the canonical correlations.

    Not symmetric: the first matrix of the pair supplies the projection
    weights.
    """
    result = cca(pair)
    total = result.alphas.sum()
    if total == 0.0:
        raise DegenerateInputError("all projection weights vanished")
    return float(np.dot(result.alphas, result.coefficients) / total)


def _pad_columns(m: np.ndarray, width: int) -> np.ndarray:
    if m.shape[1] == width:
        return m
    out = np.zeros((m.shape[0], width))
    out[:, : m.shape[1]] = m
    return out


def procrustes_solve(pair: PreprocessedPair) -> np.ndarray:
    """Orthogonal map R minimizing ||B - A R||_F.

    If the widths differ, the narrower matrix is padded with zero columns
    so R is square.  R = U V^T from the SVD of A^T B.
    """
    width = max(pair.a.shape[1], pair.b.shape[1])
    a = _pad_columns(pair.a, width)
    b = _pad_columns(pair.b, width)
    f = numerics.svd(a.T @ b)
    return f.u @ f.vt


def opd(pair: PreprocessedPair) -> float:
    """Squared residual of the best orthogonal alignment of A onto B.

    Computed in closed form as ||A||_F^2 + ||B||_F^2 - 2 ||B^T A||_*;
    tiny negative rounding results are clamped to 0.  Lower = more
    similar.
    """
    a, b = pair.a, pair.b
    value = np.linalg.norm(a) ** 2 + np.linalg.norm(b) ** 2 - 2.0 * numerics.nuclear_norm(b.T @ a)
    return float(max(value, 0.0))


def dm_structural_distance(pair: PreprocessedPair) -> float:
    """Residual Frobenius norm of the best affine map from A to B.

    Solves min over (W, v) of ||A W + 1 v^T - B||_F via the pseudoinverse
    of the bias-augmented design matrix.
    """
    a, b = pair.a, pair.b
    design = np.hstack([a, np.ones((a.shape[0], 1))])
    coeffs = numerics.pseudoinverse(design) @ b
    return float(np.linalg.norm(design @ coeffs - b))


_INDEX_FUNCS = {
    "lcka": lcka,
    "pwcca": pwcca,
    "opd": opd,
    "dm-structural": dm_structural_distance,
}


def compute_index(name: str, acts_a: ActivationSet, acts_b: ActivationSet) -> float:
    """Preprocess and evaluate a structural index between two activation sets.

    For pwcca the first set is the projection-weighting view; for
    dm-structural the affine map is fitted from the first set to the
    second.
    """
    if name not in _INDEX_FUNCS:
        raise ValueError(f"unknown structural index {name!r}")
    return _INDEX_FUNCS[name](preprocess(acts_a, acts_b, name))
