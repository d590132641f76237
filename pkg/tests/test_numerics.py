import numpy as np
import pytest

from stitchsim import numerics
from stitchsim.errors import DegenerateInputError


def rng(seed=0):
    return np.random.default_rng(seed)


class TestSvd:
    def test_diagonal(self):
        f = numerics.svd(np.diag([3.0, 1.0]))
        assert np.allclose(f.singular_values, [3.0, 1.0])

    def test_zero_matrix(self):
        f = numerics.svd(np.zeros((3, 3)))
        assert np.allclose(f.singular_values, [0.0, 0.0, 0.0])

    def test_reconstruction(self):
        m = rng(1).standard_normal((6, 4))
        f = numerics.svd(m)
        rel = np.linalg.norm(f.reconstruct() - m) / np.linalg.norm(m)
        assert rel < 1e-10

    def test_factor_properties_random_shapes(self):
        # reconstruction and orthonormality across 100 random shapes <= 64x64
        r = rng(7)
        for _ in range(100):
            rows, cols = r.integers(1, 65, size=2)
            m = r.standard_normal((rows, cols))
            f = numerics.svd(m)
            k = min(rows, cols)
            assert f.singular_values.shape == (k,)
            assert np.all(np.diff(f.singular_values) <= 0)
            assert np.all(f.singular_values >= 0)
            assert np.allclose(f.u.T @ f.u, np.eye(k), atol=1e-8)
            assert np.allclose(f.vt @ f.vt.T, np.eye(k), atol=1e-8)
            denom = max(np.linalg.norm(m), 1e-30)
            assert np.linalg.norm(f.reconstruct() - m) / denom < 1e-8

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            numerics.svd(np.array([[np.nan, 0.0], [0.0, 1.0]]))

    def test_rejects_wrong_ndim(self):
        with pytest.raises(ValueError):
            numerics.svd(np.ones(3))


class TestPseudoinverse:
    def test_identity(self):
        assert np.allclose(numerics.pseudoinverse(np.eye(2)), np.eye(2))

    def test_zero_singular_value_annihilated(self):
        p = numerics.pseudoinverse(np.diag([2.0, 0.0]))
        assert np.allclose(p, np.diag([0.5, 0.0]))

    def test_left_inverse_full_column_rank(self):
        a = rng(2).standard_normal((10, 3))
        assert np.allclose(numerics.pseudoinverse(a) @ a, np.eye(3), atol=1e-8)

    def test_penrose_conditions(self):
        r = rng(3)
        for _ in range(20):
            rows, cols = r.integers(2, 12, size=2)
            a = r.standard_normal((rows, cols))
            p = numerics.pseudoinverse(a)
            assert np.allclose(a @ p @ a, a, atol=1e-7)
            assert np.allclose(p @ a @ p, p, atol=1e-7)
            assert np.allclose((a @ p).T, a @ p, atol=1e-7)
            assert np.allclose((p @ a).T, p @ a, atol=1e-7)

    def test_rcond_cutoff(self):
        # singular values <= rcond * sigma_max are dropped
        m = np.diag([1.0, 1e-6])
        keep = numerics.pseudoinverse(m, rcond=1e-8)
        drop = numerics.pseudoinverse(m, rcond=1e-3)
        assert np.allclose(keep, np.diag([1.0, 1e6]))
        assert np.allclose(drop, np.diag([1.0, 0.0]))

    def test_negative_rcond_rejected(self):
        with pytest.raises(ValueError):
            numerics.pseudoinverse(np.eye(2), rcond=-1.0)


class TestNuclearNorm:
    def test_diagonal(self):
        assert numerics.nuclear_norm(np.diag([3.0, 4.0])) == pytest.approx(7.0)

    def test_zero(self):
        assert numerics.nuclear_norm(np.zeros((4, 2))) == 0.0

    def test_equals_svd_spectrum_sum(self):
        m = rng(4).standard_normal((5, 5))
        expected = float(np.sum(numerics.svd(m).singular_values))
        assert abs(numerics.nuclear_norm(m) - expected) <= 1e-10

    def test_orthogonal_invariance(self):
        r = rng(5)
        for _ in range(10):
            m = r.standard_normal((6, 4))
            q1, _ = np.linalg.qr(r.standard_normal((6, 6)))
            q2, _ = np.linalg.qr(r.standard_normal((4, 4)))
            base = numerics.nuclear_norm(m)
            assert abs(numerics.nuclear_norm(q1 @ m) - base) < 1e-8
            assert abs(numerics.nuclear_norm(m @ q2) - base) < 1e-8


class TestLowRankApprox:
    def test_full_rank_reproduces(self):
        m = rng(6).standard_normal((5, 4))
        assert np.allclose(numerics.low_rank_approx(m, 4), m, atol=1e-10)

    def test_diagonal_truncation(self):
        assert np.allclose(numerics.low_rank_approx(np.diag([3.0, 1.0]), 1),
                           np.diag([3.0, 0.0]), atol=1e-12)

    def test_residual_from_spectrum(self):
        m = rng(8).standard_normal((8, 5))
        s = numerics.svd(m).singular_values
        resid = np.linalg.norm(numerics.low_rank_approx(m, 2) - m)
        assert abs(resid - np.sqrt(np.sum(s[2:] ** 2))) < 1e-8

    def test_residual_monotone_in_rank(self):
        m = rng(9).standard_normal((10, 7))
        resids = [np.linalg.norm(numerics.low_rank_approx(m, r) - m) for r in range(1, 8)]
        assert all(a >= b - 1e-12 for a, b in zip(resids, resids[1:]))

    def test_rank_out_of_range(self):
        m = np.eye(3)
        with pytest.raises(ValueError):
            numerics.low_rank_approx(m, 0)
        with pytest.raises(ValueError):
            numerics.low_rank_approx(m, 4)


class TestCenterNormalize:
    def test_constant_column_zeroed(self):
        m = np.full((4, 1), 5.0)
        assert np.allclose(numerics.center_columns(m), 0.0)

    def test_idempotent(self):
        m = numerics.center_columns(rng(10).standard_normal((7, 3)))
        assert np.allclose(numerics.center_columns(m), m, atol=1e-12)

    def test_column_means_vanish(self):
        c = numerics.center_columns(rng(11).standard_normal((10, 3)))
        assert np.all(np.abs(c.mean(axis=0)) < 1e-12)

    def test_normalize_direction_preserved(self):
        assert np.allclose(numerics.normalize_frobenius(np.diag([3.0, 4.0])),
                           np.diag([0.6, 0.8]))

    def test_normalize_unit_norm_unchanged(self):
        m = np.zeros((2, 2))
        m[0, 0] = 1.0
        assert np.array_equal(numerics.normalize_frobenius(m), m)

    def test_normalize_output_norm(self):
        out = numerics.normalize_frobenius(rng(12).standard_normal((6, 6)))
        assert abs(np.linalg.norm(out) - 1.0) < 1e-10

    def test_normalize_zero_matrix_rejected(self):
        with pytest.raises(DegenerateInputError):
            numerics.normalize_frobenius(np.zeros((3, 3)))


def test_operations_deterministic():
    m = rng(13).standard_normal((9, 6))
    assert np.array_equal(numerics.svd(m).u, numerics.svd(m).u)
    assert np.array_equal(numerics.pseudoinverse(m), numerics.pseudoinverse(m))
    assert numerics.nuclear_norm(m) == numerics.nuclear_norm(m)
