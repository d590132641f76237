import numpy as np
import pytest

from stitchsim import simindex
from stitchsim.activations import ActivationSet
from stitchsim.errors import DegenerateInputError


def rand_acts(seed, n=50, s=1, c=4):
    r = np.random.default_rng(seed)
    return ActivationSet(r.standard_normal((n, s, c)))


def pp(a, b, index):
    return simindex.preprocess(a, b, index)


def random_orthogonal(seed, d):
    q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((d, d)))
    return q


class TestPreprocess:
    def test_lcka_centering_kills_constants(self):
        const = ActivationSet(np.full((4, 1, 3), 2.5))
        other = rand_acts(0, n=4, c=3)
        pair = pp(const, other, "lcka")
        assert pair.a.shape == (4, 3)
        assert np.allclose(pair.a, 0.0)

    def test_positions_as_samples_shape(self):
        a = rand_acts(1, n=2, s=3, c=2)
        b = rand_acts(2, n=2, s=3, c=2)
        pair = pp(a, b, "pwcca")
        assert pair.a.shape == (6, 2)
        assert pair.convention == simindex.POSITIONS_AS_SAMPLES

    def test_columns_centered(self):
        pair = pp(rand_acts(3), rand_acts(4), "opd")
        assert np.all(np.abs(pair.a.mean(axis=0)) < 1e-12)
        assert np.all(np.abs(pair.b.mean(axis=0)) < 1e-12)
        assert abs(np.linalg.norm(pair.a) - 1.0) < 1e-10

    def test_sample_count_mismatch(self):
        with pytest.raises(ValueError):
            pp(rand_acts(5, n=10), rand_acts(6, n=11), "lcka")

    def test_position_count_mismatch(self):
        with pytest.raises(ValueError):
            pp(rand_acts(7, s=2), rand_acts(8, s=3), "opd")

    def test_constant_activations_degenerate_for_normalized_indices(self):
        const = ActivationSet(np.full((6, 1, 3), 1.0))
        with pytest.raises(DegenerateInputError):
            pp(const, rand_acts(9, n=6, c=3), "pwcca")

    def test_unknown_index(self):
        with pytest.raises(ValueError):
            pp(rand_acts(10), rand_acts(11), "rbf-cka")


class TestLcka:
    def test_self_similarity_is_one(self):
        a = rand_acts(20)
        assert simindex.lcka(pp(a, a, "lcka")) == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal_invariance(self):
        a = rand_acts(21, c=5)
        q = random_orthogonal(22, 5)
        rotated = ActivationSet(a.data @ q)
        assert simindex.lcka(pp(a, rotated, "lcka")) == pytest.approx(1.0, abs=1e-8)

    def test_matches_gram_hsic_oracle(self):
        a, b = rand_acts(23, c=3), rand_acts(24, c=4)
        pair = pp(a, b, "lcka")
        # centered columns make the linear Grams already double-centered
        k = pair.a @ pair.a.T
        l = pair.b @ pair.b.T
        oracle = np.trace(k @ l) / np.sqrt(np.trace(k @ k) * np.trace(l @ l))
        assert simindex.lcka(pair) == pytest.approx(oracle, abs=1e-8)

    def test_symmetric(self):
        a, b = rand_acts(25, c=3), rand_acts(26, c=5)
        assert simindex.lcka(pp(a, b, "lcka")) == pytest.approx(
            simindex.lcka(pp(b, a, "lcka")), abs=1e-12)

    def test_scale_invariance(self):
        a, b = rand_acts(27), rand_acts(28)
        base = simindex.lcka(pp(a, b, "lcka"))
        scaled = ActivationSet(3.7 * a.data)
        assert simindex.lcka(pp(scaled, b, "lcka")) == pytest.approx(base, abs=1e-10)

    def test_range(self):
        for seed in range(5):
            v = simindex.lcka(pp(rand_acts(seed, c=3), rand_acts(seed + 50, c=6), "lcka"))
            assert 0.0 <= v <= 1.0

    def test_zero_matrix_degenerate(self):
        z = simindex.PreprocessedPair(np.zeros((5, 2)), np.zeros((5, 2)), simindex.LCKA_FLATTEN)
        with pytest.raises(DegenerateInputError):
            simindex.lcka(z)


class TestCca:
    def test_self_gives_unit_coefficients(self):
        pair = pp(rand_acts(30), rand_acts(30), "pwcca")
        res = simindex.cca(pair)
        assert np.allclose(res.coefficients, 1.0, atol=1e-8)

    def test_invertible_map_gives_unit_coefficients(self):
        a = rand_acts(31, n=100, c=4)
        m = np.random.default_rng(32).standard_normal((4, 4)) + 4 * np.eye(4)
        b = ActivationSet(a.data @ m)
        res = simindex.cca(pp(a, b, "pwcca"))
        assert np.allclose(res.coefficients, 1.0, atol=1e-6)

    def test_independent_gaussians_weakly_correlated(self):
        r = np.random.default_rng(33)
        a = ActivationSet(r.standard_normal((200, 1, 2)))
        b = ActivationSet(r.standard_normal((200, 1, 2)))
        res = simindex.cca(pp(a, b, "pwcca"))
        assert np.all(res.coefficients < 0.3)

    def test_matches_generalized_eigenproblem(self):
        from scipy.linalg import eigh

        a, b = rand_acts(34, n=120, c=3), rand_acts(35, n=120, c=4)
        pair = pp(a, b, "pwcca")
        res = simindex.cca(pair)
        saa = pair.a.T @ pair.a
        sbb = pair.b.T @ pair.b
        sab = pair.a.T @ pair.b
        lhs = sab @ np.linalg.solve(sbb, sab.T)
        eigvals = eigh(lhs, saa, eigvals_only=True)
        rho_oracle = np.sqrt(np.clip(np.sort(eigvals)[::-1][: len(res.coefficients)], 0, 1))
        assert np.allclose(res.coefficients, rho_oracle, atol=1e-8)

    def test_within_view_orthogonality(self):
        a, b = rand_acts(36, n=80, c=4), rand_acts(37, n=80, c=3)
        pair = pp(a, b, "pwcca")
        res = simindex.cca(pair)
        va = pair.a @ res.weights_a
        vb = pair.b @ res.weights_b
        assert np.allclose(va.T @ va, np.eye(va.shape[1]), atol=1e-6)
        assert np.allclose(vb.T @ vb, np.eye(vb.shape[1]), atol=1e-6)

    def test_coefficient_count_is_min_effective_rank(self):
        a = rand_acts(38, n=60, c=5)
        # rank-2 second view
        basis = np.random.default_rng(39).standard_normal((60, 1, 2))
        mix = np.random.default_rng(40).standard_normal((2, 4))
        b = ActivationSet(basis @ mix)
        res = simindex.cca(pp(a, b, "pwcca"))
        assert len(res.coefficients) <= 3  # rank 2 plus at most the centering direction

    def test_alphas_nonnegative(self):
        res = simindex.cca(pp(rand_acts(41), rand_acts(42), "pwcca"))
        assert np.all(res.alphas >= 0)


def _pwcca_oracle(x, y):
    """Straight-line PWCCA: whiten both views, SVD the cross product,
    weight the coefficients by |<canonical variate, column of x>|."""
    ux, sx, vxt = np.linalg.svd(x, full_matrices=False)
    rx = int(np.sum(sx > 1e-10 * sx[0]))
    uy, sy, vyt = np.linalg.svd(y, full_matrices=False)
    ry = int(np.sum(sy > 1e-10 * sy[0]))
    p, rho, qt = np.linalg.svd(ux[:, :rx].T @ uy[:, :ry], full_matrices=False)
    rho = np.clip(rho, 0.0, 1.0)
    variates = ux[:, :rx] @ p
    alphas = np.abs(variates.T @ x).sum(axis=1)
    return float(alphas @ rho / alphas.sum())


class TestPwcca:
    def test_self_is_one(self):
        pair = pp(rand_acts(50), rand_acts(50), "pwcca")
        assert simindex.pwcca(pair) == pytest.approx(1.0, abs=1e-8)

    def test_invertible_map_is_one(self):
        a = rand_acts(51, n=90, c=4)
        m = np.random.default_rng(52).standard_normal((4, 4)) + 4 * np.eye(4)
        pair = pp(a, ActivationSet(a.data @ m), "pwcca")
        assert simindex.pwcca(pair) == pytest.approx(1.0, abs=1e-6)

    def test_matches_straight_line_oracle(self):
        a, b = rand_acts(53, n=100, c=3), rand_acts(54, n=100, c=3)
        pair = pp(a, b, "pwcca")
        assert simindex.pwcca(pair) == pytest.approx(_pwcca_oracle(pair.a, pair.b), abs=1e-8)

    def test_asymmetry_uses_first_view_weights(self):
        a, b = rand_acts(55, n=100, c=3), rand_acts(56, n=100, c=5)
        ab = simindex.pwcca(pp(a, b, "pwcca"))
        ba = simindex.pwcca(pp(b, a, "pwcca"))
        assert ab != ba  # generically different weighting views


class TestProcrustes:
    def test_identity_recovered(self):
        a = rand_acts(60, n=40, c=4)
        pair = pp(a, a, "opd")
        assert np.allclose(simindex.procrustes_solve(pair), np.eye(4), atol=1e-8)

    def test_rotation_recovered(self):
        a = rand_acts(61, n=40, c=4)
        q = random_orthogonal(62, 4)
        pair = pp(a, ActivationSet(a.data @ q), "opd")
        assert np.allclose(simindex.procrustes_solve(pair), q, atol=1e-8)

    def test_result_is_orthogonal(self):
        pair = pp(rand_acts(63, c=4), rand_acts(64, c=4), "opd")
        r = simindex.procrustes_solve(pair)
        assert np.allclose(r.T @ r, np.eye(4), atol=1e-8)

    def test_beats_random_orthogonal_maps(self):
        pair = pp(rand_acts(65, c=3), rand_acts(66, c=3), "opd")
        r_star = simindex.procrustes_solve(pair)
        best = np.linalg.norm(pair.b - pair.a @ r_star) ** 2
        rng = np.random.default_rng(67)
        for _ in range(1000):
            q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
            assert best <= np.linalg.norm(pair.b - pair.a @ q) ** 2 + 1e-12

    def test_width_mismatch_pads(self):
        pair = pp(rand_acts(68, c=3), rand_acts(69, c=5), "opd")
        r = simindex.procrustes_solve(pair)
        assert r.shape == (5, 5)
        assert np.allclose(r.T @ r, np.eye(5), atol=1e-8)


class TestOpd:
    def test_self_distance_zero(self):
        a = rand_acts(70)
        assert simindex.opd(pp(a, a, "opd")) == pytest.approx(0.0, abs=1e-8)

    def test_orthogonal_invariance(self):
        a = rand_acts(71, c=4)
        q = random_orthogonal(72, 4)
        assert simindex.opd(pp(a, ActivationSet(a.data @ q), "opd")) == pytest.approx(0.0, abs=1e-7)

    def test_equals_procrustes_residual(self):
        pair = pp(rand_acts(73, c=4), rand_acts(74, c=4), "opd")
        r_star = simindex.procrustes_solve(pair)
        resid = np.linalg.norm(pair.b - pair.a @ r_star) ** 2
        assert simindex.opd(pair) == pytest.approx(resid, abs=1e-6)

    def test_symmetric(self):
        a, b = rand_acts(75, c=3), rand_acts(76, c=3)
        assert simindex.opd(pp(a, b, "opd")) == pytest.approx(
            simindex.opd(pp(b, a, "opd")), abs=1e-8)

    def test_nonnegative(self):
        for seed in range(5):
            assert simindex.opd(pp(rand_acts(seed), rand_acts(seed + 100), "opd")) >= 0.0


class TestDmStructuralDistance:
    def test_exactly_realizable_target(self):
        a = rand_acts(80, n=60, c=3)
        r = np.random.default_rng(81)
        w0, b0 = r.standard_normal((3, 3)), r.standard_normal(3)
        b = ActivationSet(a.data @ w0 + b0)
        # the affine relation survives centering+normalization, so the fit is exact
        assert simindex.dm_structural_distance(pp(a, b, "dm-structural")) < 1e-8

    def test_self_distance_zero(self):
        a = rand_acts(82)
        assert simindex.dm_structural_distance(pp(a, a, "dm-structural")) < 1e-8

    def test_matches_normal_equation_oracle(self):
        pair = pp(rand_acts(83, n=120, c=4), rand_acts(84, n=120, c=3), "dm-structural")
        x = np.hstack([pair.a, np.ones((pair.a.shape[0], 1))])
        coeffs = np.linalg.solve(x.T @ x, x.T @ pair.b)
        oracle = np.linalg.norm(x @ coeffs - pair.b)
        assert simindex.dm_structural_distance(pair) == pytest.approx(oracle, abs=1e-6)

    def test_bounded_by_procrustes_residual(self):
        # affine maps strictly contain orthogonal maps
        for seed in range(5):
            pair = pp(rand_acts(seed + 90, c=4), rand_acts(seed + 190, c=4), "dm-structural")
            dm = simindex.dm_structural_distance(pair)
            r_star = simindex.procrustes_solve(pair)
            assert dm <= np.linalg.norm(pair.b - pair.a @ r_star) + 1e-8


def test_indices_deterministic():
    a, b = rand_acts(99, c=4), rand_acts(98, c=4)
    for name in ("lcka", "pwcca", "opd", "dm-structural"):
        assert simindex.compute_index(name, a, b) == simindex.compute_index(name, a, b)


def test_compute_index_unknown_name():
    with pytest.raises(ValueError):
        simindex.compute_index("tlm", rand_acts(1), rand_acts(2))
