"""Class-similarity prior and the gamma/Dirichlet sampler.

Sampler oracles: closed-form Dirichlet moments, and numpy's own
``Generator.dirichlet`` as an independently implemented reference.
"""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from zskd import models as M
from zskd import prior as P
from zskd.errors import DegenerateTemplateError, DimensionError, ParameterError

N_DRAWS = 100_000

ALPHAS = [
    np.array([1.0, 1.0]),
    np.array([2.0, 1.0, 1.0]),
    np.full(10, 0.05),
    np.array([0.3, 0.01, 0.7, 0.2, 0.5]),
    np.array([5.0, 0.1, 1.0, 12.0, 0.5, 3.0, 0.01, 1.0, 0.2, 0.9]),
]


def moment_z_scores(samples, alpha):
    """z-scores of empirical means and variances against the closed form."""
    n = len(samples)
    mean, var = P.dirichlet_moments(alpha)
    emp_mean = samples.mean(axis=0)
    emp_var = samples.var(axis=0, ddof=1)
    se_mean = np.sqrt(var / n)
    m4 = np.mean((samples - emp_mean) ** 4, axis=0)
    se_var = np.sqrt(np.maximum(m4 - emp_var ** 2, 1e-300) / n)
    return (emp_mean - mean) / se_mean, (emp_var - var) / se_var


templates = arrays(np.float64, st.tuples(st.integers(2, 12), st.integers(2, 8)),
                   elements=st.floats(-3, 3, allow_nan=False).filter(lambda v: abs(v) > 1e-3))


class TestSimilarityMatrix:
    @settings(max_examples=60, deadline=None)
    @given(templates)
    def test_invariants(self, w):
        if np.any(np.linalg.norm(w, axis=0) < 1e-6):
            return
        sim = P.class_similarity(w)
        np.testing.assert_array_equal(sim.raw, sim.raw.T)
        np.testing.assert_allclose(np.diag(sim.raw), 1.0, atol=1e-9)
        assert np.all(sim.normalized >= P.EPS_FLOOR) and np.all(sim.normalized <= 1.0)
        np.testing.assert_allclose(sim.normalized.max(axis=1), 1.0)

    @settings(max_examples=40, deadline=None)
    @given(templates, st.floats(1e-3, 1e3))
    def test_positive_scaling_invariance(self, w, c):
        if np.any(np.linalg.norm(w, axis=0) < 1e-6):
            return
        np.testing.assert_allclose(P.cosine_similarity_matrix(w * c), P.cosine_similarity_matrix(w),
                                   rtol=0, atol=1e-14)

    def test_power_of_two_scaling_exact(self):
        w = np.random.default_rng(0).standard_normal((84, 10))
        np.testing.assert_array_equal(P.cosine_similarity_matrix(4.0 * w), P.cosine_similarity_matrix(w))

    def test_identical_and_orthogonal_columns(self):
        raw = P.cosine_similarity_matrix(np.array([[1.0, 1.0, 0.0], [0.0, 0.0, 1.0]]))
        assert raw[0, 1] == pytest.approx(1.0)
        assert raw[0, 2] == pytest.approx(0.0)

    def test_min_max_then_floor(self):
        row = np.array([[0.2, 1.0, 0.6]])
        np.testing.assert_allclose(P.normalize_rows(row), [[P.EPS_FLOOR, 1.0, 0.5]])

    def test_rows_hit_floor_and_one(self):
        sim = P.class_similarity(M.build_lenet5(0))
        assert sim.K == 10
        np.testing.assert_allclose(sim.normalized.min(axis=1), P.EPS_FLOOR)
        np.testing.assert_allclose(sim.normalized.max(axis=1), 1.0)

    def test_bias_excluded(self):
        net = M.build_lenet5(0)
        before = P.class_similarity(net).raw
        net.params["fc3/bias"].data[...] = np.arange(10.0)
        np.testing.assert_array_equal(P.class_similarity(net).raw, before)

    def test_zero_template_rejected(self):
        w = np.ones((4, 3))
        w[:, 1] = 0
        with pytest.raises(DegenerateTemplateError):
            P.cosine_similarity_matrix(w)

    def test_csv_export(self, tmp_path):
        sim = P.class_similarity(M.build_lenet5(0))
        back = np.loadtxt(sim.to_csv(tmp_path / "c.csv"), delimiter=",")
        np.testing.assert_array_equal(back, sim.normalized)
        back_raw = np.loadtxt(sim.to_csv(tmp_path / "r.csv", "raw"), delimiter=",")
        np.testing.assert_array_equal(back_raw, sim.raw)


class TestConcentration:
    def test_scales_row(self):
        sim = P.SimilarityMatrix(np.eye(3), np.array([[1.0, 0.5, 0.01], [0.5, 1, 0.3], [0.01, 0.3, 1]]))
        np.testing.assert_allclose(P.concentration(sim, 0, 1.0).alpha, [1.0, 0.5, 0.01])
        np.testing.assert_allclose(P.concentration(sim, 0, 0.1).alpha, [0.1, 0.05, 0.001])

    def test_bad_arguments(self):
        sim = P.uniform_prior(4)
        with pytest.raises(ParameterError):
            P.concentration(sim, 0, 0.0)
        with pytest.raises(ParameterError):
            P.concentration(sim, 4, 1.0)
        with pytest.raises(ParameterError):
            P.uniform_prior(1)

    def test_uniform_prior_gives_symmetric_dirichlet(self):
        np.testing.assert_array_equal(P.concentration(P.uniform_prior(10), 3, 1.0).alpha, np.ones(10))


class TestDirichletSampler:
    @pytest.mark.parametrize("alpha", ALPHAS, ids=lambda a: f"K{len(a)}_min{a.min():g}")
    def test_moments_within_four_standard_errors(self, alpha):
        samples = P.dirichlet_sample(alpha, np.random.default_rng(2024), size=N_DRAWS)
        zm, zv = moment_z_scores(samples, alpha)
        assert np.all(np.abs(zm) < 4), zm
        assert np.all(np.abs(zv) < 4), zv

    @pytest.mark.parametrize("alpha", ALPHAS[1:3], ids=["K3", "sparse"])
    def test_agrees_with_numpy_reference(self, alpha):
        ours = P.dirichlet_sample(alpha, np.random.default_rng(1), size=N_DRAWS)
        ref = np.random.default_rng(2).dirichlet(alpha, size=N_DRAWS)
        se = np.sqrt(ours.var(0) / N_DRAWS + ref.var(0) / N_DRAWS)
        assert np.all(np.abs(ours.mean(0) - ref.mean(0)) < 4 * se)
        # distribution of the largest component, a shape statistic beyond the first two moments
        q = [0.1, 0.5, 0.9]
        np.testing.assert_allclose(np.quantile(ours.max(1), q), np.quantile(ref.max(1), q), atol=0.01)

    def test_valid_probability_vectors(self):
        rng = np.random.default_rng(3)
        for alpha in ALPHAS + [np.full(10, 1e-3)]:
            s = P.dirichlet_sample(alpha, rng, size=2000)
            assert np.all(s >= 0)
            np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)

    def test_tiny_alpha_does_not_underflow(self):
        s = P.dirichlet_sample(np.full(10, 1e-4), np.random.default_rng(0), size=1000)
        assert np.all(np.isfinite(s))
        np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)

    def test_symmetric_means_exchangeable(self):
        s = P.dirichlet_sample(np.ones(10), np.random.default_rng(4), size=N_DRAWS)
        _, var = P.dirichlet_moments(np.ones(10))
        assert np.all(np.abs(s.mean(0) - 0.1) < 3 * np.sqrt(var / N_DRAWS))

    def test_small_beta_is_sparse(self):
        """Dir(0.1 * 1_10): the largest component exceeds 0.9 in ~14.5% of draws (numpy agrees),
        against essentially never for Dir(1_10); the median largest component is ~0.65."""
        rng = np.random.default_rng(5)
        sparse = P.dirichlet_sample(np.full(10, 0.1), rng, size=N_DRAWS).max(1)
        dense = P.dirichlet_sample(np.ones(10), rng, size=N_DRAWS).max(1)
        ref = np.random.default_rng(6).dirichlet(np.full(10, 0.1), size=N_DRAWS).max(1)
        assert abs((sparse > 0.9).mean() - (ref > 0.9).mean()) < 0.01
        assert (sparse > 0.5).mean() > 0.7
        assert (dense > 0.9).mean() < 1e-3

    def test_very_small_alpha_one_dominant_component(self):
        s = P.dirichlet_sample(np.full(10, 0.05), np.random.default_rng(7), size=N_DRAWS)
        assert (s > 0.5).sum(axis=1).mean() == pytest.approx(1.0, abs=0.15)

    def test_seed_determinism(self):
        a = P.dirichlet_sample(ALPHAS[3], np.random.default_rng(9), size=50)
        b = P.dirichlet_sample(ALPHAS[3], np.random.default_rng(9), size=50)
        np.testing.assert_array_equal(a, b)

    def test_no_collisions(self):
        s = P.dirichlet_sample(ALPHAS[4], np.random.default_rng(10), size=1000)
        assert len({row.tobytes() for row in s}) == 1000

    def test_single_draw_shape(self):
        assert P.dirichlet_sample(np.ones(4), np.random.default_rng(0)).shape == (4,)

    def test_rejects_bad_alpha(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ParameterError):
            P.dirichlet_sample(np.array([1.0, 0.0]), rng)
        with pytest.raises(DimensionError):
            P.dirichlet_sample(np.array([1.0]), rng)
        with pytest.raises(ParameterError):
            P.ConcentrationVector(np.array([1.0, -1.0]), 0, 1.0)

    def test_gamma_boost_mean(self):
        """Gamma(a, 1) has mean a; exercises the a < 1 boost path directly."""
        for a in (0.05, 0.5, 3.0):
            g = np.exp(P.log_gamma_sample(np.full(N_DRAWS, a), np.random.default_rng(11)))
            assert abs(g.mean() - a) < 4 * np.sqrt(a / N_DRAWS)
