import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import ortho_group

from diarclust.plda import (
    PldaModel,
    fit_plda,
    llr_coefficient_grads,
    llr_coefficients,
    load_plda,
    project,
    reduce_plda,
    sample_generative,
    save_plda,
    score_matrix,
    score_pair,
)
from diarclust.preprocess import PcaMode, fit_recording_pca
from oracles import llr_by_densities


def random_model(rng, d, psi=None) -> PldaModel:
    psi = rng.uniform(0, 5, d) if psi is None else np.asarray(psi, dtype=float)
    loading = ortho_group.rvs(d, random_state=rng) * rng.uniform(0.5, 2, d) if d > 1 else np.eye(1)
    return PldaModel(rng.normal(size=d), np.linalg.inv(loading), psi)


class TestModel:
    def test_bias(self):
        rng = np.random.default_rng(0)
        m = random_model(rng, 4)
        np.testing.assert_allclose(m.bias, m.diagonalizer @ m.mean, atol=1e-10)

    def test_rejects_negative_psi(self):
        with pytest.raises(ValueError):
            PldaModel(np.zeros(2), np.eye(2), np.array([1.0, -0.1]))

    def test_rejects_singular(self):
        with pytest.raises(ValueError):
            PldaModel(np.zeros(2), np.array([[1.0, 1.0], [1.0, 1.0]]), np.ones(2))

    def test_persistence(self, tmp_path):
        m = random_model(np.random.default_rng(1), 3)
        save_plda(m, tmp_path / "p.txt")
        back = load_plda(tmp_path / "p.txt")
        np.testing.assert_allclose(back.diagonalizer, m.diagonalizer, rtol=1e-8)
        np.testing.assert_allclose(back.psi, m.psi, rtol=1e-8)
        assert (tmp_path / "p.txt").read_text().startswith("PLDA 3\n")


class TestFit:
    PSI = np.array([10.0, 5.0, 1.0])

    def world(self):
        return PldaModel(np.zeros(3), np.eye(3), self.PSI)

    def test_recovers_psi_median_over_seeds(self):
        # a variance estimated from 50 speaker means has about 20% relative
        # sampling spread, so the bound is checked on the median of 20 draws
        fits = [fit_plda(*sample_generative(self.world(), 50, 20, seed)).psi for seed in range(20)]
        np.testing.assert_array_less(np.abs(np.median(fits, axis=0) / self.PSI - 1), 0.2)

    def test_recovers_psi_large_sample(self):
        x, labels = sample_generative(self.world(), 1000, 20, 7)
        np.testing.assert_array_less(np.abs(fit_plda(x, labels).psi / self.PSI - 1), 0.2)

    def test_identical_speaker_means(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(400, 3))
        labels = np.repeat([0, 1], 200)
        x[labels == 1] += x[labels == 0].mean(axis=0) - x[labels == 1].mean(axis=0)
        np.testing.assert_allclose(fit_plda(x, labels).psi, 0.0, atol=1e-12)

    def test_isotropic_within_moment_match(self):
        rng = np.random.default_rng(1)
        var = np.array([4.0, 0.5])
        means = rng.normal(size=(2000, 2)) * np.sqrt(var)
        labels = np.repeat(np.arange(2000), 10)
        x = means[labels] + rng.normal(size=(20000, 2))
        psi = np.sort(fit_plda(x, labels).psi)[::-1]
        np.testing.assert_allclose(psi, var, rtol=0.1)

    def test_projected_within_covariance_identity(self):
        rng = np.random.default_rng(2)
        world = random_model(rng, 3, self.PSI)
        x, labels = sample_generative(world, 50, 20, 3)
        model = fit_plda(x, labels)
        u = project(model, x)
        within = sum(np.cov(u[labels == s], rowvar=False, bias=True) * 20 for s in range(50)) / 1000
        assert np.linalg.norm(within - np.eye(3)) / np.sqrt(3) < 0.1

    def test_diagonalizes(self):
        rng = np.random.default_rng(3)
        world = random_model(rng, 4)
        model = fit_plda(*sample_generative(world, 30, 5, 4))
        w, b = model.covariances()
        v = model.diagonalizer
        np.testing.assert_allclose(v @ w @ v.T, np.eye(4), atol=1e-8)
        np.testing.assert_allclose(v @ b @ v.T, np.diag(model.psi), atol=1e-8)
        assert np.all(np.diff(model.psi) <= 0)

    def test_single_speaker(self):
        with pytest.raises(ValueError):
            fit_plda(np.ones((4, 2)), [0, 0, 0, 0])

    def test_speaker_with_one_example(self):
        with pytest.raises(ValueError):
            fit_plda(np.random.default_rng(0).normal(size=(3, 2)), [0, 0, 1])

    def test_singular_within(self):
        x = np.array([[0.0, 0.0], [1.0, 1.0], [0.0, 0.0], [1.0, 1.0]])
        with pytest.raises(ValueError, match="singular"):
            fit_plda(x, [0, 1, 0, 1])


class TestProject:
    def test_mean_maps_to_zero(self):
        m = random_model(np.random.default_rng(0), 4)
        np.testing.assert_allclose(project(m, m.mean), 0.0, atol=1e-12)

    def test_identity(self):
        m = PldaModel(np.zeros(3), np.eye(3), np.ones(3))
        x = np.array([1.0, -2.0, 3.0])
        np.testing.assert_array_equal(project(m, x), x)

    def test_invert(self):
        rng = np.random.default_rng(1)
        m = random_model(rng, 5)
        x = rng.normal(size=5)
        np.testing.assert_allclose(m.loading @ (project(m, x) + m.bias), x, atol=1e-8)

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            project(PldaModel(np.zeros(2), np.eye(2), np.ones(2)), np.ones(3))


class TestScorePair:
    def test_zero_psi(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            assert score_pair(np.zeros(3), rng.normal(size=3), rng.normal(size=3)) == 0.0

    def test_unit_psi_at_origin(self):
        expected = np.log(2.0) - 0.5 * np.log(3.0)
        assert score_pair(np.ones(1), [0.0], [0.0]) == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.14384, abs=1e-5)
        assert llr_by_densities([1.0], [0.0], [0.0]) == pytest.approx(expected, abs=1e-12)

    def test_density_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            d = rng.integers(1, 9)
            psi = rng.uniform(0, 10, d)
            a, c = rng.normal(scale=2, size=(2, d))
            assert score_pair(psi, a, c) == pytest.approx(llr_by_densities(psi, a, c), abs=1e-8)

    def test_non_finite(self):
        with pytest.raises(ValueError):
            score_pair(np.ones(2), [np.nan, 0.0], [0.0, 0.0])

    @given(st.lists(st.tuples(st.floats(0, 50), st.floats(-10, 10), st.floats(-10, 10)), min_size=1, max_size=6))
    def test_symmetric(self, rows):
        psi, a, c = (np.array(col) for col in zip(*rows))
        assert score_pair(psi, a, c) == score_pair(psi, c, a)

    def test_self_score_at_origin_nondecreasing_in_psi(self):
        grid = np.linspace(0, 50, 501)
        values = [score_pair(np.array([p]), [0.0], [0.0]) for p in grid]
        assert np.all(np.diff(values) >= 0)

    def test_coefficient_grads_finite_difference(self):
        psi = np.linspace(0.01, 20, 50)
        h = 1e-6
        for analytic, plus, minus in zip(llr_coefficient_grads(psi), llr_coefficients(psi + h), llr_coefficients(psi - h)):
            np.testing.assert_allclose(analytic, (plus - minus) / (2 * h), rtol=1e-6, atol=1e-9)

    def test_separation(self):
        rng = np.random.default_rng(2)
        world = random_model(rng, 6, np.full(6, 2.0))
        x, labels = sample_generative(world, 40, 10, 5)
        s = score_matrix(world, project(world, x))
        same = labels[:, None] == labels[None, :]
        off = ~np.eye(len(labels), dtype=bool)
        assert s[same & off].size > 1000
        assert s[same & off].mean() > s[~same].mean()


class TestScoreMatrix:
    def test_matches_pairs(self):
        rng = np.random.default_rng(0)
        psi = rng.uniform(0, 4, 5)
        u = rng.normal(size=(7, 5))
        s = score_matrix(psi, u)
        for i in range(7):
            for j in range(7):
                assert s[i, j] == pytest.approx(score_pair(psi, u[i], u[j]), abs=1e-10)
        np.testing.assert_array_equal(s, s.T)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(1)
        psi = rng.uniform(0, 4, 3)
        u = rng.normal(size=(6, 3))
        perm = rng.permutation(6)
        np.testing.assert_allclose(score_matrix(psi, u[perm]), score_matrix(psi, u)[np.ix_(perm, perm)], atol=1e-12)


class TestSampling:
    def test_zero_psi_no_spread(self):
        m = PldaModel(np.zeros(2), np.eye(2), np.zeros(2))
        x, labels = sample_generative(m, 100, 50, 0)
        means = np.array([x[labels == s].mean(axis=0) for s in range(100)])
        assert np.abs(means.std(axis=0)).max() < 0.25  # 1/sqrt(50) from noise alone

    def test_deterministic(self):
        m = random_model(np.random.default_rng(0), 3)
        a = sample_generative(m, 5, 4, 11)
        b = sample_generative(m, 5, 4, 11)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_variance_ratio(self):
        d = 10
        m = PldaModel(np.zeros(d), np.eye(d), np.full(d, 10.0))
        x, labels = sample_generative(m, 100, 100, 3)
        means = np.array([x[labels == s].mean(axis=0) for s in range(100)])
        within = np.mean([x[labels == s].var(axis=0, ddof=1) for s in range(100)], axis=0)
        # speaker means carry within noise of variance 1/100
        between = means.var(axis=0, ddof=1) - within / 100
        ratio = between.mean() / within.mean()
        assert ratio == pytest.approx(10.0, rel=0.15)


class TestReduce:
    def test_reduced_scores_match_marginal_densities(self):
        rng = np.random.default_rng(0)
        model = random_model(rng, 5)
        x = rng.normal(size=(30, 5))
        pca = fit_recording_pca(x, PcaMode.fixed_dims(3))
        red = reduce_plda(model, pca)
        y = pca.apply(x)
        w, b = model.covariances()
        g = pca.basis
        w_r, b_r = g @ w @ g.T, g @ b @ g.T
        mu = g @ (model.mean - pca.mean)
        from scipy.stats import multivariate_normal

        same = multivariate_normal(np.concatenate([mu, mu]), np.block([[w_r + b_r, b_r], [b_r, w_r + b_r]]))
        single = multivariate_normal(mu, w_r + b_r)
        s = score_matrix(red, project(red, y))
        for i, j in [(0, 1), (2, 7), (5, 5)]:
            expected = same.logpdf(np.concatenate([y[i], y[j]])) - single.logpdf(y[i]) - single.logpdf(y[j])
            assert s[i, j] == pytest.approx(expected, abs=1e-8)
