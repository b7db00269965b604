import math

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.stats import norm

from panelq.covariance import (
    PSD_FLOOR,
    _sandwich,
    bofinger_bandwidth,
    default_lag,
    density_weights,
    hall_sheather_bandwidth,
    residual_scores,
    sandwich_dependent,
    sandwich_iid,
    select_bandwidth,
)
from panelq.dgp import generate_panel, population_oracle
from panelq.errors import BandwidthError, ParameterError, SingularSandwichError
from panelq.md_estimator import estimate_md
from panelq.qr_core import DesignMatrix, fit_qr_triple


@pytest.fixture
def problem(rng):
    x = rng.uniform(0.0, 10.0, size=200)
    y = 0.5 + x + (1.0 + 0.5 * x) * rng.normal(size=200)
    design = DesignMatrix.from_regressors(x)
    d_T = hall_sheather_bandwidth(0.5, 200)
    return design, y, fit_qr_triple(design, y, 0.5, d_T), d_T


class TestBandwidth:

    def test_hall_sheather_reference_value(self):
        assert hall_sheather_bandwidth(0.5, 1000) == pytest.approx(0.0972, abs=1e-3)

    def test_hall_sheather_shrinks_with_T(self):
        assert hall_sheather_bandwidth(0.5, 100) > hall_sheather_bandwidth(0.5, 1000)

    def test_symmetric_in_tau(self):
        assert hall_sheather_bandwidth(0.3, 200) == pytest.approx(hall_sheather_bandwidth(0.7, 200))

    def test_clamped_near_the_boundary(self, caplog):
        d = hall_sheather_bandwidth(0.1, 25)
        assert d == pytest.approx(0.1 - 1.0 / 50)
        assert "clamped" in caplog.text

    def test_no_admissible_bandwidth(self):
        with pytest.raises(BandwidthError):
            hall_sheather_bandwidth(0.99, 10)

    def test_bofinger_is_wider_for_moderate_T(self):
        assert bofinger_bandwidth(0.5, 500) > hall_sheather_bandwidth(0.5, 500)

    def test_select_bandwidth(self):
        assert select_bandwidth(0.5, 100, override=0.05) == 0.05
        assert select_bandwidth(0.5, 100, rule="bofinger") == bofinger_bandwidth(0.5, 100)
        with pytest.raises(ParameterError):
            select_bandwidth(0.5, 100, rule="silverman")


class TestDefaultLag:

    @pytest.mark.parametrize("T, expected", [(32, 2), (100, 3), (2, 1), (243, 3), (244, 4), (100000, 10)])
    def test_fifth_root_ceiling(self, T, expected):
        assert default_lag(T) == expected

    def test_rejects_single_period(self):
        with pytest.raises(ParameterError):
            default_lag(1)


class TestDensityWeights:

    def test_positive_and_counted(self, problem):
        design, _, (lo, _, hi), d_T = problem
        dens = density_weights(design, lo, hi, d_T)
        assert np.all(dens.weights > 0)
        assert dens.n_truncated == 0

    def test_crossing_quantiles_are_floored(self, problem):
        design, _, (lo, _, hi), d_T = problem
        dens = density_weights(design, hi, lo, d_T)
        assert dens.n_truncated == design.T
        assert_allclose(dens.weights, 1e6)

    @pytest.mark.parametrize("tau", [0.25, 0.5])
    def test_mean_weight_matches_error_density(self, tau):
        T = 100_000
        rng = np.random.default_rng(5)
        x = rng.uniform(0.0, 10.0, size=T)
        y = 1.0 + x + rng.normal(size=T)
        design = DesignMatrix.from_regressors(x)
        d_T = hall_sheather_bandwidth(tau, T)
        lo, _, hi = fit_qr_triple(design, y, tau, d_T)
        dens = density_weights(design, lo, hi, d_T)
        assert dens.weights.mean() == pytest.approx(norm.pdf(norm.ppf(tau)), rel=0.05)


class TestSandwich:

    def test_iid_shapes_and_symmetry(self, problem):
        design, y, fits, d_T = problem
        cov = sandwich_iid(design, y, fits, 0.5, d_T)
        assert cov.v_hat.shape == (2, 2)
        assert cov.w_hat.shape == (1, 1)
        assert_allclose(cov.v_hat, cov.v_hat.T)
        assert np.all(np.linalg.eigvalsh(cov.v_hat) > 0)
        assert cov.w_hat[0, 0] == pytest.approx(np.linalg.inv(cov.v_hat)[1, 1])

    def test_iid_a_hat(self, problem):
        design, y, fits, d_T = problem
        cov = sandwich_iid(design, y, fits, 0.5, d_T)
        Z = design.values
        assert_allclose(cov.a_hat, 0.25 * Z.T @ Z / design.T)

    def test_dependent_with_zero_lag_equals_iid(self, problem):
        design, y, fits, d_T = problem
        iid = sandwich_iid(design, y, fits, 0.5, d_T)
        dep = sandwich_dependent(design, y, fits, 0.5, d_T, m_T=0)
        assert np.array_equal(iid.a_hat, dep.a_hat)
        assert np.array_equal(iid.w_hat, dep.w_hat)
        assert dep.m_T == 0 and not dep.psd_repaired

    @pytest.mark.parametrize("m_T", [-1, 200])
    def test_lag_out_of_range(self, problem, m_T):
        design, y, fits, d_T = problem
        with pytest.raises(ParameterError):
            sandwich_dependent(design, y, fits, 0.5, d_T, m_T=m_T)

    def test_intercept_only_has_empty_weight(self, rng):
        design = DesignMatrix(np.ones((50, 1)))
        y = rng.normal(size=50)
        fits = fit_qr_triple(design, y, 0.5, 0.2)
        cov = sandwich_iid(design, y, fits, 0.5, 0.2)
        assert cov.w_hat.shape == (0, 0)

    def test_scores_treat_interpolated_rows_as_below(self, problem):
        design, y, fits, _ = problem
        scores = residual_scores(design, y, fits[1], 0.5)
        basis = list(fits[1].basis)
        assert_allclose(scores[basis], -0.5 * design.values[basis])

    def test_weight_is_slope_block_of_b_ainv_b(self, problem):
        design, y, fits, d_T = problem
        cov = sandwich_iid(design, y, fits, 0.5, d_T)
        expected = cov.b_hat @ np.linalg.solve(cov.a_hat, cov.b_hat)
        assert_allclose(cov.w_hat, expected[1:, 1:], rtol=1e-10)

    def test_single_floored_density_keeps_a_finite_weight(self):
        x = np.linspace(0.0, 10.0, 25)
        Z = np.column_stack([np.ones(25), x])
        f = np.ones(25)
        f[20] = 1e6
        a_hat = 0.25 * Z.T @ Z / 25
        b_hat = (Z * f[:, None]).T @ Z / 25
        _, w_hat = _sandwich(a_hat, b_hat, 1e12)
        assert np.isfinite(w_hat[0, 0]) and w_hat[0, 0] > 0
        assert_allclose(w_hat, (b_hat @ np.linalg.inv(a_hat) @ b_hat)[1:, 1:], rtol=1e-8)

    def test_singular_b_rejected(self):
        a_hat = np.eye(2)
        b_hat = np.array([[1.0, 1.0], [1.0, 1.0]])
        with pytest.raises(SingularSandwichError, match="B matrix"):
            _sandwich(a_hat, b_hat, 1e12, individual="7")

    def test_alternating_scores_are_repaired(self, rng):
        T = 400
        x = rng.normal(0.0, 3.0, size=T)
        y = x + (-1.0) ** np.arange(T) * (1.0 + 0.1 * rng.uniform(size=T))
        design = DesignMatrix.from_regressors(x)
        d_T = hall_sheather_bandwidth(0.5, T)
        fits = fit_qr_triple(design, y, 0.5, d_T)
        cov = sandwich_dependent(design, y, fits, 0.5, d_T, m_T=1)
        assert cov.psd_repaired
        vals = np.linalg.eigvalsh(cov.a_hat)
        assert vals.min() >= 0.99 * PSD_FLOOR * vals.max()
        assert np.all(np.isfinite(cov.w_hat)) and cov.w_hat[0, 0] > 0

    def test_scale_equivariance(self, problem):
        design, y, fits, d_T = problem
        c = 2.0
        scaled = fit_qr_triple(design, c * y, 0.5, d_T)
        for base, fit in zip(fits, scaled):
            assert_allclose(fit.gamma, c * base.gamma, rtol=1e-8, atol=1e-10)
        cov = sandwich_iid(design, y, fits, 0.5, d_T)
        cov_c = sandwich_iid(design, c * y, scaled, 0.5, d_T)
        assert_allclose(cov_c.a_hat, cov.a_hat)
        assert_allclose(cov_c.b_hat, cov.b_hat / c, rtol=1e-8)
        assert_allclose(cov_c.v_hat, c ** 2 * cov.v_hat, rtol=1e-7)
        assert_allclose(cov_c.w_hat, cov.w_hat / c ** 2, rtol=1e-7)


class TestLongRunVariance:

    def test_ar1_median_indicator(self):
        # lag-j covariance of 1(u <= 0) for Gaussian AR(1) is arcsin(rho^j) / (2 pi)
        rho, T = 0.5, 100_000
        rng = np.random.default_rng(99)
        eps = rng.normal(size=T)
        u = np.empty(T)
        u[0] = eps[0]
        for t in range(1, T):
            u[t] = rho * u[t - 1] + math.sqrt(1.0 - rho ** 2) * eps[t]
        expected = 0.25 + sum(math.asin(rho ** j) for j in range(1, 60)) / math.pi

        design = DesignMatrix(np.ones((T, 1)))
        d_T = hall_sheather_bandwidth(0.5, T)
        fits = fit_qr_triple(design, u, 0.5, d_T)
        cov = sandwich_dependent(design, u, fits, 0.5, d_T, m_T=default_lag(T))
        assert cov.a_hat[0, 0] == pytest.approx(expected, rel=0.10)
        assert cov.a_hat[0, 0] > 0.25


class TestPopulationAgreement:

    def test_iid_sandwich_matches_population(self):
        T = 40_000
        rng = np.random.default_rng(11)
        panel = generate_panel(1, T, 0.5, "normal", rng).panel
        design, y = panel.design(0), panel.response(0)
        d_T = hall_sheather_bandwidth(0.5, T)
        cov = sandwich_iid(design, y, fit_qr_triple(design, y, 0.5, d_T), 0.5, d_T)
        pop = population_oracle(0.5, "normal", 0.5, n=1)
        assert_allclose(np.diag(cov.v_hat), np.diag(pop.v[0]), rtol=0.10)

    def test_lag_terms_vanish_on_independent_data(self):
        T = 40_000
        rng = np.random.default_rng(12)
        panel = generate_panel(1, T, 0.0, "normal", rng).panel
        design, y = panel.design(0), panel.response(0)
        d_T = hall_sheather_bandwidth(0.5, T)
        fits = fit_qr_triple(design, y, 0.5, d_T)
        iid = sandwich_iid(design, y, fits, 0.5, d_T)
        dep = sandwich_dependent(design, y, fits, 0.5, d_T, m_T=3)
        assert np.linalg.norm(dep.a_hat - iid.a_hat) <= 0.05 * np.linalg.norm(iid.a_hat)

    @pytest.mark.slow
    def test_moment_errors_shrink_with_T(self):
        n, lam, tau = 10, 0.5, 0.25
        pop = population_oracle(lam, "normal", tau, n=n)
        rng = np.random.default_rng(13)
        a_err, b_err = [], []
        for T in (100, 400, 1600):
            a_max, b_max = [], []
            for _ in range(5):
                est = estimate_md(generate_panel(n, T, lam, "normal", rng).panel, tau)
                covs = [r.covariance for r in est.per_individual]
                a_max.append(max(np.linalg.norm(c.a_hat - a) for c, a in zip(covs, pop.a)))
                b_max.append(max(np.linalg.norm(c.b_hat - b) for c, b in zip(covs, pop.b)))
            a_err.append(np.median(a_max))
            b_err.append(np.median(b_max))
        assert a_err[0] > a_err[1] > a_err[2]
        assert b_err[0] > b_err[1] > b_err[2]
