"""
Unit tests for the OU spatio-temporal extension.
"""
import numpy as np
import pytest
from scipy.stats import norm

from depfa.services.datasets import Dataset, LongitudinalDataset
from depfa.services.dynamics import (
    DynamicModel,
    DynamicParams,
    OuParams,
    dynamic_logpost,
    lag1_autocorrelation,
    ou_transition_logpdf,
    simulate_step,
)
from depfa.services.gmrf import BymHyper
from depfa.services.graph import build_knn_graph, laplacian
from depfa.services.model import StaticParams, beta22_logpdf, half_normal_logpdf, joint_logpost
from depfa.services.simulate import simulate_ou_chain


def _longitudinal(n_items, n_conditions, times, seed):
    r = np.random.default_rng(seed)
    A = (r.random((len(times), n_items, n_conditions)) < 0.5).astype(float)
    visits = np.ones((len(times), n_items), dtype=bool)
    if len(times) > 2:
        visits[1, 0] = False
    return LongitudinalDataset(times=times, A_obs=A, covariates=r.random((n_items, 2)), visits=visits)


class TestOuTransition:
    """Test cases for ou_transition_logpdf and OuParams."""

    def test_direct_formula(self):
        """Test rho = 0.5, dt = 1, sigma = 1 from phi_prev = 2: mean 1, variance 0.75."""
        ou = OuParams(0.5, 1.0)

        assert float(ou.decay(1.0)) * 2.0 == pytest.approx(1.0)
        assert float(ou.step_variance(1.0)) == pytest.approx(0.75)
        assert ou_transition_logpdf([1.0], [2.0], 1.0, ou) == pytest.approx(norm(1.0, np.sqrt(0.75)).logpdf(1.0))

    def test_long_gap_is_stationary(self):
        """Test dt -> infinity sends the mean to 0 and the variance to sigma_ou^2."""
        ou = OuParams(0.5, 1.7)

        assert float(ou.decay(200.0)) < 1e-50
        assert float(ou.step_variance(200.0)) == pytest.approx(1.7**2)

    def test_matches_scalar_normals(self):
        """Test a random instance against independent scalar normals."""
        r = np.random.default_rng(0)
        ou = OuParams(0.8, 0.6)
        prev, cur = r.normal(size=7), r.normal(size=7)
        sd = 0.6 * np.sqrt(1 - 0.8 ** (2 * 2.3))

        expected = norm(0.8**2.3 * prev, sd).logpdf(cur).sum()

        assert ou_transition_logpdf(cur, prev, 2.3, ou) == pytest.approx(expected, abs=1e-12)

    def test_persistence(self):
        """Test flat paths score higher than rough ones when rho is near 1."""
        ou = OuParams(0.999, 1.0)
        prev = np.array([0.4, -0.2, 1.0])

        flat = ou_transition_logpdf(prev, prev, 0.05, ou)
        rough = ou_transition_logpdf(prev + 0.1, prev, 0.05, ou)

        assert flat > rough

    @pytest.mark.parametrize("rho,sigma", [(0.0, 1.0), (1.0, 1.0), (0.5, 0.0)])
    def test_degenerate_parameters(self, rho, sigma):
        """Test boundary values are refused."""
        with pytest.raises(ValueError):
            OuParams(rho, sigma)

    def test_non_positive_dt(self):
        with pytest.raises(ValueError):
            ou_transition_logpdf([0.0], [0.0], 0.0, OuParams(0.5, 1.0))

    def test_stationary_variance_preserved(self):
        """Test the plain OU chain keeps the stationary variance over 10k steps."""
        paths = simulate_ou_chain(OuParams(0.5, 1.0), 1.0, 10_000, 50, np.random.default_rng(1))

        assert paths.var() == pytest.approx(1.0, abs=0.03)
        assert paths[-1].shape == (50,)
        assert lag1_autocorrelation(paths) == pytest.approx(0.5, abs=0.02)


class TestSimulateStep:
    def test_deterministic_per_seed(self, small_graph):
        """Test one conditional draw is reproducible."""
        L = laplacian(small_graph)
        prev = np.linspace(-1, 1, 12)

        a = simulate_step(L, BymHyper(1.0, 1.0), 1.0, OuParams(0.7, 1.0), prev, np.random.default_rng(2))
        b = simulate_step(L, BymHyper(1.0, 1.0), 1.0, OuParams(0.7, 1.0), prev, np.random.default_rng(2))

        assert np.array_equal(a, b)
        assert a.shape == (12,)


class TestDynamicLogPosterior:
    """Test cases for the dynamic joint."""

    def test_single_visit_reduces_to_static(self):
        """Test T = 0 equals the static joint with Q_0, plus the OU priors."""
        ds = _longitudinal(8, 3, [0.0], seed=3)
        graph = build_knn_graph(ds.covariates, 2)
        r = np.random.default_rng(4)
        phi, delta = r.normal(size=8), r.normal(size=3)
        sigma, rho = np.array([0.8, 1.1, 1.3]), np.array([0.1, -0.2, 0.05])
        dyn = DynamicParams(
            phi=phi[None], delta=delta, tau_s=1.4, tau_u=0.6, ou=OuParams(0.7, 0.9), sigma=sigma, rho=rho, xi=0.3
        )
        static = StaticParams(phi=phi, delta=delta, tau_s=1.4, tau_u=0.6, sigma=sigma, rho=rho, xi=0.3)

        value, grad = dynamic_logpost(dyn, ds, graph)
        s_value, s_grad = joint_logpost(static, Dataset(A_obs=ds.A_obs[0], covariates=ds.covariates), graph, extra_diagonal=1.0)

        ou_prior = beta22_logpdf(0.7)[0] + half_normal_logpdf(0.9)[0]
        assert value == pytest.approx(s_value + ou_prior, rel=1e-10)
        assert np.allclose(grad[:8], s_grad[:8], atol=1e-10)

    @pytest.mark.parametrize("delta_prior", ["lowrank", "diagonal"])
    def test_gradient_finite_differences(self, delta_prior):
        """Test the unconstrained gradient against central differences on I = 6, C = 2, T = 3."""
        ds = _longitudinal(6, 2, [0.0, 1.0, 2.5, 4.0], seed=5)
        model = DynamicModel(ds, build_knn_graph(ds.covariates, 2), delta_prior=delta_prior)
        r = np.random.default_rng(6)
        h = 1e-5
        for _ in range(5):
            z = r.normal(scale=0.5, size=model.transforms.size)

            _, g = model.logdensity(z)
            fd = np.array([(model.logdensity(z + h * e)[0] - model.logdensity(z - h * e)[0]) / (2 * h) for e in np.eye(z.size)])

            assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-5

    def test_banded_backend_matches_spectral(self):
        """Test per-visit factorizations reproduce the eigenbasis target and gradient."""
        ds = _longitudinal(9, 2, [0.0, 1.0, 2.5, 4.0], seed=15)
        graph = build_knn_graph(ds.covariates, 3)
        spectral = DynamicModel(ds, graph, logdet_backend="spectrum")
        banded = DynamicModel(ds, graph, logdet_backend="cholesky")
        r = np.random.default_rng(16)
        for _ in range(3):
            z = r.normal(scale=0.5, size=spectral.transforms.size)

            v1, g1 = spectral.logdensity(z)
            v2, g2 = banded.logdensity(z)

            assert v2 == pytest.approx(v1, rel=1e-10)
            assert np.allclose(g2, g1, rtol=1e-8, atol=1e-10)

    def test_banded_gradient_finite_differences(self):
        ds = _longitudinal(6, 2, [0.0, 1.0, 2.5], seed=17)
        model = DynamicModel(ds, build_knn_graph(ds.covariates, 2), logdet_backend="cholesky")
        z = np.random.default_rng(18).normal(scale=0.5, size=model.transforms.size)
        h = 1e-5

        _, g = model.logdensity(z)
        fd = np.array([(model.logdensity(z + h * e)[0] - model.logdensity(z - h * e)[0]) / (2 * h) for e in np.eye(z.size)])

        assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-5

    def test_out_of_support(self):
        """Test a non-positive OU scale gives -inf."""
        ds = _longitudinal(6, 2, [0.0, 1.0], seed=7)
        model = DynamicModel(ds, build_knn_graph(ds.covariates, 2))
        x = np.full(model.transforms.size, 0.5)
        x[model.transforms.slices["sigma_ou"]] = -1.0

        value, _ = model.log_posterior(x)

        assert value == -np.inf

    def test_params_round_trip(self):
        ds = _longitudinal(6, 2, [0.0, 1.0], seed=8)
        model = DynamicModel(ds, build_knn_graph(ds.covariates, 2), delta_prior="diagonal")
        x = np.random.default_rng(9).uniform(0.1, 0.9, size=model.transforms.size)

        params = model.to_params(x)

        assert params.phi.shape == (2, 6)
        assert np.array_equal(model.from_params(params), x)
