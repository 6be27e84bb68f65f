"""
Unit tests for convergence diagnostics.
"""
import numpy as np
import pytest
from numpyro.diagnostics import effective_sample_size, split_gelman_rubin

from depfa.services.diagnostics import diagnostics, ess_bulk, rank_normalize, rhat, split_chains
from depfa.services.sampler import PosteriorSamples


class TestSplitChains:
    def test_odd_draw_count(self):
        """Test the middle draw of an odd chain is dropped."""
        x = np.arange(10.0).reshape(2, 5)

        s = split_chains(x)

        assert s.tolist() == [[0, 1], [5, 6], [3, 4], [8, 9]]

    def test_rank_normalize_keeps_shape(self):
        z = rank_normalize(np.random.default_rng(0).normal(size=(3, 7)))

        assert z.shape == (3, 7)
        assert abs(z.mean()) < 1e-12


class TestRhat:
    """Test cases for rank-normalized split R-hat."""

    def test_iid_chains(self):
        """Test iid normal chains give R-hat near 1."""
        x = np.random.default_rng(1).normal(size=(4, 1000))

        assert rhat(x) == pytest.approx(1.0, abs=0.01)

    def test_stuck_chains(self):
        """Test chains at different constants are flagged."""
        x = np.vstack([np.zeros(100), np.ones(100)])

        assert rhat(x) > 1.1

    def test_shifted_chain(self):
        """Test one displaced chain raises R-hat."""
        x = np.random.default_rng(2).normal(size=(4, 500))
        x[0] += 3.0

        assert rhat(x) > 1.1

    def test_bulk_bound_from_numpyro(self):
        """Test R-hat is at least the numpyro split R-hat of the rank-normalized draws."""
        x = np.random.default_rng(7).normal(size=(4, 200))
        x[1] += 0.5

        assert rhat(x) >= float(split_gelman_rubin(rank_normalize(x))) - 1e-12

    def test_too_short(self):
        assert np.isnan(rhat(np.zeros((2, 2))))


class TestEss:
    """Test cases for bulk effective sample size."""

    def test_iid_draws(self):
        """Test iid draws give ESS near the draw count."""
        x = np.random.default_rng(3).normal(size=(4, 1000))

        assert ess_bulk(x) == pytest.approx(4000, rel=0.2)

    def test_autocorrelated_draws(self):
        """Test an AR(1) chain with coefficient 0.9 loses most of its draws."""
        r = np.random.default_rng(4)
        x = np.zeros((4, 2000))
        for t in range(1, 2000):
            x[:, t] = 0.9 * x[:, t - 1] + r.normal(size=4)

        assert ess_bulk(x) < 0.15 * x.size

    def test_uses_numpyro_estimator(self):
        """Test bulk ESS is the numpyro estimator on rank-normalized split chains."""
        x = np.random.default_rng(6).normal(size=(3, 301))

        expected = float(effective_sample_size(rank_normalize(split_chains(x))))

        assert ess_bulk(x) == pytest.approx(expected, rel=1e-12)

    def test_constant_draws(self):
        assert np.isnan(ess_bulk(np.ones((2, 50))))


class TestDiagnosticsReport:
    def test_table_and_summary(self):
        """Test the per-parameter table and its summary."""
        r = np.random.default_rng(5)
        samples = PosteriorSamples(
            draws=r.normal(size=(2, 200, 2)), names=["a", "b"],
            sample_stats={"divergent": np.array([[True] + [False] * 199, [False] * 200])},
        )

        report = diagnostics(samples)

        assert report.table["parameter"].tolist() == ["a", "b"]
        assert set(report.table.columns) == {"parameter", "mean", "sd", "rhat", "ess_bulk"}
        summary = report.summary()
        assert summary["divergences"] == 1
        assert summary["chains"] == 2
        assert summary["draws"] == 200
        assert np.isfinite(summary["max_rhat"])
