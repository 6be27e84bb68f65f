"""
Unit tests for out-of-sample prediction.
"""
import numpy as np
import pytest
from scipy.special import expit

from depfa.services.exceptions import DataError
from depfa.services.predict import PredictionQuery, interpolation_weights, predict_new_item
from depfa.services.sampler import PosteriorSamples


def _samples(phi, delta):
    """phi (S, I) or (S, T, I), delta (S, C) as a single chain."""
    phi = np.asarray(phi, dtype=float)
    delta = np.asarray(delta, dtype=float)
    if phi.ndim == 2:
        names = [f"phi[{i}]" for i in range(phi.shape[1])]
    else:
        names = [f"phi[{t},{i}]" for t in range(phi.shape[1]) for i in range(phi.shape[2])]
    names += [f"delta[{c}]" for c in range(delta.shape[1])]
    flat = np.concatenate([phi.reshape(phi.shape[0], -1), delta], axis=1)
    return PosteriorSamples(draws=flat[None], names=names)


class TestInterpolationWeights:
    """Test cases for interpolation_weights."""

    def test_symmetric(self):
        assert interpolation_weights([1.0, 1.0]).tolist() == [0.5, 0.5]

    def test_direct_formula(self):
        """Test distances (1, 3) give (0.75, 0.25)."""
        assert interpolation_weights([1.0, 3.0]) == pytest.approx([0.75, 0.25])

    def test_snap_to_exact_match(self):
        """Test a zero distance takes all the weight."""
        assert interpolation_weights([0.0, 5.0]).tolist() == [1.0, 0.0]
        assert interpolation_weights([2.0, 0.0, 0.0]).tolist() == [0.0, 1.0, 0.0]

    def test_sum_and_scale_invariance(self):
        """Test weights sum to one and ignore a common scale."""
        d = np.random.default_rng(0).uniform(0.1, 5.0, size=6)

        w = interpolation_weights(d)

        assert w.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.allclose(interpolation_weights(3.7 * d), w, atol=1e-12)

    def test_closer_neighbor_gains_weight(self):
        base = interpolation_weights([1.0, 2.0, 3.0])
        closer = interpolation_weights([1.0, 1.5, 3.0])

        assert closer[1] >= base[1]

    @pytest.mark.parametrize("d", [[np.inf, np.inf], [-1.0, 2.0], [], [np.nan]])
    def test_invalid(self, d):
        with pytest.raises(DataError):
            interpolation_weights(d)


class TestPredictNewItem:
    """Test cases for predict_new_item."""

    def test_duplicate_training_item(self):
        """Test a new point on top of item j copies item j's draws."""
        r = np.random.default_rng(1)
        train = r.random((6, 2))
        samples = _samples(r.normal(size=(20, 6)), r.normal(size=(20, 3)))

        pred = predict_new_item(PredictionQuery(covariates=train[4], k=3, samples=samples, train_covariates=train))

        assert np.array_equal(pred.phi[:, 0], samples.block("phi")[:, 4])
        assert pred.weights[0].tolist() == [1.0, 0.0, 0.0]

    def test_equidistant_constants(self):
        """Test constant draws 2 and 4 at equal distance interpolate to 3."""
        train = np.array([[0.0], [2.0]])
        samples = _samples(np.tile([2.0, 4.0], (5, 1)), np.zeros((5, 1)))

        pred = predict_new_item(PredictionQuery(covariates=[[1.0]], k=2, samples=samples, train_covariates=train))

        assert np.allclose(pred.phi, 3.0)
        assert np.allclose(pred.probabilities, expit(3.0))

    def test_matches_hand_computation(self):
        """Test the per-draw weighted sum against a direct loop."""
        r = np.random.default_rng(2)
        train = r.random((8, 2))
        new = r.random((3, 2))
        phi, delta = r.normal(size=(15, 8)), r.normal(size=(15, 2))

        pred = predict_new_item(PredictionQuery(covariates=new, k=3, samples=_samples(phi, delta), train_covariates=train))

        for m in range(3):
            d = np.linalg.norm(train - new[m], axis=1)
            nn = np.argsort(d, kind="stable")[:3]
            w = (1 / d[nn]) / np.sum(1 / d[nn])
            for s in range(15):
                expected = float(w @ phi[s, nn])
                assert pred.phi[s, m] == pytest.approx(expected, abs=1e-12)
                assert np.allclose(pred.lam[s, m], expected + delta[s], atol=1e-12)

    def test_convex_hull(self):
        """Test predicted draws stay between neighbor draws."""
        r = np.random.default_rng(3)
        train = r.random((10, 2))
        phi = r.normal(size=(30, 10))

        pred = predict_new_item(
            PredictionQuery(covariates=r.random((4, 2)), k=4, samples=_samples(phi, np.zeros((30, 1))), train_covariates=train)
        )

        for m in range(4):
            nb = phi[:, pred.neighbors[m]]
            assert np.all(pred.phi[:, m] >= nb.min(axis=1) - 1e-12)
            assert np.all(pred.phi[:, m] <= nb.max(axis=1) + 1e-12)

    def test_k_too_large(self):
        train = np.zeros((3, 2))

        with pytest.raises(DataError):
            predict_new_item(PredictionQuery(covariates=[[0.0, 0.0]], k=4, samples=_samples(np.zeros((2, 3)), np.zeros((2, 1))), train_covariates=train))

    def test_training_size_mismatch(self):
        """Test fitted effects must line up with the training covariates."""
        with pytest.raises(DataError):
            predict_new_item(
                PredictionQuery(covariates=[[0.0]], k=1, samples=_samples(np.zeros((2, 4)), np.zeros((2, 1))), train_covariates=np.zeros((3, 1)))
            )

    def test_dynamic_fit_uses_requested_visit(self):
        """Test a dynamic fit interpolates the chosen visit's effects."""
        phi = np.zeros((4, 2, 3))
        phi[:, 0] = 1.0
        phi[:, 1] = 5.0
        train = np.array([[0.0], [1.0], [2.0]])
        samples = _samples(phi, np.zeros((4, 1)))

        first = predict_new_item(PredictionQuery(covariates=[[0.4]], k=2, samples=samples, train_covariates=train, visit=0))
        last = predict_new_item(PredictionQuery(covariates=[[0.4]], k=2, samples=samples, train_covariates=train))

        assert np.allclose(first.phi, 1.0)
        assert np.allclose(last.phi, 5.0)

    def test_summary_table(self):
        r = np.random.default_rng(4)
        train = r.random((5, 2))

        pred = predict_new_item(
            PredictionQuery(covariates=r.random((2, 2)), k=2, samples=_samples(r.normal(size=(40, 5)), r.normal(size=(40, 3))), train_covariates=train)
        )
        table = pred.summary()

        assert len(table) == 6
        assert np.all(table["lower"] <= table["mean"])
        assert np.all(table["mean"] <= table["upper"])
