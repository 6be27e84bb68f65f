"""
Unit tests for datasets and the observation models.
"""
import json

import numpy as np
import pytest
from scipy.special import expit

from depfa.services.datasets import (
    Dataset,
    LongitudinalDataset,
    load_csv_dataset,
    load_dataset,
    load_longitudinal,
    save_dataset,
)
from depfa.services.exceptions import DataError
from depfa.services.likelihood import (
    DrugEvidence,
    Likelihood,
    bernoulli_grad,
    bernoulli_loglik,
    drug_cell_loglik,
)


class TestDataset:
    """Test cases for dataset validation."""

    def test_drug_sets_become_frozensets(self, drug_dataset):
        """Test drug records are normalized, keeping None as no record."""
        assert drug_dataset.drug_sets[1] == frozenset({1, 2})
        assert drug_dataset.drug_sets[4] is None
        assert drug_dataset.n_drugs == 4

    def test_rejects_non_binary_entries(self):
        """Test entries other than 0, 1 or NaN are refused."""
        with pytest.raises(DataError):
            Dataset(A_obs=[[0.0, 2.0]], covariates=[[0.0]])

    def test_rejects_covariate_row_mismatch(self):
        """Test one covariate row per item is required."""
        with pytest.raises(DataError) as exc:
            Dataset(A_obs=np.zeros((3, 2)), covariates=np.zeros((2, 1)))

        assert exc.value.details["n_items"] == 3

    def test_drug_mode_needs_map(self):
        """Test drug mode without B is refused."""
        with pytest.raises(DataError):
            Dataset(A_obs=np.full((2, 1), np.nan), covariates=np.zeros((2, 1)), mode="drug", drug_sets=[{0}, set()])

    def test_condition_without_indicated_drug(self):
        """Test a condition with n_c = 0 is refused."""
        with pytest.raises(DataError) as exc:
            Dataset(
                A_obs=np.full((2, 2), np.nan), covariates=np.zeros((2, 1)), mode="drug",
                B=np.array([[1, 0]]), drug_sets=[{0}, set()],
            )

        assert exc.value.details["conditions"] == [1]

    def test_drug_id_out_of_range(self):
        """Test drug ids beyond B's rows are refused."""
        with pytest.raises(DataError):
            Dataset(
                A_obs=np.full((1, 1), np.nan), covariates=np.zeros((1, 1)), mode="drug",
                B=np.array([[1]]), drug_sets=[{3}],
            )

    def test_subset_and_mask(self, direct_dataset):
        """Test subset keeps rows and masked hides cells."""
        sub = direct_dataset.subset([2, 5])
        mask = np.zeros((10, 3), dtype=bool)
        mask[1, 1] = True

        masked = direct_dataset.masked(mask)

        assert sub.n_items == 2
        assert np.array_equal(sub.covariates, direct_dataset.covariates[[2, 5]])
        assert np.isnan(masked.A_obs[1, 1])
        assert not np.isnan(direct_dataset.A_obs[1, 1])


class TestLongitudinalDataset:
    """Test cases for the visit-grid dataset."""

    def test_missed_visit_is_missing(self, longitudinal_dataset):
        """Test a missed visit leaves no observation."""
        assert np.all(np.isnan(longitudinal_dataset.A_obs[1, 2]))
        assert longitudinal_dataset.dts.tolist() == [1.0, 1.5]

    def test_caller_array_untouched(self):
        """Test masking missed visits works on a copy of the caller's array."""
        A = np.ones((2, 2, 1))

        ds = LongitudinalDataset(
            times=[0.0, 1.0], A_obs=A, covariates=np.zeros((2, 1)), visits=np.array([[True, True], [False, True]])
        )

        assert np.all(A == 1.0)
        assert np.isnan(ds.A_obs[1, 0, 0])

    def test_rejects_non_increasing_times(self):
        """Test timestamps must strictly increase."""
        with pytest.raises(DataError):
            LongitudinalDataset(times=[0.0, 0.0], A_obs=np.zeros((2, 2, 1)), covariates=np.zeros((2, 1)))

    def test_rejects_axis_mismatch(self):
        """Test the leading axis must match the visit grid."""
        with pytest.raises(DataError):
            LongitudinalDataset(times=[0.0, 1.0, 2.0], A_obs=np.zeros((2, 2, 1)), covariates=np.zeros((2, 1)))

    def test_missed_visit_drops_drug_record(self):
        """Test a drug record at a missed visit is treated as absent."""
        B = np.array([[1]])
        ds = LongitudinalDataset(
            times=[0.0, 1.0], A_obs=np.full((2, 2, 1), np.nan), covariates=np.zeros((2, 1)), mode="drug", B=B,
            drug_sets=[[{0}, set()], [{0}, {0}]], visits=np.array([[True, True], [True, False]]),
        )

        assert ds.snapshots[1].drug_sets[1] is None
        assert ds.snapshots[1].drug_sets[0] == frozenset({0})

    def test_subset(self, longitudinal_dataset):
        sub = longitudinal_dataset.subset([0, 2])

        assert sub.A_obs.shape == (3, 2, 2)
        assert not sub.visits[1, 1]


class TestDatasetIO:
    """Test cases for JSON and CSV inputs."""

    def test_drug_dataset_json(self, drug_dataset, tmp_path):
        """Test a drug-mode dataset survives a save and load."""
        path = str(tmp_path / "data.json")

        save_dataset(drug_dataset, path)
        loaded = load_dataset(path)

        assert loaded.mode == "drug"
        assert loaded.drug_sets == drug_dataset.drug_sets
        assert np.array_equal(loaded.B, drug_dataset.B)
        assert np.allclose(loaded.covariates, drug_dataset.covariates)

    def test_longitudinal_json(self, longitudinal_dataset, tmp_path):
        """Test visit times reconstruct the visit mask."""
        path = str(tmp_path / "long.json")

        save_dataset(longitudinal_dataset, path)
        loaded = load_longitudinal(path)

        assert np.array_equal(loaded.visits, longitudinal_dataset.visits)
        assert np.array_equal(np.isnan(loaded.A_obs), np.isnan(longitudinal_dataset.A_obs))

    def test_static_loader_refuses_visit_grid(self, longitudinal_dataset, tmp_path):
        path = str(tmp_path / "long.json")
        save_dataset(longitudinal_dataset, path)

        with pytest.raises(DataError):
            load_dataset(path)

    def test_missing_field(self, tmp_path):
        """Test a dataset without allocations is a data error."""
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"items": [[0.0]]}))

        with pytest.raises(DataError):
            load_dataset(str(path))

    def test_unreadable_file(self, tmp_path):
        with pytest.raises(DataError):
            load_dataset(str(tmp_path / "absent.json"))

    def test_csv_inputs(self, tmp_path):
        """Test blank CSV cells load as missing."""
        a = tmp_path / "A.csv"
        x = tmp_path / "X.csv"
        a.write_text("c0,c1\n1,\n0,1\n")
        x.write_text("x,y\n0.1,0.2\n0.3,0.4\n")

        ds = load_csv_dataset(str(a), str(x))

        assert np.isnan(ds.A_obs[0, 1])
        assert ds.A_obs[1].tolist() == [0.0, 1.0]
        assert ds.covariates.shape == (2, 2)


class TestBernoulli:
    """Test cases for the direct-mode likelihood."""

    def test_single_cell(self):
        """Test A = 1 at Lambda = 0 gives log 0.5."""
        assert bernoulli_loglik(np.array([[1.0]]), np.zeros((1, 1))) == pytest.approx(-0.6931471805599453)

    def test_all_missing(self):
        """Test fully masked observations contribute nothing."""
        assert bernoulli_loglik(np.full((2, 3), np.nan), np.ones((2, 3))) == 0.0

    def test_matches_probability_product(self):
        """Test against the log of the direct probability product."""
        r = np.random.default_rng(0)
        A = (r.random((3, 2)) < 0.5).astype(float)
        lam = r.normal(size=(3, 2))
        p = expit(lam)

        expected = np.log(np.prod(np.where(A == 1, p, 1 - p)))

        assert bernoulli_loglik(A, lam) == pytest.approx(expected, abs=1e-12)

    def test_large_logits_finite(self):
        """Test overflow-safe evaluation at extreme logits."""
        value = bernoulli_loglik(np.array([[0.0, 1.0]]), np.array([[800.0, -800.0]]))

        assert value == pytest.approx(-1600.0)

    def test_monotone(self):
        """Test the value rises in Lambda for A = 1 and falls for A = 0."""
        grid = np.linspace(-5, 5, 21)
        ones = [bernoulli_loglik(np.array([[1.0]]), np.array([[v]])) for v in grid]
        zeros = [bernoulli_loglik(np.array([[0.0]]), np.array([[v]])) for v in grid]

        assert np.all(np.diff(ones) > 0)
        assert np.all(np.diff(zeros) < 0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            bernoulli_loglik(np.zeros((2, 2)), np.zeros((2, 3)))

    def test_gradient_zero_on_missing(self):
        """Test missing cells carry no gradient."""
        g = bernoulli_grad(np.array([[np.nan, 1.0]]), np.zeros((1, 2)))

        assert g.tolist() == [[0.0, 0.5]]


class TestDrugLikelihood:
    """Test cases for the marginalized drug-condition model."""

    B2 = np.array([[1], [1]])

    def test_hand_evaluation(self):
        """Test n_c = 2, eps = 0.01 with one indicated drug present."""
        ev = DrugEvidence.from_drug_sets([{0}], self.B2, 0.01)

        assert np.exp(ev.log_l1[0, 0]) == pytest.approx(0.249975, rel=1e-12)
        assert np.exp(ev.log_l0[0, 0]) == pytest.approx(0.0099, rel=1e-12)
        assert drug_cell_loglik(0, 0, {0}, self.B2, 0.0, 0.01) == pytest.approx(np.log(0.5 * 0.249975 + 0.5 * 0.0099))
        assert drug_cell_loglik(0, 0, {0}, self.B2, 0.0, 0.01) == pytest.approx(-2.0408, abs=1e-4)

    def test_certain_condition_collapses(self):
        """Test p -> 1 leaves log L(1)."""
        value = drug_cell_loglik(0, 0, {0}, self.B2, 40.0, 0.01)

        assert value == pytest.approx(np.log(0.249975), abs=1e-12)

    def test_no_record_is_uninformative(self):
        """Test an item without a drug record contributes zero."""
        assert drug_cell_loglik(0, 0, None, self.B2, 1.3, 0.01) == 0.0

    def test_no_record_cells_are_exactly_zero(self):
        """Test vectorized cells for an item without a record are exactly neutral at any Lambda."""
        ev = DrugEvidence.from_drug_sets([None, {0}], self.B2, 0.05)
        lam = np.array([[0.3], [0.3]])

        cells = ev.loglik_cells(lam)

        assert cells[0, 0] == 0.0
        assert cells[1, 0] < 0.0
        assert ev.grad(lam)[0, 0] == 0.0

    def test_matches_two_term_enumeration(self, drug_dataset):
        """Test vectorized cells against explicit enumeration over A in {0, 1}."""
        eps = 0.05
        lam = np.random.default_rng(1).normal(size=(8, 3))
        ev = DrugEvidence.from_dataset(drug_dataset, eps)
        B = drug_dataset.B

        cells = ev.loglik_cells(lam)

        for i, ds in enumerate(drug_dataset.drug_sets):
            for c in range(3):
                if ds is None:
                    assert cells[i, c] == 0.0
                    continue
                lik = {}
                n_c = B[:, c].sum()
                for a, q in ((1, (1 - eps) / n_c), (0, eps)):
                    lik[a] = np.prod([q if d in ds else 1 - q for d in np.flatnonzero(B[:, c])])
                p = expit(lam[i, c])
                assert cells[i, c] == pytest.approx(np.log(p * lik[1] + (1 - p) * lik[0]), abs=1e-12)
                assert cells[i, c] == pytest.approx(drug_cell_loglik(i, c, ds, B, lam[i, c], eps), abs=1e-12)

    def test_unique_drug_posterior(self):
        """Test a drug unique to the condition gives P(A = 1) = 0.99 at p = 0.5."""
        ev = DrugEvidence.from_drug_sets([{0}], np.array([[1]]), 0.01)

        assert ev.posterior_prob(np.zeros((1, 1)))[0, 0] == pytest.approx(0.99)

    def test_zero_noise_limit(self):
        """Test eps = 0 makes an indicated drug decisive."""
        ev = DrugEvidence.from_drug_sets([{0}], self.B2, 0.0)

        assert ev.posterior_prob(np.array([[-3.0]]))[0, 0] == pytest.approx(1.0)

    def test_rejects_epsilon(self):
        with pytest.raises(ValueError):
            DrugEvidence.from_drug_sets([{0}], self.B2, 1.0)

    def test_gradient_finite_differences(self, drug_dataset):
        """Test the drug-mode gradient in Lambda against central differences."""
        lik = Likelihood(drug_dataset, 0.02)
        lam = np.random.default_rng(2).normal(size=(8, 3))
        h = 1e-6

        _, g = lik.value_and_grad(lam)

        for i, c in [(0, 0), (1, 2), (3, 1), (6, 2)]:
            e = np.zeros_like(lam)
            e[i, c] = h
            fd = (lik.value(lam + e) - lik.value(lam - e)) / (2 * h)
            assert g[i, c] == pytest.approx(fd, abs=1e-7)
