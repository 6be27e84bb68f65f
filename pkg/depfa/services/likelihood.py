"""
Observation models on the logit surface.

Direct mode observes A_ic (possibly missing) as Bernoulli(logit^-1(Lambda_ic)).
Drug mode treats A_ic as latent and observes prescriptions: for condition c with
n_c indicated drugs, each indicated drug is present with probability
q1 = (1 - eps) / n_c when the condition is present and q0 = eps when absent.
Non-indicated drugs carry no evidence for c. A is summed out per cell:

    l_ic = log[ p_ic L_ic(1) + (1 - p_ic) L_ic(0) ]
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np
from scipy.special import expit, log_expit, xlogy

from depfa.services.datasets import Dataset


def bernoulli_loglik(A_obs: np.ndarray, lam: np.ndarray) -> float:
    """Sum over observed cells of A*Lambda - log(1 + exp(Lambda)); NaN cells are skipped."""
    A_obs = np.asarray(A_obs, dtype=float)
    lam = np.asarray(lam, dtype=float)
    if A_obs.shape != lam.shape:
        raise ValueError(f"shape mismatch: A {A_obs.shape} vs Lambda {lam.shape}")
    obs = ~np.isnan(A_obs)
    a = A_obs[obs]
    x = lam[obs]
    return float(np.sum(a * x - np.logaddexp(0.0, x)))


def bernoulli_grad(A_obs: np.ndarray, lam: np.ndarray) -> np.ndarray:
    obs = ~np.isnan(A_obs)
    return np.where(obs, np.nan_to_num(A_obs) - expit(lam), 0.0)


def _indicated_counts(drug_sets, B: np.ndarray) -> np.ndarray:
    """m_ic: number of drugs indicated for c present in item i's set."""
    m = np.zeros((len(drug_sets), B.shape[1]))
    for i, ds in enumerate(drug_sets):
        if ds:
            m[i] = B[sorted(ds)].sum(axis=0)
    return m


@dataclass(frozen=True)
class DrugEvidence:
    """Per-cell log L_ic(1) and log L_ic(0); zero for items without a drug record."""
    log_l1: np.ndarray
    log_l0: np.ndarray
    missing: Optional[np.ndarray] = None

    @classmethod
    def from_drug_sets(cls, drug_sets, B: np.ndarray, epsilon: float) -> "DrugEvidence":
        if not 0.0 <= epsilon < 1.0:
            raise ValueError(f"epsilon must lie in [0, 1), got {epsilon}")
        B = np.asarray(B)
        n_c = B.sum(axis=0).astype(float)
        if np.any(n_c < 1):
            raise ValueError("every condition needs at least one indicated drug")
        q1 = (1.0 - epsilon) / n_c
        m = _indicated_counts(drug_sets, B)
        # xlogy keeps 0 * log 0 = 0 for q1 = 1 or eps = 0
        log_l1 = xlogy(m, q1) + xlogy(n_c - m, 1.0 - q1)
        log_l0 = xlogy(m, epsilon) + xlogy(n_c - m, 1.0 - epsilon)
        missing = np.array([ds is None for ds in drug_sets], dtype=bool)
        log_l1[missing] = 0.0
        log_l0[missing] = 0.0
        return cls(log_l1=log_l1, log_l0=log_l0, missing=missing)

    @classmethod
    def from_dataset(cls, ds: Dataset, epsilon: float) -> "DrugEvidence":
        return cls.from_drug_sets(ds.drug_sets, ds.B, epsilon)

    @property
    def log_ratio(self) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            return self.log_l1 - self.log_l0

    def loglik_cells(self, lam: np.ndarray) -> np.ndarray:
        cells = np.logaddexp(log_expit(lam) + self.log_l1, log_expit(-lam) + self.log_l0)
        if self.missing is not None:
            cells[self.missing] = 0.0
        return cells

    def loglik(self, lam: np.ndarray) -> float:
        return float(np.sum(self.loglik_cells(lam)))

    def posterior_prob(self, lam: np.ndarray) -> np.ndarray:
        """P(A_ic = 1 | Lambda_ic, drugs)."""
        return expit(lam + self.log_ratio)

    def grad(self, lam: np.ndarray) -> np.ndarray:
        return self.posterior_prob(lam) - expit(lam)


def drug_cell_loglik(i: int, c: int, drug_set: Optional[Iterable[int]], B: np.ndarray, lam_ic: float, epsilon: float) -> float:
    """log[p L(1) + (1-p) L(0)] for a single item/condition cell."""
    B = np.asarray(B)
    n_c = float(B[:, c].sum())
    if n_c < 1:
        raise ValueError(f"condition {c} has no indicated drug")
    if drug_set is None:
        return 0.0
    present = set(drug_set)
    indicated = np.flatnonzero(B[:, c])
    m = float(sum(1 for d in indicated if d in present))
    q1 = (1.0 - epsilon) / n_c
    log_l1 = xlogy(m, q1) + xlogy(n_c - m, 1.0 - q1)
    log_l0 = xlogy(m, epsilon) + xlogy(n_c - m, 1.0 - epsilon)
    return float(np.logaddexp(log_expit(lam_ic) + log_l1, log_expit(-lam_ic) + log_l0))


class Likelihood:
    """The dataset's observation model as a function of Lambda (I x C)."""

    def __init__(self, ds: Dataset, epsilon: float):
        self.mode = ds.mode
        self.A_obs = ds.A_obs
        self.evidence = DrugEvidence.from_dataset(ds, epsilon) if ds.mode == "drug" else None

    def value_and_grad(self, lam: np.ndarray):
        if self.evidence is None:
            return bernoulli_loglik(self.A_obs, lam), bernoulli_grad(self.A_obs, lam)
        return self.evidence.loglik(lam), self.evidence.grad(lam)

    def value(self, lam: np.ndarray) -> float:
        if self.evidence is None:
            return bernoulli_loglik(self.A_obs, lam)
        return self.evidence.loglik(lam)
