"""
Synthetic data and the masking study.

Generators draw item locations on the unit square, a k-NN graph, item effects
from the BYM prior and condition effects from N(0, Sigma_delta), then
allocations (direct mode), prescriptions (polypharmacy) or OU trajectories
(dynamic). All draws come from one `default_rng(seed)` in a fixed order, so a
single-visit dynamic dataset reproduces the static generator.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import scipy.sparse as sp
from joblib import Parallel, delayed
from scipy.special import expit

from depfa.models.schemas import ModelConfig, SamplerConfig, SimConfig
from depfa.services.datasets import Dataset, LongitudinalDataset
from depfa.services.dynamics import OuParams, simulate_step
from depfa.services.exceptions import DataError, EvaluationError
from depfa.services.gmrf import BymHyper, bym_precision, gmrf_sample
from depfa.services.graph import ItemGraph, build_knn_graph, laplacian
from depfa.services.model import StaticModel, logit_surface, lowrank_sigma
from depfa.services.sampler import pool_size, run_chains
from depfa.services.seeding import GENERATOR, derive_seed, replication_seeds
from depfa.services.tracing import traceable

logger = logging.getLogger(__name__)

DEFAULT_RHO_OU = 0.9
DEFAULT_SIGMA_OU = 1.0


@dataclass
class SimTruth:
    locations: np.ndarray
    graph: ItemGraph
    phi: np.ndarray
    delta: np.ndarray
    lam: np.ndarray
    A: np.ndarray


@dataclass
class _Core:
    locations: np.ndarray
    graph: ItemGraph
    L: sp.csr_matrix
    phi: np.ndarray
    delta: np.ndarray
    A: np.ndarray


def _draw_delta(config: SimConfig, rng: np.random.Generator) -> np.ndarray:
    if config.delta is not None:
        return np.asarray(config.delta, dtype=float)
    c = config.n_conditions
    if config.sigma is not None:
        rho = np.zeros(c) if config.rho is None else np.asarray(config.rho, dtype=float)
        cov = lowrank_sigma(np.asarray(config.sigma, dtype=float), rho, config.xi)
        chol = np.linalg.cholesky(cov.matrix + cov.jitter * np.eye(c))
        return chol @ rng.standard_normal(c)
    return config.sigma_delta * rng.standard_normal(c)


def _static_core(config: SimConfig, rng: np.random.Generator) -> _Core:
    locations = rng.random((config.n_items, 2))
    graph = build_knn_graph(locations, config.k)
    L = laplacian(graph)
    phi = gmrf_sample(bym_precision(L, BymHyper(config.tau_s, config.tau_u)), rng)
    delta = _draw_delta(config, rng)
    A = (rng.random((config.n_items, config.n_conditions)) < expit(logit_surface(phi, delta))).astype(float)
    return _Core(locations, graph, L, phi, delta, A)


def generate_static(config: SimConfig, seed: int) -> Tuple[Dataset, SimTruth]:
    rng = np.random.default_rng(seed)
    core = _static_core(config, rng)
    ds = Dataset(A_obs=core.A.copy(), covariates=core.locations, mode="direct")
    truth = SimTruth(core.locations, core.graph, core.phi, core.delta, logit_surface(core.phi, core.delta), core.A)
    logger.info(f"static data generated: items={config.n_items} conditions={config.n_conditions} seed={seed}")
    return ds, truth


def mask_entries(dataset: Dataset, fraction: float, seed: int) -> Tuple[Dataset, np.ndarray]:
    """Hide floor(fraction * cells + 1/2) uniformly chosen cells."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"mask fraction must lie in (0, 1), got {fraction}")
    n_cells = dataset.A_obs.size
    count = int(np.floor(fraction * n_cells + 0.5))
    rng = np.random.default_rng(seed)
    mask = np.zeros(n_cells, dtype=bool)
    mask[rng.choice(n_cells, size=count, replace=False)] = True
    mask = mask.reshape(dataset.A_obs.shape)
    return dataset.masked(mask), mask


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------

@dataclass
class ConfusionMatrix:
    """Rows: true 0 / true 1; columns: called 0 / called 1."""
    counts: np.ndarray
    rates: np.ndarray

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rates, index=["true_0", "true_1"], columns=["pred_0", "pred_1"])


def _evaluated(true_A: np.ndarray, probs: np.ndarray, mask: Optional[np.ndarray]):
    true_A = np.asarray(true_A, dtype=float)
    probs = np.asarray(probs, dtype=float)
    if true_A.shape != probs.shape:
        raise ValueError(f"shape mismatch: truth {true_A.shape} vs probabilities {probs.shape}")
    keep = ~np.isnan(true_A)
    if mask is not None:
        keep &= np.asarray(mask, dtype=bool)
    return true_A[keep], probs[keep]


def confusion(true_A, probs, threshold: float = 0.5, mask: Optional[np.ndarray] = None) -> ConfusionMatrix:
    """Row-normalized confusion rates; a cell is called 1 when p > threshold."""
    truth, p = _evaluated(true_A, probs, mask)
    if truth.size == 0:
        raise EvaluationError("no cells to evaluate")
    called = p > threshold
    counts = np.zeros((2, 2), dtype=np.int64)
    for t in (0, 1):
        counts[t, 0] = int(np.sum((truth == t) & ~called))
        counts[t, 1] = int(np.sum((truth == t) & called))
    totals = counts.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        rates = np.where(totals > 0, counts / np.maximum(totals, 1), np.nan)
    for t in (0, 1):
        if totals[t, 0] == 0:
            warnings.warn(f"class {t} is absent from the evaluated cells; its row is undefined")
    return ConfusionMatrix(counts=counts, rates=rates)


@dataclass
class FdrResult:
    fdr: float
    discoveries: int
    false_discoveries: int
    no_discoveries: bool


def false_discovery_rate(true_A, probs, mask: Optional[np.ndarray] = None, threshold: float = 0.5) -> FdrResult:
    truth, p = _evaluated(true_A, probs, mask)
    called = p > threshold
    n = int(called.sum())
    false = int(np.sum(called & (truth == 0)))
    if n == 0:
        return FdrResult(0.0, 0, 0, True)
    return FdrResult(false / n, n, false, False)


def drug_truth(dataset: Dataset) -> np.ndarray:
    """
    Scorable cells when latent allocations are unknown: 0 when no drug indicated
    for the condition is present, 1 when a drug indicated only for it is present,
    NaN otherwise.
    """
    if dataset.mode != "drug":
        raise DataError("drug-evidence truth needs a drug-mode dataset")
    B = dataset.B.astype(bool)
    unique = B & (B.sum(axis=1, keepdims=True) == 1)
    out = np.full((dataset.n_items, dataset.n_conditions), np.nan)
    for i, ds in enumerate(dataset.drug_sets):
        if ds is None:
            continue
        present = np.zeros(B.shape[0], dtype=bool)
        present[list(ds)] = True
        any_indicated = (B & present[:, None]).any(axis=0)
        any_unique = (unique & present[:, None]).any(axis=0)
        out[i, ~any_indicated] = 0.0
        out[i, any_unique] = 1.0
    return out


# ---------------------------------------------------------------------------
# polypharmacy and dynamic generators
# ---------------------------------------------------------------------------

def default_drug_map(n_conditions: int, n_anchors: int, drugs_per_condition: int) -> np.ndarray:
    """Anchors get one exclusive drug; other conditions get `drugs_per_condition`, the last shared with the next condition."""
    cols: List[List[int]] = []
    next_drug = 0
    for c in range(n_conditions):
        if c < n_anchors:
            cols.append([next_drug])
            next_drug += 1
        else:
            cols.append(list(range(next_drug, next_drug + drugs_per_condition)))
            next_drug += drugs_per_condition
    # neighbouring non-anchor conditions share a drug, as therapeutic classes overlap
    own_last = [drugs[-1] for drugs in cols]
    for c in range(n_anchors, n_conditions - 1):
        if drugs_per_condition > 1:
            cols[c + 1].append(own_last[c])
    B = np.zeros((next_drug, n_conditions), dtype=np.int8)
    for c, drugs in enumerate(cols):
        B[drugs, c] = 1
    return B


def prescription_probabilities(A: np.ndarray, B: np.ndarray, epsilon: float) -> np.ndarray:
    """P(drug d present | A_i) = 1 - prod over indicated c of (1 - q), q = (1-eps)/n_c or eps."""
    n_c = B.sum(axis=0).astype(float)
    q = np.where(A > 0.5, (1.0 - epsilon) / n_c, epsilon)  # (I, C)
    # q = 1 exactly forces the drug; its factor is handled by `forced`
    forced = ((q >= 1.0).astype(float) @ B.T.astype(float)) > 0
    log_absent = np.log1p(-np.where(q >= 1.0, 0.0, q)) @ B.T.astype(float)
    return np.where(forced, 1.0, -np.expm1(log_absent))


def generate_polypharmacy(config: SimConfig, seed: int, B: Optional[np.ndarray] = None) -> Tuple[Dataset, SimTruth]:
    if B is None:
        B = default_drug_map(config.n_conditions, config.anchors, config.drugs_per_condition)
    B = np.asarray(B, dtype=np.int8)
    empty = np.flatnonzero(B.sum(axis=0) == 0)
    if empty.size:
        raise DataError("every condition needs at least one indicated drug", {"conditions": empty.tolist()})
    if config.n_drugs is not None and config.n_drugs != B.shape[0]:
        raise DataError(f"n_drugs={config.n_drugs} does not match the drug map ({B.shape[0]} drugs)")
    rng = np.random.default_rng(seed)
    core = _static_core(config, rng)
    probs = prescription_probabilities(core.A, B, config.epsilon)
    present = rng.random(probs.shape) < probs
    drug_sets = [frozenset(np.flatnonzero(row).tolist()) for row in present]
    ds = Dataset(
        A_obs=np.full(core.A.shape, np.nan), covariates=core.locations, mode="drug", B=B, drug_sets=drug_sets
    )
    truth = SimTruth(core.locations, core.graph, core.phi, core.delta, logit_surface(core.phi, core.delta), core.A)
    logger.info(f"polypharmacy data generated: items={config.n_items} drugs={B.shape[0]} eps={config.epsilon} seed={seed}")
    return ds, truth


@dataclass
class DynamicTruth:
    locations: np.ndarray
    graph: ItemGraph
    phi: np.ndarray  # (T+1, I)
    delta: np.ndarray
    A: np.ndarray  # (T+1, I, C)
    ou: OuParams


def generate_dynamic(config: SimConfig, seed: int) -> Tuple[LongitudinalDataset, DynamicTruth]:
    rng = np.random.default_rng(seed)
    core = _static_core(config, rng)
    ou = OuParams(
        DEFAULT_RHO_OU if config.rho_ou is None else config.rho_ou,
        DEFAULT_SIGMA_OU if config.sigma_ou is None else config.sigma_ou,
    )
    hyper = BymHyper(config.tau_s, config.tau_u)
    # a scheduled visit is skipped with gap_probability, widening dt
    dts = config.visit_spacing * rng.geometric(1.0 - config.gap_probability, size=config.n_visits - 1)
    times = np.concatenate([[0.0], np.cumsum(dts)])
    paths = [core.phi]
    A = [core.A]
    for dt in dts:
        phi_t = simulate_step(core.L, hyper, float(dt), ou, paths[-1], rng)
        paths.append(phi_t)
        A.append((rng.random(core.A.shape) < expit(logit_surface(phi_t, core.delta))).astype(float))
    visits = np.ones((config.n_visits, config.n_items), dtype=bool)
    if config.miss_probability > 0 and config.n_visits > 1:
        visits[1:] = rng.random((config.n_visits - 1, config.n_items)) >= config.miss_probability
    A_true = np.stack(A)
    ds = LongitudinalDataset(times=times, A_obs=A_true.copy(), covariates=core.locations, visits=visits)
    truth = DynamicTruth(core.locations, core.graph, np.stack(paths), core.delta, A_true, ou)
    logger.info(f"dynamic data generated: items={config.n_items} visits={config.n_visits} rho_ou={ou.rho_ou} seed={seed}")
    return ds, truth


def simulate_ou_chain(ou: OuParams, dt: float, n_steps: int, n_paths: int, rng: np.random.Generator) -> np.ndarray:
    """Plain OU recursion (no spatial term) from the stationary law; shape (n_steps + 1, n_paths)."""
    a = float(ou.decay(dt))
    sd = float(np.sqrt(ou.step_variance(dt)))
    out = np.empty((n_steps + 1, n_paths))
    out[0] = ou.sigma_ou * rng.standard_normal(n_paths)
    for t in range(n_steps):
        out[t + 1] = a * out[t] + sd * rng.standard_normal(n_paths)
    return out


# ---------------------------------------------------------------------------
# FDR study
# ---------------------------------------------------------------------------

@dataclass
class FdrReport:
    replications: pd.DataFrame
    pairs: pd.DataFrame
    aggregate: Dict = field(default_factory=dict)

    def histogram(self, bins: int = 10) -> pd.DataFrame:
        edges = np.linspace(0.0, 1.0, bins + 1)
        model, _ = np.histogram(self.replications["model_fdr"], bins=edges)
        oracle, _ = np.histogram(self.replications["oracle_fdr"], bins=edges)
        return pd.DataFrame({"bin_lower": edges[:-1], "bin_upper": edges[1:], "model": model, "oracle": oracle})


def _replication(r: int, seed: int, config: SimConfig, model_config: ModelConfig, sampler_config: SamplerConfig):
    ds, truth = generate_static(config, derive_seed(seed, GENERATOR))
    masked, mask = mask_entries(ds, config.mask_fraction, seed)
    model = StaticModel(
        masked, truth.graph, epsilon=model_config.epsilon, delta_prior=model_config.delta_prior,
        logdet_backend=model_config.logdet_backend,
    )
    samples = run_chains(model, model.transforms, sampler_config.model_copy(update={"seed": seed}), n_jobs=1)
    phi = samples.block("phi")
    delta = samples.block("delta")
    lam_mean = phi.mean(axis=0)[:, None] + delta.mean(axis=0)[None, :]
    fit = false_discovery_rate(truth.A, expit(lam_mean), mask, config.threshold)
    oracle = false_discovery_rate(truth.A, expit(truth.lam), mask, config.threshold)
    corr = float(np.corrcoef(truth.lam[mask], lam_mean[mask])[0, 1])
    row = {
        "replication": r,
        "seed": seed,
        "model_fdr": fit.fdr,
        "oracle_fdr": oracle.fdr,
        "model_discoveries": fit.discoveries,
        "oracle_discoveries": oracle.discoveries,
        "model_no_discoveries": fit.no_discoveries,
        "oracle_no_discoveries": oracle.no_discoveries,
        "masked_cells": int(mask.sum()),
        "masked_positives": int(truth.A[mask].sum()),
        "lambda_corr": corr,
        "divergences": samples.divergences,
    }
    items, conds = np.nonzero(mask)
    pairs = pd.DataFrame({
        "replication": r, "item": items, "condition": conds,
        "true_lambda": truth.lam[mask], "posterior_lambda": lam_mean[mask],
    })
    return row, pairs


@traceable("fdr_study")
def fdr_study(
    config: SimConfig,
    sampler_config: Optional[SamplerConfig] = None,
    model_config: Optional[ModelConfig] = None,
    n_jobs: Optional[int] = None,
) -> FdrReport:
    """Generate, mask, fit and score `config.replications` independent datasets."""
    sampler_config = sampler_config or SamplerConfig()
    model_config = model_config or ModelConfig()
    seeds = replication_seeds(config.seed, config.replications)
    out = Parallel(n_jobs=pool_size(n_jobs, len(seeds)))(
        delayed(_replication)(r, s, config, model_config, sampler_config) for r, s in enumerate(seeds)
    )
    rows = pd.DataFrame([row for row, _ in out])
    pairs = pd.concat([p for _, p in out], ignore_index=True)
    flagged = int(rows["model_no_discoveries"].sum())
    if flagged:
        logger.warning(f"fdr study: replications_without_discoveries={flagged}")
    aggregate = {
        "replications": int(len(rows)),
        "mean_model_fdr": float(rows["model_fdr"].mean()),
        "mean_oracle_fdr": float(rows["oracle_fdr"].mean()),
        "mean_lambda_corr": float(rows["lambda_corr"].mean()),
        "fdr_gap": float(abs(rows["model_fdr"].mean() - rows["oracle_fdr"].mean())),
        "model_fdr": rows["model_fdr"].tolist(),
        "oracle_fdr": rows["oracle_fdr"].tolist(),
        "replications_without_discoveries": flagged,
    }
    logger.info(
        f"fdr study done: replications={len(rows)} model_fdr={aggregate['mean_model_fdr']:.3f} "
        f"oracle_fdr={aggregate['mean_oracle_fdr']:.3f}"
    )
    return FdrReport(replications=rows, pairs=pairs, aggregate=aggregate)
