"""
Convergence diagnostics: rank-normalized split R-hat and bulk effective sample size.

The estimators come from numpyro.diagnostics; draws are rank-normalized first so
heavy tails and constrained parameters are scored on a common normal scale.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
from numpyro.diagnostics import effective_sample_size, split_gelman_rubin
from scipy.special import ndtri
from scipy.stats import rankdata

logger = logging.getLogger(__name__)

# split_gelman_rubin needs two draws per half-chain
MIN_DRAWS = 4


def split_chains(x: np.ndarray) -> np.ndarray:
    """(chains, draws) -> (2 * chains, draws // 2); an odd middle draw is dropped."""
    x = np.asarray(x, dtype=float)
    half = x.shape[1] // 2
    return np.concatenate([x[:, :half], x[:, x.shape[1] - half:]], axis=0)


def rank_normalize(x: np.ndarray) -> np.ndarray:
    """Normal scores of the pooled ranks, shape preserved."""
    x = np.asarray(x, dtype=float)
    r = rankdata(x, method="average").reshape(x.shape)
    return ndtri((r - 0.375) / (x.size + 0.25))


def _split_rhat(z: np.ndarray) -> float:
    # constant chains give 0/0 (nan) or between/0 (inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        return float(split_gelman_rubin(z))


def rhat(x: np.ndarray) -> float:
    """max of the bulk and folded rank-normalized split R-hat for draws shaped (chains, draws)."""
    x = np.asarray(x, dtype=float)
    if x.shape[1] < MIN_DRAWS:
        return float("nan")
    bulk = _split_rhat(rank_normalize(x))
    folded = _split_rhat(rank_normalize(np.abs(x - np.median(x))))
    if np.isnan(bulk) and np.isnan(folded):
        return float("nan")
    return float(np.nanmax([bulk, folded]))


def ess_bulk(x: np.ndarray) -> float:
    """ESS of the rank-normalized split chains."""
    x = np.asarray(x, dtype=float)
    if x.shape[1] < MIN_DRAWS:
        return float("nan")
    with np.errstate(divide="ignore", invalid="ignore"):
        return float(effective_sample_size(rank_normalize(split_chains(x))))


@dataclass
class DiagnosticsReport:
    table: pd.DataFrame
    divergences: int
    n_chains: int
    n_draws: int

    @property
    def max_rhat(self) -> float:
        return float(self.table["rhat"].max())

    @property
    def min_ess(self) -> float:
        return float(self.table["ess_bulk"].min())

    def summary(self) -> Dict:
        return {
            "max_rhat": self.max_rhat,
            "min_ess_bulk": self.min_ess,
            "divergences": self.divergences,
            "chains": self.n_chains,
            "draws": self.n_draws,
        }


def diagnostics(samples, names: Optional[List[str]] = None) -> DiagnosticsReport:
    """Per-parameter mean, sd, R-hat and bulk ESS for a PosteriorSamples."""
    names = list(samples.names) if names is None else list(names)
    rows = []
    for name in names:
        x = samples.draws[:, :, samples.column_index(name)]
        rows.append({
            "parameter": name,
            "mean": float(np.mean(x)),
            "sd": float(np.std(x, ddof=1)) if x.size > 1 else float("nan"),
            "rhat": rhat(x),
            "ess_bulk": ess_bulk(x),
        })
    report = DiagnosticsReport(
        table=pd.DataFrame(rows), divergences=samples.divergences, n_chains=samples.n_chains, n_draws=samples.n_draws
    )
    logger.info(
        f"diagnostics: params={len(names)} max_rhat={report.max_rhat:.4f} "
        f"min_ess={report.min_ess:.1f} divergences={report.divergences}"
    )
    return report
