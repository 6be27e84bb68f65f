"""
Out-of-sample prediction by inverse-distance-weighted k-NN interpolation of
posterior item effects, evaluated draw by draw.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import pandas as pd
from scipy.special import expit

from depfa.services.exceptions import DataError
from depfa.services.graph import Metric, nearest_neighbors
from depfa.services.sampler import PosteriorSamples
from depfa.services.tracing import traceable

logger = logging.getLogger(__name__)


def interpolation_weights(distances) -> np.ndarray:
    """w_j proportional to 1/d_j; an exact match (d = 0) takes all the weight."""
    d = np.asarray(distances, dtype=float)
    if d.ndim != 1 or d.size == 0:
        raise DataError("need a non-empty vector of distances")
    if np.any(np.isnan(d)) or np.any(d < 0):
        raise DataError("distances must be non-negative", {"distances": d.tolist()})
    if np.all(np.isinf(d)):
        raise DataError("all neighbor distances are infinite")
    zeros = np.flatnonzero(d == 0)
    if zeros.size:
        w = np.zeros_like(d)
        w[zeros[0]] = 1.0
        return w
    inv = 1.0 / d
    return inv / inv.sum()


@dataclass
class PredictionQuery:
    covariates: np.ndarray
    k: int
    samples: PosteriorSamples
    train_covariates: np.ndarray
    metric: Metric = "euclidean"
    # dynamic fits: which visit's item effects to interpolate
    visit: int = -1


@dataclass
class Prediction:
    neighbors: np.ndarray  # (m, k)
    weights: np.ndarray  # (m, k)
    phi: np.ndarray  # (S, m)
    lam: np.ndarray  # (S, m, C)

    @property
    def probabilities(self) -> np.ndarray:
        return expit(self.lam)

    def summary(self, level: float = 0.95) -> pd.DataFrame:
        p = self.probabilities
        tail = (1.0 - level) / 2.0
        lo = np.quantile(p, tail, axis=0)
        hi = np.quantile(p, 1.0 - tail, axis=0)
        mean = p.mean(axis=0)
        m, c = mean.shape
        return pd.DataFrame({
            "item": np.repeat(np.arange(m), c),
            "condition": np.tile(np.arange(c), m),
            "mean": mean.ravel(),
            "lower": lo.ravel(),
            "upper": hi.ravel(),
        })


def _phi_draws(samples: PosteriorSamples, visit: int) -> np.ndarray:
    phi = samples.block("phi")
    return phi[:, visit, :] if phi.ndim == 3 else phi


@traceable("predict_new_item")
def predict_new_item(query: PredictionQuery) -> Prediction:
    """phi* = sum_j w_j phi_j per draw; Lambda*_c = phi* + delta_c per draw."""
    train = np.asarray(query.train_covariates, dtype=float)
    if query.k > train.shape[0]:
        raise DataError(f"k={query.k} exceeds the {train.shape[0]} training items", {"k": query.k})
    new = np.atleast_2d(np.asarray(query.covariates, dtype=float))
    idx, dist = nearest_neighbors(train, new, query.k, metric=query.metric)
    weights = np.vstack([interpolation_weights(row) for row in dist])
    phi_train = _phi_draws(query.samples, query.visit)
    if phi_train.shape[1] != train.shape[0]:
        raise DataError(
            "fitted item effects do not match the training covariates",
            {"fitted_items": int(phi_train.shape[1]), "training_items": int(train.shape[0])},
        )
    # (S, m, k) neighbor draws contracted with (m, k) weights
    phi = np.einsum("smk,mk->sm", phi_train[:, idx], weights)
    delta = query.samples.block("delta")
    lam = phi[:, :, None] + delta[:, None, :]
    logger.info(f"prediction done: new_items={new.shape[0]} k={query.k} draws={phi.shape[0]}")
    return Prediction(neighbors=idx, weights=weights, phi=phi, lam=lam)
