"""
Datasets for the static and longitudinal models, with JSON and CSV IO.

Observed allocations are float matrices with NaN for missing cells. Drug ids
and condition ids are 0-based. An item whose drug set is `None` has no drug
record and carries no drug evidence.

JSON layout (static):
    {"items": [[x, y, ...], ...], "A": [[0|1|null]], "drugs": [[d, ...] | null],
     "B": [[0|1]], "mode": "direct"|"drug"}
Longitudinal JSON adds "times" (the visit grid) and optional per-item
"visit_times"; "A" and "drugs" gain a leading visit axis.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from typing import FrozenSet, List, Literal, Optional, Sequence

import numpy as np
import pandas as pd

from depfa.services.exceptions import DataError

logger = logging.getLogger(__name__)

Mode = Literal["direct", "drug"]
DrugSet = Optional[FrozenSet[int]]


def _as_drug_sets(drugs: Optional[Sequence], n_items: int) -> Optional[List[DrugSet]]:
    if drugs is None:
        return None
    if len(drugs) != n_items:
        raise DataError("one drug record per item required", {"n_items": n_items, "n_records": len(drugs)})
    return [None if d is None else frozenset(int(x) for x in d) for d in drugs]


def _check_drug_map(B: Optional[np.ndarray], n_conditions: int, drug_sets) -> None:
    if B is None:
        raise DataError("drug mode requires a drug-condition map B")
    if B.ndim != 2 or B.shape[1] != n_conditions or B.shape[0] < 1:
        raise DataError("B must have shape (D, C)", {"shape": list(B.shape), "n_conditions": n_conditions})
    if not np.all((B == 0) | (B == 1)):
        raise DataError("B must be binary")
    n_c = B.sum(axis=0)
    empty = np.flatnonzero(n_c == 0)
    if empty.size:
        raise DataError("every condition needs at least one indicated drug", {"conditions": empty.tolist()})
    n_drugs = B.shape[0]
    for i, ds in enumerate(drug_sets or []):
        if ds is not None and any(d < 0 or d >= n_drugs for d in ds):
            raise DataError("drug id out of range", {"item": i, "n_drugs": n_drugs})


@dataclass
class Dataset:
    A_obs: np.ndarray
    covariates: np.ndarray
    mode: Mode = "direct"
    B: Optional[np.ndarray] = None
    drug_sets: Optional[List[DrugSet]] = None
    item_ids: Optional[List[str]] = None

    def __post_init__(self):
        self.A_obs = np.asarray(self.A_obs, dtype=float)
        self.covariates = np.asarray(self.covariates, dtype=float)
        if self.A_obs.ndim != 2 or min(self.A_obs.shape) < 1:
            raise DataError("A_obs must be a non-empty I x C matrix", {"shape": list(self.A_obs.shape)})
        observed = self.A_obs[~np.isnan(self.A_obs)]
        if not np.all((observed == 0) | (observed == 1)):
            raise DataError("A_obs entries must be 0, 1 or missing")
        if self.covariates.ndim != 2 or self.covariates.shape[0] != self.A_obs.shape[0]:
            raise DataError(
                "covariates must have one row per item",
                {"covariates": list(self.covariates.shape), "n_items": self.A_obs.shape[0]},
            )
        if self.mode not in ("direct", "drug"):
            raise DataError(f"unknown mode {self.mode!r}")
        self.drug_sets = _as_drug_sets(self.drug_sets, self.n_items)
        if self.B is not None:
            self.B = np.asarray(self.B, dtype=np.int8)
        if self.mode == "drug":
            _check_drug_map(self.B, self.n_conditions, self.drug_sets)
            if self.drug_sets is None:
                raise DataError("drug mode requires per-item drug sets")

    @property
    def n_items(self) -> int:
        return self.A_obs.shape[0]

    @property
    def n_conditions(self) -> int:
        return self.A_obs.shape[1]

    @property
    def n_drugs(self) -> int:
        return 0 if self.B is None else self.B.shape[0]

    def observed_mask(self) -> np.ndarray:
        return ~np.isnan(self.A_obs)

    def subset(self, items: Sequence[int]) -> "Dataset":
        idx = np.asarray(items, dtype=np.int64)
        return replace(
            self,
            A_obs=self.A_obs[idx],
            covariates=self.covariates[idx],
            drug_sets=None if self.drug_sets is None else [self.drug_sets[i] for i in idx],
            item_ids=None if self.item_ids is None else [self.item_ids[i] for i in idx],
        )

    def masked(self, mask: np.ndarray) -> "Dataset":
        A = self.A_obs.copy()
        A[np.asarray(mask, dtype=bool)] = np.nan
        return replace(self, A_obs=A)

    def to_dict(self) -> dict:
        return {
            "items": self.covariates.tolist(),
            "A": [[None if np.isnan(v) else int(v) for v in row] for row in self.A_obs],
            "drugs": None if self.drug_sets is None else [None if d is None else sorted(d) for d in self.drug_sets],
            "B": None if self.B is None else self.B.tolist(),
            "mode": self.mode,
        }


@dataclass
class LongitudinalDataset:
    """A shared visit grid; per-visit allocations and drug sets with a leading visit axis."""
    times: np.ndarray
    A_obs: np.ndarray
    covariates: np.ndarray
    mode: Mode = "direct"
    B: Optional[np.ndarray] = None
    drug_sets: Optional[List[Optional[List[DrugSet]]]] = None
    visits: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.A_obs = np.array(self.A_obs, dtype=float)
        if self.times.ndim != 1 or self.times.size < 1:
            raise DataError("times must be a non-empty vector")
        if np.any(np.diff(self.times) <= 0):
            raise DataError("visit times must be strictly increasing", {"times": self.times.tolist()})
        if self.A_obs.ndim != 3 or self.A_obs.shape[0] != self.times.size:
            raise DataError(
                "A_obs must have shape (T+1, I, C)",
                {"shape": list(self.A_obs.shape), "n_times": int(self.times.size)},
            )
        if self.visits is None:
            self.visits = np.ones(self.A_obs.shape[:2], dtype=bool)
        self.visits = np.asarray(self.visits, dtype=bool)
        if self.visits.shape != self.A_obs.shape[:2]:
            raise DataError("visits must have shape (T+1, I)")
        # a missed visit leaves no observation for the item at that time
        self.A_obs[~self.visits] = np.nan
        if self.drug_sets is None:
            self.drug_sets = [None] * self.n_times
        if len(self.drug_sets) != self.n_times:
            raise DataError("one drug record list per visit required")
        # each snapshot validates itself
        self.snapshots = [self.at_visit(t) for t in range(self.n_times)]

    @property
    def n_times(self) -> int:
        return self.times.size

    @property
    def n_items(self) -> int:
        return self.A_obs.shape[1]

    @property
    def n_conditions(self) -> int:
        return self.A_obs.shape[2]

    @property
    def dts(self) -> np.ndarray:
        return np.diff(self.times)

    def subset(self, items: Sequence[int]) -> "LongitudinalDataset":
        idx = np.asarray(items, dtype=np.int64)
        return LongitudinalDataset(
            times=self.times,
            A_obs=self.A_obs[:, idx],
            covariates=self.covariates[idx],
            mode=self.mode,
            B=self.B,
            drug_sets=[None if ds is None else [ds[i] for i in idx] for ds in self.drug_sets],
            visits=self.visits[:, idx],
        )

    def at_visit(self, t: int) -> Dataset:
        drugs = self.drug_sets[t]
        if drugs is not None:
            drugs = [None if not self.visits[t, i] else d for i, d in enumerate(drugs)]
        elif self.mode == "drug":
            drugs = [None] * self.n_items
        return Dataset(
            A_obs=self.A_obs[t], covariates=self.covariates, mode=self.mode, B=self.B, drug_sets=drugs
        )

    def to_dict(self) -> dict:
        return {
            "times": self.times.tolist(),
            "items": np.asarray(self.covariates).tolist(),
            "A": [[[None if np.isnan(v) else int(v) for v in row] for row in At] for At in self.A_obs],
            "drugs": [
                None if ds is None else [None if d is None else sorted(d) for d in ds] for ds in self.drug_sets
            ],
            "visit_times": [self.times[self.visits[:, i]].tolist() for i in range(self.n_items)],
            "B": None if self.B is None else np.asarray(self.B).tolist(),
            "mode": self.mode,
        }


def _nan_matrix(rows) -> np.ndarray:
    return np.array([[np.nan if v is None else float(v) for v in row] for row in rows], dtype=float)


def load_dataset(path: str) -> Dataset:
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read dataset {path}: {e}") from e
    if "times" in raw:
        raise DataError("dataset has a visit grid; load it with load_longitudinal")
    try:
        ds = Dataset(
            A_obs=_nan_matrix(raw["A"]),
            covariates=np.asarray(raw["items"], dtype=float),
            mode=raw.get("mode", "direct"),
            B=None if raw.get("B") is None else np.asarray(raw["B"]),
            drug_sets=raw.get("drugs"),
        )
    except KeyError as e:
        raise DataError(f"dataset is missing field {e}") from e
    logger.info(f"dataset loaded: path={path} items={ds.n_items} conditions={ds.n_conditions} mode={ds.mode}")
    return ds


def load_longitudinal(path: str) -> LongitudinalDataset:
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read dataset {path}: {e}") from e
    try:
        times = np.asarray(raw["times"], dtype=float)
        A = np.stack([_nan_matrix(At) for At in raw["A"]])
        visits = None
        if raw.get("visit_times") is not None:
            visits = np.zeros(A.shape[:2], dtype=bool)
            for i, vt in enumerate(raw["visit_times"]):
                visits[np.isin(times, np.asarray(vt, dtype=float)), i] = True
        drugs = raw.get("drugs")
        ds = LongitudinalDataset(
            times=times,
            A_obs=A,
            covariates=np.asarray(raw["items"], dtype=float),
            mode=raw.get("mode", "direct"),
            B=None if raw.get("B") is None else np.asarray(raw["B"]),
            drug_sets=None if drugs is None else [None if d is None else _as_drug_sets(d, A.shape[1]) for d in drugs],
            visits=visits,
        )
    except KeyError as e:
        raise DataError(f"dataset is missing field {e}") from e
    logger.info(f"longitudinal dataset loaded: path={path} visits={ds.n_times} items={ds.n_items}")
    return ds


def save_dataset(ds, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(ds.to_dict(), f)


def load_csv_dataset(allocation_csv: str, covariates_csv: str) -> Dataset:
    """Direct-mode dataset from an allocation CSV (blank = missing) and a covariate CSV, both row-per-item."""
    try:
        A = pd.read_csv(allocation_csv)
        X = pd.read_csv(covariates_csv)
    except (OSError, pd.errors.ParserError) as e:
        raise DataError(f"cannot read CSV input: {e}") from e
    if len(A) != len(X):
        raise DataError("allocation and covariate CSVs differ in row count", {"A": len(A), "covariates": len(X)})
    return Dataset(A_obs=A.to_numpy(dtype=float), covariates=X.to_numpy(dtype=float))


def read_covariates_csv(path: str) -> np.ndarray:
    try:
        return pd.read_csv(path, float_precision="round_trip").to_numpy(dtype=float)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read covariates {path}: {e}") from e
