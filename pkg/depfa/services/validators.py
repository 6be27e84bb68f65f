"""
Validation checks run by the orchestrator before and after fitting.

Each validator returns `(ok, details)` and never raises; callers decide which
exception a failure becomes.
"""
from __future__ import annotations

from typing import Dict, Tuple

import numpy as np

from depfa.services.datasets import Dataset, LongitudinalDataset

MANIFEST_KEYS = ("run_id", "command", "config", "seeds", "inputs", "outputs")


class DatasetValidator:
    """
    Checks that a dataset can support a fit with a k-NN graph of size k.

    The dataset constructors already enforce shape and value invariants; this
    covers what depends on the run configuration.
    """

    @staticmethod
    def validate(dataset, k: int) -> Tuple[bool, Dict]:
        """
        Args:
            dataset: Dataset or LongitudinalDataset
            k: neighbor count of the graph to be built

        Returns:
            (is_valid, details); details carries a `reason` on failure
        """
        if dataset.n_items < k + 1:
            return False, {"reason": "too_few_items", "n_items": dataset.n_items, "k": k}
        if not np.all(np.isfinite(dataset.covariates)):
            return False, {"reason": "non_finite_covariates"}
        snapshots = dataset.snapshots if isinstance(dataset, LongitudinalDataset) else [dataset]
        if all(_uninformative(s) for s in snapshots):
            return False, {"reason": "no_observations"}
        return True, {}


def _uninformative(ds: Dataset) -> bool:
    if ds.mode == "drug":
        return all(d is None for d in ds.drug_sets)
    return not ds.observed_mask().any()


class SamplesValidator:
    """Fitted draws must be finite and carry the item and condition blocks."""

    @staticmethod
    def validate(samples) -> Tuple[bool, Dict]:
        if samples.n_total == 0:
            return False, {"reason": "no_draws"}
        for block in ("phi", "delta"):
            if not samples.has_block(block):
                return False, {"reason": "missing_block", "block": block}
        if len(set(samples.names)) != len(samples.names):
            return False, {"reason": "duplicate_columns"}
        bad = np.flatnonzero(~np.all(np.isfinite(samples.flat()), axis=0))
        if bad.size:
            return False, {"reason": "non_finite_draws", "columns": [samples.names[j] for j in bad[:10]]}
        return True, {}


class ManifestValidator:
    @staticmethod
    def validate(manifest: Dict) -> Tuple[bool, Dict]:
        missing = [k for k in MANIFEST_KEYS if k not in manifest]
        if missing:
            return False, {"reason": "missing_keys", "keys": missing}
        if "samples" not in manifest["outputs"]:
            return False, {"reason": "no_samples_output"}
        return True, {}
