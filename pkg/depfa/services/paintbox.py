"""
Feature-frequency paintboxes and the unit-square embedding of a logit surface.

A paintbox assigns every feature c a set C_c in [0, 1): an item drawing
u ~ U[0, 1) has feature c iff u lies in C_c. The feature-frequency paintbox is
built by recursive slicing: the atoms of the partition generated by
C_1..C_{c-1} are intervals, and C_c takes the leading p_c fraction of each
atom. Memberships are then independent Bernoulli(p_c).

Interval endpoints are computed in exact rational arithmetic and exported as
floats. Intervals are half-open [a, b).
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

Interval = Tuple[float, float]


@dataclass(frozen=True)
class Paintbox:
    frequencies: np.ndarray
    feature_sets: Tuple[Tuple[Interval, ...], ...]

    @property
    def n_features(self) -> int:
        return len(self.feature_sets)

    def measure(self, feature: int) -> float:
        return interval_measure(self.feature_sets[feature])

    def intersection_measure(self, features: Iterable[int]) -> float:
        """Lebesgue measure of the intersection of C_c over the given features."""
        sets = [self.feature_sets[c] for c in features]
        if not sets:
            return 1.0
        current: Sequence[Interval] = sets[0]
        for other in sets[1:]:
            current = intersect_intervals(current, other)
        return interval_measure(current)

    def to_dict(self) -> Dict:
        return {
            "frequencies": [float(p) for p in self.frequencies],
            "features": [
                {"feature": c, "intervals": [[a, b] for a, b in ivs]}
                for c, ivs in enumerate(self.feature_sets)
            ],
        }

    def to_json(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)


def interval_measure(intervals: Sequence[Interval]) -> float:
    return float(sum(b - a for a, b in intervals))


def intersect_intervals(a: Sequence[Interval], b: Sequence[Interval]) -> List[Interval]:
    """Intersection of two sorted lists of disjoint half-open intervals."""
    out: List[Interval] = []
    i = j = 0
    while i < len(a) and j < len(b):
        lo = max(a[i][0], b[j][0])
        hi = min(a[i][1], b[j][1])
        if lo < hi:
            out.append((lo, hi))
        if a[i][1] < b[j][1]:
            i += 1
        else:
            j += 1
    return out


def build_paintbox(p: Sequence[float]) -> Paintbox:
    freqs = np.asarray(p, dtype=float)
    if freqs.ndim != 1 or freqs.size == 0:
        raise ValueError("frequencies must be a non-empty vector")
    if np.any(~np.isfinite(freqs)) or np.any(freqs <= 0) or np.any(freqs >= 1):
        raise ValueError(f"all frequencies must lie in (0, 1), got {freqs.tolist()}")

    # atoms in canonical order; "inside C_c" precedes "outside" within each parent atom
    atoms: List[Tuple[Fraction, Fraction]] = [(Fraction(0), Fraction(1))]
    feature_sets = []
    for pc in freqs:
        frac = Fraction(float(pc))
        leading, refined = [], []
        for lo, hi in atoms:
            cut = lo + frac * (hi - lo)
            leading.append((lo, cut))
            refined.extend([(lo, cut), (cut, hi)])
        feature_sets.append(tuple((float(a), float(b)) for a, b in leading))
        atoms = refined
    return Paintbox(frequencies=freqs, feature_sets=tuple(feature_sets))


def allocate(pb: Paintbox, u: Sequence[float]) -> np.ndarray:
    """A[i, c] = 1 iff u_i lies in C_c."""
    u = np.asarray(u, dtype=float)
    if np.any(u < 0) or np.any(u >= 1):
        raise ValueError("uniform draws must lie in [0, 1)")
    A = np.zeros((u.shape[0], pb.n_features), dtype=np.int8)
    for c, ivs in enumerate(pb.feature_sets):
        starts = np.array([a for a, _ in ivs])
        ends = np.array([b for _, b in ivs])
        pos = np.searchsorted(starts, u, side="right") - 1
        inside = (pos >= 0) & (u < ends[np.clip(pos, 0, None)])
        A[:, c] = inside
    return A


def sample_allocation(pb: Paintbox, n_items: int, rng: np.random.Generator) -> np.ndarray:
    return allocate(pb, rng.random(n_items))


def item_paintbox(logits: Sequence[float]) -> Paintbox:
    """Paintbox of one item from its row of the logit surface, p_c = logit^-1(Lambda_ic)."""
    return build_paintbox(expit(np.asarray(logits, dtype=float)))


@dataclass(frozen=True)
class EmbeddedSurface:
    """Piecewise-constant field on [0,1)^2: x strips index items, y strips index features."""
    values: np.ndarray
    item_order: np.ndarray

    @property
    def n_items(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]

    def cell(self, x: float, y: float) -> Tuple[int, int]:
        """(item, feature) whose pixel contains (x, y)."""
        if not (0.0 <= x < 1.0 and 0.0 <= y < 1.0):
            raise ValueError(f"query point ({x}, {y}) lies outside [0, 1)^2")
        strip = min(int(np.floor(x * self.n_items)), self.n_items - 1)
        feature = min(int(np.floor(y * self.n_features)), self.n_features - 1)
        return int(self.item_order[strip]), feature

    def query(self, x: float, y: float) -> float:
        i, c = self.cell(x, y)
        return float(self.values[i, c])


def embed_surface(values: np.ndarray, item_order: Optional[Sequence[int]] = None) -> EmbeddedSurface:
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 2 or arr.size == 0:
        raise ValueError("surface must be a non-empty 2-D matrix")
    if not np.all(np.isfinite(arr)):
        raise ValueError("surface entries must be finite")
    order = np.arange(arr.shape[0]) if item_order is None else np.asarray(item_order, dtype=np.int64)
    if sorted(order.tolist()) != list(range(arr.shape[0])):
        raise ValueError("item_order must be a permutation of the item indices")
    return EmbeddedSurface(values=arr, item_order=order)
