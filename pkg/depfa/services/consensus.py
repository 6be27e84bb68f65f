"""
Sharded inference: partition items, fit each shard independently, and merge
shared parameters by the coordinatewise Wasserstein-2 barycenter.

Every shard keeps the full prior. The barycenter of one-dimensional empirical
measures with equal counts averages their order statistics; merged values are
laid out in the rank order of the first shard's draws, so a single shard passes
through unchanged. Item effects are shard-local and pass through under their
global item indices.
"""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import List, Optional, Sequence, Union

import numpy as np
from joblib import Parallel, delayed

from depfa.models.schemas import ModelConfig, SamplerConfig
from depfa.services.datasets import Dataset, LongitudinalDataset
from depfa.services.dynamics import DynamicModel
from depfa.services.exceptions import ConfigError, DepfaError, SamplerError, ShardError
from depfa.services.graph import ItemGraph, build_knn_graph
from depfa.services.model import StaticModel
from depfa.services.sampler import PosteriorSamples, merge_chains, pool_size, run_chain
from depfa.services.seeding import chain_seeds, shard_seeds
from depfa.services.tracing import traceable

logger = logging.getLogger(__name__)

AnyDataset = Union[Dataset, LongitudinalDataset]

LOCAL_BLOCK = "phi"
_PHI = re.compile(r"^phi\[(?:(?P<t>\d+),)?(?P<i>\d+)\]$")


@dataclass(frozen=True)
class ShardPlan:
    n_shards: int
    items: List[np.ndarray]
    graphs: List[ItemGraph]
    k: int
    seed: int

    def sizes(self) -> List[int]:
        return [len(ix) for ix in self.items]


@dataclass
class SubPosterior:
    shard_id: int
    items: np.ndarray
    samples: PosteriorSamples


def make_shards(dataset: AnyDataset, n_shards: int, k: int, seed: int, metric: str = "euclidean") -> ShardPlan:
    """Random balanced partition of the items; a k-NN graph is rebuilt inside every shard."""
    n = dataset.n_items
    if n_shards < 1:
        raise ConfigError(f"shard count must be positive, got {n_shards}")
    if n < n_shards * (k + 1):
        raise ConfigError(
            f"cannot split {n} items into {n_shards} shards of at least k+1={k + 1}",
            {"n_items": n, "shards": n_shards, "k": k},
        )
    perm = np.random.default_rng(seed).permutation(n)
    items = [np.sort(part) for part in np.array_split(perm, n_shards)]
    graphs = [build_knn_graph(dataset.covariates[ix], k, metric) for ix in items]
    logger.info(f"shard plan: items={n} shards={n_shards} sizes={[len(ix) for ix in items]} seed={seed}")
    return ShardPlan(n_shards=n_shards, items=items, graphs=graphs, k=k, seed=seed)


def build_model(dataset: AnyDataset, graph: ItemGraph, model_config: ModelConfig):
    if isinstance(dataset, LongitudinalDataset):
        return DynamicModel(
            dataset, graph, epsilon=model_config.epsilon, delta_prior=model_config.delta_prior,
            logdet_backend=model_config.logdet_backend,
        )
    return StaticModel(
        dataset, graph, epsilon=model_config.epsilon, delta_prior=model_config.delta_prior,
        logdet_backend=model_config.logdet_backend,
    )


def _shard_chain(shard_id: int, chain_id: int, target, config: SamplerConfig, seed: int) -> PosteriorSamples:
    try:
        return run_chain(target, target.transforms, config, seed, chain_id=chain_id, shard_id=shard_id)
    except DepfaError as e:
        raise ShardError(shard_id, str(e), {"chain": chain_id, **e.details}) from e
    except Exception as e:
        raise ShardError(shard_id, f"{type(e).__name__}: {e}", {"chain": chain_id}) from e


@traceable("run_shards")
def run_shards(
    plan: ShardPlan,
    dataset: AnyDataset,
    model_config: ModelConfig,
    sampler_config: SamplerConfig,
    n_jobs: Optional[int] = None,
) -> List[SubPosterior]:
    """Fit every shard independently; chains of all shards share one worker pool."""
    masters = shard_seeds(sampler_config.seed, plan.n_shards)
    targets = [build_model(dataset.subset(ix), g, model_config) for ix, g in zip(plan.items, plan.graphs)]
    tasks = [
        (m, c, seed)
        for m in range(plan.n_shards)
        for c, seed in enumerate(chain_seeds(masters[m], sampler_config.chains))
    ]
    results = Parallel(n_jobs=pool_size(n_jobs, len(tasks)))(
        delayed(_shard_chain)(m, c, targets[m], sampler_config, seed) for m, c, seed in tasks
    )
    subs = []
    for m in range(plan.n_shards):
        parts = [r for (sm, _, _), r in zip(tasks, results) if sm == m]
        subs.append(SubPosterior(shard_id=m, items=plan.items[m], samples=merge_chains(parts)))
    logger.info(f"shards fitted: shards={plan.n_shards} chains_per_shard={sampler_config.chains}")
    return subs


def shared_names(names: Sequence[str]) -> List[str]:
    return [n for n in names if not n.startswith(LOCAL_BLOCK + "[")]


def _globalize(name: str, items: np.ndarray) -> str:
    m = _PHI.match(name)
    if m is None:
        raise ValueError(f"not an item-effect column: {name}")
    g = int(items[int(m.group("i"))])
    return f"phi[{g}]" if m.group("t") is None else f"phi[{m.group('t')},{g}]"


def _phi_sort_key(name: str):
    m = _PHI.match(name)
    return (int(m.group("t") or 0), int(m.group("i")))


def wasserstein_barycenter(
    subs: Sequence[SubPosterior],
    shared: Optional[Sequence[str]] = None,
    seed: int = 0,
) -> PosteriorSamples:
    """
    Merge sub-posteriors.

    Args:
        subs: shard results, the first one fixes the output's draw order
        shared: columns to merge; defaults to everything except item effects
        seed: master seed for subsampling to the smallest draw count

    Returns:
        PosteriorSamples in the first shard's column order, item effects at global indices
    """
    if not subs or any(s.samples.n_total == 0 for s in subs):
        raise SamplerError("no draws to combine")
    ref = subs[0].samples
    shared = shared_names(ref.names) if shared is None else list(shared)
    counts = [s.samples.n_total for s in subs]
    n_keep = min(counts)
    rng = np.random.default_rng(seed)
    rows = []
    for s, count in zip(subs, counts):
        if count > n_keep:
            rows.append(np.sort(rng.choice(count, size=n_keep, replace=False)))
        else:
            rows.append(np.arange(count))
    if any(c > n_keep for c in counts):
        logger.info(f"barycenter subsampling: counts={counts} kept={n_keep}")

    stacks = [s.samples.flat()[r][:, [s.samples.column_index(n) for n in shared]] for s, r in zip(subs, rows)]
    sorted_ref = np.sort(stacks[0], axis=0)
    offset = np.mean([np.sort(x, axis=0) - sorted_ref for x in stacks], axis=0)
    merged_sorted = sorted_ref + offset
    merged = np.empty_like(merged_sorted)
    order = np.argsort(stacks[0], axis=0, kind="stable")
    np.put_along_axis(merged, order, merged_sorted, axis=0)

    values = {name: merged[:, j] for j, name in enumerate(shared)}
    local = []
    for s, r in zip(subs, rows):
        flat = s.samples.flat()[r]
        for j, name in enumerate(s.samples.names):
            if _PHI.match(name):
                local.append((_globalize(name, s.items), flat[:, j]))
    local.sort(key=lambda item: _phi_sort_key(item[0]))
    values.update(local)

    # item effects take the place of the reference shard's item-effect block
    names: List[str] = []
    placed = False
    for name in ref.names:
        if _PHI.match(name):
            if not placed:
                names += [n for n, _ in local]
                placed = True
        elif name in values:
            names.append(name)
    table = np.column_stack([values[n] for n in names])

    # keep the reference chain layout when nothing was subsampled
    if n_keep == ref.n_total:
        draws = table.reshape(ref.n_chains, ref.n_draws, -1)
        chain_ids = list(ref.chain_ids)
    else:
        draws = table[None]
        chain_ids = [0]
    logger.info(f"barycenter merged: shards={len(subs)} shared={len(shared)} local={len(local)} draws={n_keep}")
    single = len(subs) == 1
    return PosteriorSamples(
        draws=draws,
        names=names,
        seeds=[s for sub in subs for s in sub.samples.seeds],
        chain_ids=chain_ids,
        sample_stats=dict(ref.sample_stats) if single else {},
        chain_reports=list(ref.chain_reports) if single else [],
    )
