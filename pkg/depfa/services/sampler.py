"""
No-U-Turn sampler (multinomial variant) on the unconstrained space.

A target is any picklable callable z -> (log density, gradient). Each
transition samples a momentum, doubles a leapfrog trajectory in a random
direction until the generalized U-turn criterion fires or the depth cap is hit,
and draws the next state from the trajectory in proportion to exp(-H). Top-level
subtrees are merged with biased progressive sampling.

Warmup adapts the step size by dual averaging throughout, and estimates a
diagonal inverse mass from the middle half of warmup; the step size search and
dual averaging restart once the mass is set.

Chains run as joblib tasks; results are merged by chain index.
"""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from depfa.models.schemas import SamplerConfig
from depfa.services.exceptions import SamplerError
from depfa.services.seeding import chain_seeds
from depfa.services.transforms import TransformSpec
from shared.config import settings

logger = logging.getLogger(__name__)

Target = Callable[[np.ndarray], Tuple[float, np.ndarray]]

DIVERGENCE_THRESHOLD = 1000.0
DA_GAMMA = 0.05
DA_T0 = 10.0
DA_KAPPA = 0.75
MIN_MASS_WINDOW = 10

_INDEX = re.compile(r"^(?P<name>[^\[]+)(\[(?P<idx>[0-9,]+)\])?$")


# ---------------------------------------------------------------------------
# samples container
# ---------------------------------------------------------------------------

@dataclass
class PosteriorSamples:
    """Constrained draws, shape (chains, draws, params), one column per flattened parameter."""
    draws: np.ndarray
    names: List[str]
    seeds: List[int] = field(default_factory=list)
    shard_id: Optional[int] = None
    chain_ids: List[int] = field(default_factory=list)
    sample_stats: Dict[str, np.ndarray] = field(default_factory=dict)
    chain_reports: List[Dict] = field(default_factory=list)

    def __post_init__(self):
        self.draws = np.asarray(self.draws, dtype=float)
        if self.draws.ndim != 3 or self.draws.shape[2] != len(self.names):
            raise ValueError(f"draws of shape {self.draws.shape} do not match {len(self.names)} names")
        if not self.chain_ids:
            self.chain_ids = list(range(self.draws.shape[0]))

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]

    @property
    def n_draws(self) -> int:
        return self.draws.shape[1]

    @property
    def n_total(self) -> int:
        return self.n_chains * self.n_draws

    @property
    def divergences(self) -> int:
        div = self.sample_stats.get("divergent")
        return 0 if div is None else int(np.sum(div))

    def flat(self) -> np.ndarray:
        return self.draws.reshape(-1, self.draws.shape[2])

    def column_index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"no parameter column {name!r}") from None

    def column(self, name: str) -> np.ndarray:
        """All draws of one column, chains concatenated."""
        return self.flat()[:, self.column_index(name)]

    def block_columns(self, name: str) -> Tuple[List[int], Tuple[int, ...]]:
        cols, idx = [], []
        for j, col in enumerate(self.names):
            m = _INDEX.match(col)
            if m and m.group("name") == name:
                cols.append(j)
                if m.group("idx") is not None:
                    idx.append(tuple(int(t) for t in m.group("idx").split(",")))
        if not cols:
            raise KeyError(f"no parameter block {name!r}")
        shape = tuple(np.max(np.array(idx), axis=0) + 1) if idx else ()
        return cols, shape

    def has_block(self, name: str) -> bool:
        try:
            self.block_columns(name)
            return True
        except KeyError:
            return False

    def block(self, name: str) -> np.ndarray:
        """Draws of a parameter block, shape (chains * draws, *block_shape)."""
        cols, shape = self.block_columns(name)
        return self.flat()[:, cols].reshape((self.n_total,) + shape)

    def select(self, names: Sequence[str]) -> "PosteriorSamples":
        cols = [self.column_index(n) for n in names]
        return PosteriorSamples(
            draws=self.draws[:, :, cols], names=list(names), seeds=list(self.seeds), shard_id=self.shard_id,
            chain_ids=list(self.chain_ids), sample_stats=dict(self.sample_stats), chain_reports=list(self.chain_reports),
        )

    def to_frame(self) -> pd.DataFrame:
        chains = np.repeat(self.chain_ids, self.n_draws)
        draw = np.tile(np.arange(self.n_draws), self.n_chains)
        frame = pd.DataFrame(self.flat(), columns=self.names)
        frame.insert(0, "draw", draw)
        frame.insert(0, "chain", chains)
        return frame

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, **kwargs) -> "PosteriorSamples":
        names = [c for c in frame.columns if c not in ("chain", "draw")]
        chain_ids = sorted(frame["chain"].unique().tolist())
        per_chain = [frame[frame["chain"] == c].sort_values("draw")[names].to_numpy(dtype=float) for c in chain_ids]
        if len({len(p) for p in per_chain}) > 1:
            raise ValueError("chains in the sample table have unequal draw counts")
        return cls(draws=np.stack(per_chain), names=names, chain_ids=[int(c) for c in chain_ids], **kwargs)

    def to_csv(self, path: str) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.17g")

    @classmethod
    def from_csv(cls, path: str, **kwargs) -> "PosteriorSamples":
        return cls.from_frame(pd.read_csv(path, float_precision="round_trip"), **kwargs)


def merge_chains(parts: Sequence[PosteriorSamples]) -> PosteriorSamples:
    """Stack single- or multi-chain results in chain-id order."""
    if not parts:
        raise ValueError("nothing to merge")
    parts = sorted(parts, key=lambda s: s.chain_ids[0])
    stats: Dict[str, np.ndarray] = {}
    for key in parts[0].sample_stats:
        stats[key] = np.concatenate([p.sample_stats[key] for p in parts], axis=0)
    return PosteriorSamples(
        draws=np.concatenate([p.draws for p in parts], axis=0),
        names=list(parts[0].names),
        seeds=[s for p in parts for s in p.seeds],
        shard_id=parts[0].shard_id,
        chain_ids=[c for p in parts for c in p.chain_ids],
        sample_stats=stats,
        chain_reports=[r for p in parts for r in p.chain_reports],
    )


# ---------------------------------------------------------------------------
# integrator and tree
# ---------------------------------------------------------------------------

def leapfrog(
    position: np.ndarray,
    momentum: np.ndarray,
    step: float,
    grad_fn: Callable[[np.ndarray], np.ndarray],
    inv_mass: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray, bool]:
    """
    One leapfrog step for H = -log p(q) + p^T M^-1 p / 2.

    Args:
        grad_fn: gradient of the log density

    Returns:
        (position', momentum', divergent); divergent is set when a gradient is not finite
    """
    inv_mass = np.ones_like(position) if inv_mass is None else inv_mass
    g = grad_fn(position)
    p = momentum + 0.5 * step * g
    q = position + step * inv_mass * p
    g = grad_fn(q)
    p = p + 0.5 * step * g
    divergent = not (np.all(np.isfinite(q)) and np.all(np.isfinite(p)))
    return q, p, divergent


@dataclass
class _Point:
    q: np.ndarray
    p: np.ndarray
    logp: float
    grad: np.ndarray


@dataclass
class _Tree:
    left: _Point
    right: _Point
    sample: _Point
    log_w: float
    rho: np.ndarray
    turning: bool
    divergent: bool
    sum_accept: float
    n_leapfrog: int


class _Integrator:
    def __init__(self, target: Target, inv_mass: np.ndarray):
        self.target = target
        self.inv_mass = inv_mass

    def kinetic(self, p: np.ndarray) -> float:
        return 0.5 * float(np.sum(p * p * self.inv_mass))

    def step(self, pt: _Point, eps: float) -> _Point:
        p = pt.p + 0.5 * eps * pt.grad
        q = pt.q + eps * self.inv_mass * p
        logp, grad = self.target(q)
        if not np.isfinite(logp) or not np.all(np.isfinite(grad)):
            return _Point(q, p, -np.inf, np.zeros_like(q))
        p = p + 0.5 * eps * grad
        return _Point(q, p, float(logp), grad)

    def is_turning(self, left: _Point, right: _Point, rho: np.ndarray) -> bool:
        return bool(
            np.dot(rho, self.inv_mass * right.p) <= 0.0 or np.dot(rho, self.inv_mass * left.p) <= 0.0
        )

    def build(self, start: _Point, direction: int, depth: int, eps: float, h0: float, rng: np.random.Generator) -> _Tree:
        if depth == 0:
            new = self.step(start, direction * eps)
            h = -new.logp + self.kinetic(new.p)
            delta = h - h0 if np.isfinite(h) else np.inf
            return _Tree(
                left=new, right=new, sample=new, log_w=-delta, rho=new.p.copy(), turning=False,
                divergent=bool(delta > DIVERGENCE_THRESHOLD),
                sum_accept=float(np.exp(min(0.0, -delta))), n_leapfrog=1,
            )
        inner = self.build(start, direction, depth - 1, eps, h0, rng)
        if inner.turning or inner.divergent:
            return inner
        edge = inner.right if direction > 0 else inner.left
        outer = self.build(edge, direction, depth - 1, eps, h0, rng)
        sum_accept = inner.sum_accept + outer.sum_accept
        n_leapfrog = inner.n_leapfrog + outer.n_leapfrog
        if outer.turning or outer.divergent:
            return _Tree(
                inner.left, inner.right, inner.sample, inner.log_w, inner.rho,
                outer.turning, outer.divergent, sum_accept, n_leapfrog,
            )
        log_w = float(np.logaddexp(inner.log_w, outer.log_w))
        sample = outer.sample if np.log(rng.random()) < outer.log_w - log_w else inner.sample
        left, right = (inner.left, outer.right) if direction > 0 else (outer.left, inner.right)
        rho = inner.rho + outer.rho
        return _Tree(left, right, sample, log_w, rho, self.is_turning(left, right, rho), False, sum_accept, n_leapfrog)

    def transition(self, pt: _Point, eps: float, max_depth: int, rng: np.random.Generator):
        p0 = rng.standard_normal(pt.q.shape[0]) / np.sqrt(self.inv_mass)
        start = _Point(pt.q, p0, pt.logp, pt.grad)
        h0 = -pt.logp + self.kinetic(p0)
        left = right = sample = start
        log_w = 0.0
        rho = p0.copy()
        depth = 0
        divergent = False
        sum_accept = 0.0
        n_leapfrog = 0
        while depth < max_depth:
            direction = 1 if rng.random() < 0.5 else -1
            edge = right if direction > 0 else left
            sub = self.build(edge, direction, depth, eps, h0, rng)
            depth += 1
            sum_accept += sub.sum_accept
            n_leapfrog += sub.n_leapfrog
            if sub.divergent:
                divergent = True
                break
            if sub.turning:
                break
            # biased progressive sampling favors the new subtree
            if np.log(rng.random()) < sub.log_w - log_w:
                sample = sub.sample
            log_w = float(np.logaddexp(log_w, sub.log_w))
            if direction > 0:
                right = sub.right
            else:
                left = sub.left
            rho = rho + sub.rho
            if self.is_turning(left, right, rho):
                break
        accept = sum_accept / max(n_leapfrog, 1)
        energy = -sample.logp + self.kinetic(sample.p)
        return sample, accept, divergent, depth, n_leapfrog, energy


# ---------------------------------------------------------------------------
# adaptation
# ---------------------------------------------------------------------------

class DualAveraging:
    """Step-size adaptation toward a target acceptance statistic."""

    def __init__(self, step_size: float, target_accept: float):
        self.target = target_accept
        self.restart(step_size)

    def restart(self, step_size: float) -> None:
        self.mu = float(np.log(10.0 * step_size))
        self.log_step = float(np.log(step_size))
        self.log_step_bar = 0.0
        self.h_bar = 0.0
        self.t = 0

    def update(self, accept: float) -> float:
        self.t += 1
        eta = 1.0 / (self.t + DA_T0)
        self.h_bar = (1.0 - eta) * self.h_bar + eta * (self.target - accept)
        self.log_step = self.mu - np.sqrt(self.t) / DA_GAMMA * self.h_bar
        w = self.t ** (-DA_KAPPA)
        self.log_step_bar = w * self.log_step + (1.0 - w) * self.log_step_bar
        return float(np.exp(self.log_step))

    @property
    def final_step(self) -> float:
        return float(np.exp(self.log_step_bar))


def _find_reasonable_step(integ: _Integrator, pt: _Point, rng: np.random.Generator, eps: float = 1.0) -> float:
    """Double or halve eps until a single leapfrog step's acceptance crosses 1/2."""
    def log_accept(e):
        p0 = rng.standard_normal(pt.q.shape[0]) / np.sqrt(integ.inv_mass)
        new = integ.step(_Point(pt.q, p0, pt.logp, pt.grad), e)
        h0 = -pt.logp + integ.kinetic(p0)
        h1 = -new.logp + integ.kinetic(new.p)
        return h0 - h1 if np.isfinite(h1) else -np.inf

    la = log_accept(eps)
    a = 1.0 if la > np.log(0.5) else -1.0
    for _ in range(100):
        if not a * (la + np.log(2.0)) > 0.0:
            break
        eps *= 2.0**a
        la = log_accept(eps)
    return float(eps)


@dataclass
class ChainState:
    position: np.ndarray
    step_size: float
    inv_mass: np.ndarray
    iteration: int = 0


def _initial_point(target: Target, dim: int, rng: np.random.Generator) -> _Point:
    for _ in range(100):
        q = rng.uniform(-1.0, 1.0, size=dim)
        logp, grad = target(q)
        if np.isfinite(logp) and np.all(np.isfinite(grad)):
            return _Point(q, np.zeros(dim), float(logp), np.asarray(grad, dtype=float))
    raise SamplerError("no finite starting point found in 100 uniform(-1, 1) attempts")


def run_chain(
    target: Target,
    transforms: TransformSpec,
    config: SamplerConfig,
    seed: int,
    chain_id: int = 0,
    shard_id: Optional[int] = None,
) -> PosteriorSamples:
    """Warm up and sample one chain; draws are returned on the constrained space."""
    rng = np.random.default_rng(seed)
    dim = transforms.size
    pt = _initial_point(target, dim, rng)
    integ = _Integrator(target, np.ones(dim))
    state = ChainState(position=pt.q, step_size=_find_reasonable_step(integ, pt, rng), inv_mass=integ.inv_mass)
    da = DualAveraging(state.step_size, config.target_accept)

    window = (config.warmup // 4, config.warmup - config.warmup // 4)
    collected: List[np.ndarray] = []
    warmup_div = 0
    for it in range(config.warmup):
        pt, accept, div, _, _, _ = integ.transition(pt, state.step_size, config.max_tree_depth, rng)
        warmup_div += int(div)
        state.step_size = da.update(accept)
        if window[0] <= it < window[1]:
            collected.append(pt.q)
        if it == window[1] - 1 and len(collected) >= MIN_MASS_WINDOW:
            n = len(collected)
            var = np.var(np.array(collected), axis=0, ddof=1)
            # shrink toward unit scale for short windows
            integ.inv_mass = (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            state.inv_mass = integ.inv_mass
            state.step_size = _find_reasonable_step(integ, pt, rng, state.step_size)
            da.restart(state.step_size)
        state.iteration = it + 1
    if config.warmup and warmup_div == config.warmup:
        raise SamplerError(
            "every warmup transition diverged",
            {"chain": chain_id, "shard_id": shard_id, "warmup": config.warmup, "step_size": state.step_size},
        )
    state.step_size = da.final_step if config.warmup else state.step_size
    logger.info(
        f"sampler warmup done: chain={chain_id} shard={shard_id} step_size={state.step_size:.4g} divergences={warmup_div}"
    )

    z = np.empty((config.draws, dim))
    stats = {k: np.empty(config.draws) for k in ("accept", "tree_depth", "n_leapfrog", "energy", "lp")}
    stats["divergent"] = np.zeros(config.draws, dtype=bool)
    for s in range(config.draws):
        pt, accept, div, depth, nl, energy = integ.transition(pt, state.step_size, config.max_tree_depth, rng)
        z[s] = pt.q
        stats["accept"][s] = accept
        stats["divergent"][s] = div
        stats["tree_depth"][s] = depth
        stats["n_leapfrog"][s] = nl
        stats["energy"][s] = energy
        stats["lp"][s] = pt.logp
    report = {
        "chain": chain_id,
        "seed": int(seed),
        "step_size": float(state.step_size),
        "divergences": int(stats["divergent"].sum()),
        "warmup_divergences": warmup_div,
        "mean_accept": float(stats["accept"].mean()) if config.draws else float("nan"),
        "mean_tree_depth": float(stats["tree_depth"].mean()) if config.draws else float("nan"),
    }
    logger.info(
        f"sampler chain done: chain={chain_id} shard={shard_id} draws={config.draws} "
        f"divergences={report['divergences']} mean_accept={report['mean_accept']:.3f}"
    )
    return PosteriorSamples(
        draws=transforms.constrain(z)[None],
        names=transforms.column_names(),
        seeds=[int(seed)],
        shard_id=shard_id,
        chain_ids=[chain_id],
        sample_stats={k: v[None] for k, v in stats.items()},
        chain_reports=[report],
    )


def pool_size(n_jobs: Optional[int], n_tasks: int) -> int:
    """joblib worker count; None reads DEPFA_WORKERS, 0 runs serially, negative values keep joblib's meaning."""
    jobs = settings.n_workers if n_jobs is None else n_jobs
    if jobs < 0:
        return jobs
    return max(1, min(jobs, n_tasks))


def run_chains(
    target: Target,
    transforms: TransformSpec,
    config: SamplerConfig,
    seeds: Optional[Sequence[int]] = None,
    shard_id: Optional[int] = None,
    n_jobs: Optional[int] = None,
) -> PosteriorSamples:
    """`config.chains` independent chains over one target, seeded from `config.seed`."""
    seeds = list(seeds) if seeds is not None else chain_seeds(config.seed, config.chains)
    parts = Parallel(n_jobs=pool_size(n_jobs, len(seeds)))(
        delayed(run_chain)(target, transforms, config, seed, c, shard_id) for c, seed in enumerate(seeds)
    )
    return merge_chains(parts)
