"""
Run orchestration for the CLI commands.

Each entry point takes a resolved `RunConfig`, runs the relevant modules, writes
CSV/JSON artifacts into `config.output_dir` and records a manifest (resolved
config, every seed, input hashes, output paths) in the run index. Outputs other
than the manifest are byte-identical for an identical config and seed.
"""
import glob
import logging
import os
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from scipy.special import expit

from depfa.models.schemas import ChainReport, DeltaSummary, RunConfig, SimConfig
from depfa.services.consensus import (
    SubPosterior,
    build_model,
    make_shards,
    run_shards,
    wasserstein_barycenter,
)
from depfa.services.datasets import (
    Dataset,
    LongitudinalDataset,
    load_dataset,
    load_longitudinal,
    read_covariates_csv,
    save_dataset,
)
from depfa.services.diagnostics import diagnostics
from depfa.services.exceptions import ConfigError, DataError, EvaluationError, SamplerError, ValidationError
from depfa.services.graph import build_knn_graph
from depfa.services.model import posterior_condition_prob
from depfa.services.predict import PredictionQuery, predict_new_item
from depfa.services.sampler import PosteriorSamples, run_chains
from depfa.services.seeding import SHARD, derive_seed
from depfa.services.simulate import (
    confusion,
    drug_truth,
    fdr_study,
    generate_dynamic,
    generate_polypharmacy,
    generate_static,
)
from depfa.services.tracing import traceable
from depfa.services.validators import DatasetValidator, ManifestValidator, SamplesValidator
from storage.local_store import (
    ensure_dir,
    file_sha1,
    make_run_id,
    put_run,
    read_json,
    write_json,
    write_matrix,
    write_table,
)

logger = logging.getLogger(__name__)

AnyDataset = Union[Dataset, LongitudinalDataset]

DELTA_LEVEL = 0.95
IMPUTE_THRESHOLD = 0.5


@dataclass
class RunResult:
    run_id: str
    command: str
    output_dir: str
    outputs: Dict[str, str] = field(default_factory=dict)
    summary: Dict = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return {
            "run_id": self.run_id,
            "command": self.command,
            "output_dir": self.output_dir,
            "outputs": self.outputs,
            "summary": self.summary,
        }


# ---------------------------------------------------------------------------
# summaries
# ---------------------------------------------------------------------------

def delta_summary(samples: PosteriorSamples, level: float = DELTA_LEVEL) -> pd.DataFrame:
    """Condition effects centered to mean zero within each draw, with central credible intervals."""
    delta = samples.block("delta")
    centered = delta - delta.mean(axis=1, keepdims=True)
    tail = (1.0 - level) / 2.0
    lo = np.quantile(centered, tail, axis=0)
    hi = np.quantile(centered, 1.0 - tail, axis=0)
    mean = centered.mean(axis=0)
    rows = [
        DeltaSummary(condition=c, mean=mean[c], lower=lo[c], upper=hi[c]).model_dump()
        for c in range(delta.shape[1])
    ]
    return pd.DataFrame(rows)


def evidenced_conditions(dataset: Dataset) -> np.ndarray:
    """(I, C) True where some drug indicated for the condition is present."""
    B = dataset.B.astype(bool)
    out = np.zeros((dataset.n_items, dataset.n_conditions), dtype=bool)
    for i, ds in enumerate(dataset.drug_sets):
        if ds:
            out[i] = B[sorted(ds)].any(axis=0)
    return out


def imputed_conditions(probs: np.ndarray, dataset: Dataset, threshold: float = IMPUTE_THRESHOLD) -> pd.DataFrame:
    """Conditions with no indicated drug on record whose posterior probability exceeds the threshold."""
    hits = (probs > threshold) & ~evidenced_conditions(dataset)
    items, conds = np.nonzero(hits)
    return pd.DataFrame({"item": items, "condition": conds, "probability": probs[items, conds]})


def probability_table(probs: np.ndarray) -> pd.DataFrame:
    i, c = np.indices(probs.shape)
    return pd.DataFrame({"item": i.ravel(), "condition": c.ravel(), "probability": probs.ravel()})


def trajectories(samples: PosteriorSamples, times: np.ndarray) -> pd.DataFrame:
    """Posterior-mean p_itc for every item, condition and visit."""
    phi = samples.block("phi")  # (S, T+1, I)
    delta = samples.block("delta")  # (S, C)
    mean_p = expit(phi[:, :, :, None] + delta[:, None, None, :]).mean(axis=0)  # (T+1, I, C)
    t, i, c = np.indices(mean_p.shape)
    return pd.DataFrame({
        "item": i.ravel(),
        "condition": c.ravel(),
        "visit": t.ravel(),
        "time": np.asarray(times)[t.ravel()],
        "probability": mean_p.ravel(),
    }).sort_values(["item", "condition", "visit"], kind="stable").reset_index(drop=True)


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

def _check_dataset(ds: AnyDataset, config: RunConfig) -> None:
    if ds.mode != config.model.mode:
        raise ConfigError(
            f"model mode {config.model.mode!r} does not match dataset mode {ds.mode!r}",
            {"model_mode": config.model.mode, "dataset_mode": ds.mode},
        )
    ok, info = DatasetValidator.validate(ds, config.model.k)
    if not ok:
        raise DataError(f"dataset cannot be fitted: {info['reason']}", info)


def _sample(ds: AnyDataset, config: RunConfig, out_dir: str, n_jobs: Optional[int]) -> Tuple[PosteriorSamples, Dict]:
    mc = config.model
    if config.shards > 1:
        partition_seed = derive_seed(config.seed, SHARD)
        plan = make_shards(ds, config.shards, mc.k, partition_seed, mc.metric)
        subs = run_shards(plan, ds, mc, config.sampler, n_jobs=n_jobs)
        shards_dir = ensure_dir(os.path.join(out_dir, "shards"))
        for sub in subs:
            _write_shard(shards_dir, sub)
        samples = wasserstein_barycenter(subs, seed=config.seed)
        info = {
            "shards": config.shards,
            "shard_sizes": plan.sizes(),
            "partition_seed": partition_seed,
            "shards_dir": shards_dir,
            "shard_chain_seeds": {str(s.shard_id): s.samples.seeds for s in subs},
            "shard_divergences": {str(s.shard_id): s.samples.divergences for s in subs},
        }
        return samples, info
    graph = build_knn_graph(ds.covariates, mc.k, mc.metric)
    model = build_model(ds, graph, mc)
    samples = run_chains(model, model.transforms, config.sampler, n_jobs=n_jobs)
    return samples, {"shards": 1}


def _write_shard(shards_dir: str, sub: SubPosterior) -> None:
    d = ensure_dir(os.path.join(shards_dir, f"shard_{sub.shard_id}"))
    sub.samples.to_csv(os.path.join(d, "samples.csv"))
    write_json(os.path.join(d, "items.json"), {"shard_id": sub.shard_id, "items": sub.items.tolist(), "seeds": sub.samples.seeds})


def _read_shards(shards_dir: str) -> List[SubPosterior]:
    dirs = sorted(glob.glob(os.path.join(shards_dir, "shard_*")), key=lambda p: int(p.rsplit("_", 1)[-1]))
    if not dirs:
        raise DataError(f"no shard_* directories under {shards_dir}")
    subs = []
    for d in dirs:
        m = int(d.rsplit("_", 1)[-1])
        try:
            samples = PosteriorSamples.from_csv(os.path.join(d, "samples.csv"), shard_id=m)
        except (OSError, ValueError, KeyError) as e:
            raise DataError(f"cannot read shard {m} samples: {e}", {"shard_id": m}) from e
        meta_path = os.path.join(d, "items.json")
        if os.path.exists(meta_path):
            meta = read_json(meta_path)
            items = np.asarray(meta["items"], dtype=np.int64)
            samples.seeds = list(meta.get("seeds", []))
        else:
            # without an item map the shard covers items 0..n-1
            _, shape = samples.block_columns("phi")
            items = np.arange(shape[-1])
        subs.append(SubPosterior(shard_id=m, items=items, samples=samples))
    return subs


def _finish(
    command: str,
    config: RunConfig,
    out_dir: str,
    outputs: Dict[str, str],
    inputs: Dict[str, str],
    seeds: Dict,
    extra: Optional[Dict] = None,
) -> RunResult:
    run_id = make_run_id(command, config.seed)
    manifest = {
        "run_id": run_id,
        "command": command,
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "config": config.model_dump(mode="json"),
        "seeds": {"master": config.seed, **seeds},
        "inputs": {name: {"path": os.path.abspath(p), "sha1": file_sha1(p)} for name, p in inputs.items()},
        "outputs": {name: os.path.abspath(p) for name, p in outputs.items()},
        **(extra or {}),
    }
    manifest_path = write_json(os.path.join(out_dir, "manifest.json"), manifest)
    put_run(run_id, command, out_dir, manifest_path)
    outputs = {**outputs, "manifest": manifest_path}
    logger.info(f"run recorded: run_id={run_id} command={command} output_dir={out_dir}")
    return RunResult(run_id=run_id, command=command, output_dir=out_dir, outputs=outputs, summary=extra or {})


def _fit_common(command: str, ds: AnyDataset, config: RunConfig, n_jobs: Optional[int]):
    _check_dataset(ds, config)
    out_dir = ensure_dir(config.output_dir)
    samples, shard_info = _sample(ds, config, out_dir, n_jobs)
    ok, info = SamplesValidator.validate(samples)
    if not ok:
        raise SamplerError(f"fitted draws failed validation: {info['reason']}", info)
    report = diagnostics(samples)
    outputs = {
        "samples": os.path.join(out_dir, "samples.csv"),
        "diagnostics": os.path.join(out_dir, "diagnostics.csv"),
        "delta_summary": os.path.join(out_dir, "delta_summary.csv"),
    }
    samples.to_csv(outputs["samples"])
    write_table(outputs["diagnostics"], report.table)
    write_table(outputs["delta_summary"], delta_summary(samples))
    extra = {
        "diagnostics": report.summary(),
        "chain_reports": [ChainReport(**r).model_dump() for r in samples.chain_reports],
        "dataset": {"n_items": ds.n_items, "n_conditions": ds.n_conditions, "mode": ds.mode},
        "sharding": shard_info,
    }
    seeds = {"chains": samples.seeds}
    return samples, out_dir, outputs, extra, seeds


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

@traceable("fit")
def fit(config: RunConfig, n_jobs: Optional[int] = None) -> RunResult:
    """Static fit; drug mode also writes condition probabilities and the imputed-conditions table."""
    if not config.data:
        raise ConfigError("fit needs a dataset path (data)")
    ds = load_dataset(config.data)
    samples, out_dir, outputs, extra, seeds = _fit_common("fit", ds, config, n_jobs)
    if ds.mode == "drug":
        probs = posterior_condition_prob(samples, ds, config.model.epsilon)
        outputs["condition_probabilities"] = write_table(
            os.path.join(out_dir, "condition_probabilities.csv"), probability_table(probs)
        )
        outputs["imputed_conditions"] = write_table(
            os.path.join(out_dir, "imputed_conditions.csv"), imputed_conditions(probs, ds)
        )
        try:
            cm = confusion(drug_truth(ds), probs)
            outputs["confusion"] = write_table(os.path.join(out_dir, "confusion.csv"), cm.to_frame().reset_index())
            extra["confusion"] = cm.rates.tolist()
        except EvaluationError as e:
            logger.warning(f"drug-evidence scoring skipped: {e}")
    result = _finish("fit", config, out_dir, outputs, {"data": config.data}, seeds, extra)
    logger.info(f"fit done: items={ds.n_items} draws={samples.n_total} max_rhat={extra['diagnostics']['max_rhat']:.4f}")
    return result


@traceable("fit_dynamic")
def fit_dynamic(config: RunConfig, n_jobs: Optional[int] = None) -> RunResult:
    if not config.data:
        raise ConfigError("fit-dynamic needs a dataset path (data)")
    ds = load_longitudinal(config.data)
    samples, out_dir, outputs, extra, seeds = _fit_common("fit-dynamic", ds, config, n_jobs)
    outputs["trajectories"] = write_table(os.path.join(out_dir, "trajectories.csv"), trajectories(samples, ds.times))
    extra["times"] = ds.times.tolist()
    return _finish("fit-dynamic", config, out_dir, outputs, {"data": config.data}, seeds, extra)


def _load_training(manifest: Dict) -> AnyDataset:
    path = manifest["inputs"]["data"]["path"]
    if manifest["command"] == "fit-dynamic":
        return load_longitudinal(path)
    return load_dataset(path)


@traceable("predict")
def predict(config: RunConfig) -> RunResult:
    if not config.manifest or not config.covariates:
        raise ConfigError("predict needs a fit manifest and a covariates CSV")
    try:
        manifest = read_json(config.manifest)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read manifest {config.manifest}: {e}") from e
    ok, info = ManifestValidator.validate(manifest)
    if not ok:
        raise ValidationError(f"manifest failed validation: {info['reason']}", info)
    if manifest["command"] not in ("fit", "fit-dynamic"):
        raise ConfigError(f"manifest of a {manifest['command']!r} run has no fitted draws with training data")
    train = _load_training(manifest)
    samples = PosteriorSamples.from_csv(manifest["outputs"]["samples"])
    fitted = manifest["config"]["model"]
    query = PredictionQuery(
        covariates=read_covariates_csv(config.covariates),
        k=config.k_predict or fitted["k"],
        samples=samples,
        train_covariates=train.covariates,
        metric=fitted["metric"],
    )
    pred = predict_new_item(query)
    out_dir = ensure_dir(config.output_dir)
    outputs = {
        "predictions": write_table(os.path.join(out_dir, "predictions.csv"), pred.summary()),
        "neighbors": write_table(
            os.path.join(out_dir, "neighbors.csv"),
            pd.DataFrame({
                "item": np.repeat(np.arange(pred.neighbors.shape[0]), pred.neighbors.shape[1]),
                "neighbor": pred.neighbors.ravel(),
                "weight": pred.weights.ravel(),
            }),
        ),
    }
    inputs = {"manifest": config.manifest, "covariates": config.covariates}
    extra = {"fit_run_id": manifest["run_id"], "new_items": int(pred.neighbors.shape[0]), "k": query.k}
    return _finish("predict", config, out_dir, outputs, inputs, {}, extra)


def _simulation(config: RunConfig) -> SimConfig:
    # the run's master seed drives generation too
    return config.simulation.model_copy(update={"seed": config.seed})


@traceable("simulate_fdr")
def simulate_fdr(config: RunConfig, n_jobs: Optional[int] = None) -> RunResult:
    sim = _simulation(config)
    report = fdr_study(sim, config.sampler, config.model, n_jobs=n_jobs)
    out_dir = ensure_dir(config.output_dir)
    outputs = {
        "replications": write_table(os.path.join(out_dir, "replications.csv"), report.replications),
        "aggregate": write_json(os.path.join(out_dir, "aggregate.json"), report.aggregate),
        "fdr_histogram": write_table(os.path.join(out_dir, "fdr_histogram.csv"), report.histogram()),
        "lambda_pairs": write_table(os.path.join(out_dir, "lambda_pairs.csv"), report.pairs),
    }
    seeds = {"replications": report.replications["seed"].tolist()}
    return _finish("simulate-fdr", config, out_dir, outputs, {}, seeds, {"aggregate": report.aggregate})


@traceable("generate_data")
def generate_data(config: RunConfig) -> RunResult:
    sim = _simulation(config)
    out_dir = ensure_dir(config.output_dir)
    outputs = {"dataset": os.path.join(out_dir, "dataset.json")}
    if config.generator == "dynamic":
        ds, truth = generate_dynamic(sim, sim.seed)
        T1, n = truth.phi.shape
        outputs["truth_phi"] = write_table(
            os.path.join(out_dir, "truth_phi.csv"),
            pd.DataFrame({"visit": np.repeat(np.arange(T1), n), "item": np.tile(np.arange(n), T1), "phi": truth.phi.ravel()}),
        )
        truth_extra = {"rho_ou": truth.ou.rho_ou, "sigma_ou": truth.ou.sigma_ou, "times": ds.times.tolist()}
    else:
        gen = generate_polypharmacy if config.generator == "polypharmacy" else generate_static
        ds, truth = gen(sim, sim.seed)
        outputs["truth_lambda"] = write_matrix(
            os.path.join(out_dir, "truth_lambda.csv"), truth.lam, [f"c{c}" for c in range(truth.lam.shape[1])]
        )
        outputs["truth_allocations"] = write_matrix(
            os.path.join(out_dir, "truth_allocations.csv"), truth.A.astype(int), [f"c{c}" for c in range(truth.A.shape[1])]
        )
        outputs["truth_phi"] = write_matrix(os.path.join(out_dir, "truth_phi.csv"), truth.phi[:, None], ["phi"])
        truth_extra = {}
    save_dataset(ds, outputs["dataset"])
    outputs["covariates"] = write_matrix(os.path.join(out_dir, "covariates.csv"), ds.covariates, ["x", "y"])
    outputs["graph"] = os.path.join(out_dir, "graph_edges.csv")
    truth.graph.to_edge_csv(outputs["graph"])
    extra = {"generator": config.generator, "truth": {"delta": truth.delta.tolist(), **truth_extra}}
    return _finish("generate-data", config, out_dir, outputs, {}, {"generator": sim.seed}, extra)


@traceable("combine_shards")
def combine_shards(config: RunConfig) -> RunResult:
    if not config.shards_dir:
        raise ConfigError("combine-shards needs a shards directory (shards_dir)")
    subs = _read_shards(config.shards_dir)
    samples = wasserstein_barycenter(subs, seed=config.seed)
    out_dir = ensure_dir(config.output_dir)
    outputs = {"samples": os.path.join(out_dir, "samples.csv")}
    samples.to_csv(outputs["samples"])
    inputs = {f"shard_{s.shard_id}": os.path.join(config.shards_dir, f"shard_{s.shard_id}", "samples.csv") for s in subs}
    seeds = {"shard_chain_seeds": {str(s.shard_id): s.samples.seeds for s in subs}}
    extra = {"shards": len(subs), "draws": samples.n_total}
    return _finish("combine-shards", config, out_dir, outputs, inputs, seeds, extra)
