"""
Config resolution shared by every command: JSON file first, then flags.
"""
import argparse
import json
from typing import Any, Dict, Optional

from pydantic import ValidationError as PydanticValidationError

from depfa.models.schemas import RunConfig
from depfa.services.exceptions import ConfigError

# flag dest -> path inside the RunConfig tree
FLAG_PATHS = {
    "data": ("data",),
    "output_dir": ("output_dir",),
    "seed": ("seed",),
    "shards": ("shards",),
    "mode": ("model", "mode"),
    "delta_prior": ("model", "delta_prior"),
    "epsilon": ("model", "epsilon"),
    "k": ("model", "k"),
    "metric": ("model", "metric"),
    "chains": ("sampler", "chains"),
    "warmup": ("sampler", "warmup"),
    "draws": ("sampler", "draws"),
    "target_accept": ("sampler", "target_accept"),
    "max_tree_depth": ("sampler", "max_tree_depth"),
    "manifest": ("manifest",),
    "covariates": ("covariates",),
    "k_predict": ("k_predict",),
    "shards_dir": ("shards_dir",),
    "generator": ("generator",),
    "replications": ("simulation", "replications"),
    "n_items": ("simulation", "n_items"),
    "n_conditions": ("simulation", "n_conditions"),
    "mask_fraction": ("simulation", "mask_fraction"),
    "n_visits": ("simulation", "n_visits"),
    "rho_ou": ("simulation", "rho_ou"),
    "sigma_ou": ("simulation", "sigma_ou"),
    "sim_epsilon": ("simulation", "epsilon"),
}


def add_run_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON run configuration; flags override its values")
    parser.add_argument("--output-dir", dest="output_dir")
    parser.add_argument("--seed", type=int, help="master seed")
    parser.add_argument("--workers", type=int, help="worker-pool size (default: DEPFA_WORKERS)")


def add_model_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--data", help="dataset JSON")
    parser.add_argument("--mode", choices=["direct", "drug"])
    parser.add_argument("--delta-prior", dest="delta_prior", choices=["lowrank", "diagonal"])
    parser.add_argument("--epsilon", type=float)
    parser.add_argument("--k", type=int)
    parser.add_argument("--metric")
    parser.add_argument("--shards", type=int)


def add_sampler_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--chains", type=int)
    parser.add_argument("--warmup", type=int)
    parser.add_argument("--draws", type=int)
    parser.add_argument("--target-accept", dest="target_accept", type=float)
    parser.add_argument("--max-tree-depth", dest="max_tree_depth", type=int)


def add_simulation_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--n-items", dest="n_items", type=int)
    parser.add_argument("--n-conditions", dest="n_conditions", type=int)
    parser.add_argument("--n-visits", dest="n_visits", type=int)
    parser.add_argument("--rho-ou", dest="rho_ou", type=float)
    parser.add_argument("--sigma-ou", dest="sigma_ou", type=float)
    parser.add_argument("--sim-epsilon", dest="sim_epsilon", type=float, help="drug noise used by the generator")


def _load_config_file(path: Optional[str]) -> Dict[str, Any]:
    if not path:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a JSON object")
    return raw


def _set_path(tree: Dict[str, Any], path, value) -> None:
    node = tree
    for key in path[:-1]:
        node = node.setdefault(key, {})
    node[path[-1]] = value


def resolve_config(command: str, args: argparse.Namespace) -> RunConfig:
    """Merge file values and flags into a validated RunConfig; unknown keys are rejected by name."""
    tree = _load_config_file(getattr(args, "config", None))
    tree["command"] = command
    for dest, path in FLAG_PATHS.items():
        value = getattr(args, dest, None)
        if value is not None:
            _set_path(tree, path, value)
    try:
        return RunConfig.model_validate(tree)
    except PydanticValidationError as e:
        errors = [{"loc": ".".join(str(p) for p in err["loc"]), "msg": err["msg"]} for err in e.errors()]
        first = errors[0]
        raise ConfigError(f"invalid config: {first['loc']}: {first['msg']}", {"errors": errors}) from e
