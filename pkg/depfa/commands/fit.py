import argparse

from depfa.commands.common import add_model_args, add_run_args, add_sampler_args, resolve_config
from depfa.services.orchestrator import combine_shards, fit, fit_dynamic


def _fit(args: argparse.Namespace):
    return fit(resolve_config("fit", args), n_jobs=args.workers).to_dict()


def _fit_dynamic(args: argparse.Namespace):
    return fit_dynamic(resolve_config("fit-dynamic", args), n_jobs=args.workers).to_dict()


def _combine(args: argparse.Namespace):
    return combine_shards(resolve_config("combine-shards", args)).to_dict()


def register(subparsers) -> None:
    p = subparsers.add_parser("fit", help="fit the static model (optionally sharded)")
    add_run_args(p)
    add_model_args(p)
    add_sampler_args(p)
    p.set_defaults(handler=_fit)

    p = subparsers.add_parser("fit-dynamic", help="fit the dynamic model on a longitudinal dataset")
    add_run_args(p)
    add_model_args(p)
    add_sampler_args(p)
    p.set_defaults(handler=_fit_dynamic)

    p = subparsers.add_parser("combine-shards", help="merge shard draws by the Wasserstein barycenter")
    add_run_args(p)
    p.add_argument("--shards-dir", dest="shards_dir", help="directory holding shard_<m>/samples.csv")
    p.set_defaults(handler=_combine)
