import argparse

from depfa.commands.common import add_run_args, resolve_config
from depfa.services.orchestrator import predict


def _predict(args: argparse.Namespace):
    return predict(resolve_config("predict", args)).to_dict()


def register(subparsers) -> None:
    p = subparsers.add_parser("predict", help="predict condition probabilities for new items")
    add_run_args(p)
    p.add_argument("--manifest", help="manifest.json of a fit or fit-dynamic run")
    p.add_argument("--covariates", help="CSV of new-item covariates, one row per item")
    p.add_argument("--k-predict", dest="k_predict", type=int, help="neighbor count (default: the fit's k)")
    p.set_defaults(handler=_predict)
