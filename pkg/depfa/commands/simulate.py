import argparse

from depfa.commands.common import (
    add_run_args,
    add_sampler_args,
    add_simulation_args,
    resolve_config,
)
from depfa.services.orchestrator import generate_data, simulate_fdr


def _simulate_fdr(args: argparse.Namespace):
    return simulate_fdr(resolve_config("simulate-fdr", args), n_jobs=args.workers).to_dict()


def _generate(args: argparse.Namespace):
    return generate_data(resolve_config("generate-data", args)).to_dict()


def register(subparsers) -> None:
    p = subparsers.add_parser("simulate-fdr", help="masking study: model FDR against the oracle FDR")
    add_run_args(p)
    add_sampler_args(p)
    add_simulation_args(p)
    p.add_argument("--replications", type=int)
    p.add_argument("--mask-fraction", dest="mask_fraction", type=float)
    p.add_argument("--delta-prior", dest="delta_prior", choices=["lowrank", "diagonal"])
    p.set_defaults(handler=_simulate_fdr)

    p = subparsers.add_parser("generate-data", help="write a synthetic dataset and its ground truth")
    add_run_args(p)
    add_simulation_args(p)
    p.add_argument("--generator", choices=["static", "polypharmacy", "dynamic"])
    p.set_defaults(handler=_generate)
