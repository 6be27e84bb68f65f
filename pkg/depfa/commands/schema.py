import argparse

from depfa.models.schemas import RunConfig


def _schema(args: argparse.Namespace):
    return RunConfig.model_json_schema()


def register(subparsers) -> None:
    p = subparsers.add_parser("schema", help="print the JSON schema of run configurations")
    p.set_defaults(handler=_schema)
