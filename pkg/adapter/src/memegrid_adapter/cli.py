"""Command-line entry points: train a model directory, or serve one."""
from __future__ import annotations

import argparse
import json
import sys

from .config import AdapterError, load_config
from .model import train
from .serving import serve


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adapter",
        description="Train a prediction model from an exported corpus, or serve one "
        "over the newline-delimited JSON protocol.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    train_p = sub.add_parser("train", help="train a model directory from a config file")
    train_p.add_argument("--config", required=True, help="path to a JSON training config")

    serve_p = sub.add_parser("serve", help="answer protocol requests on stdin until EOF")
    serve_p.add_argument("--model", required=True, help="model directory written by train")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "train":
            _, summary = train(load_config(args.config))
            print(json.dumps(summary, sort_keys=True))
            return 0
        return serve(args.model)
    except AdapterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())
