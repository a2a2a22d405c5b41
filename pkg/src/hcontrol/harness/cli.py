"""``hctl <task> --config <path> [--out <dir>] [--seed <u64>] [--threads <n>]``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from hcontrol.flowmodel import TrainingDiverged
from hcontrol.harness import config as cfgmod
from hcontrol.harness.tasks import TASK_FUNCS

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hctl", description="h-control experiment harness")
    p.add_argument("task", choices=cfgmod.TASKS)
    p.add_argument("--config", required=True, help="JSON config file")
    p.add_argument("--out", help="output directory (default: config out_dir)")
    p.add_argument("--seed", type=int, help="master seed override (u64)")
    p.add_argument("--threads", type=int, help="worker threads (HCTL_THREADS also honoured)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _threads(arg):
    if arg is not None:
        return arg
    env = os.environ.get("HCTL_THREADS")
    if env is None:
        return None
    try:
        return int(env)
    except ValueError:
        raise cfgmod.ConfigError(f"HCTL_THREADS must be an integer, got {env!r}") from None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        doc = cfgmod.load(args.config)
    except OSError as exc:
        print(f"hctl: cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO
    except cfgmod.ConfigError as exc:
        print(f"hctl: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if not isinstance(doc, dict):
            raise cfgmod.ConfigError("config must be a JSON object")
        doc = dict(doc)
        if doc.get("task", args.task) != args.task:
            raise cfgmod.ConfigError(f"config task {doc['task']!r} does not match command {args.task!r}")
        doc["task"] = args.task
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise cfgmod.ConfigError("--seed must be an unsigned 64-bit integer")
            doc["seed"] = args.seed
        threads = _threads(args.threads)
        if threads is not None:
            if threads < 1:
                raise cfgmod.ConfigError("thread count must be >= 1")
            doc["threads"] = threads
        if args.out is not None:
            doc["out_dir"] = args.out
        cfg = cfgmod.resolve(doc)
    except cfgmod.ConfigError as exc:
        print(f"hctl: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out = Path(cfg["out_dir"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"hctl: cannot create output directory: {exc}", file=sys.stderr)
        return EXIT_IO
    if not Path(cfg["model"]["weights"]).is_absolute():
        # Relative weights resolve against the config file first.
        candidate = Path(args.config).resolve().parent / cfg["model"]["weights"]
        if candidate.exists():
            cfg["model"]["weights"] = str(candidate)

    try:
        record = TASK_FUNCS[args.task](cfg, out)
    except cfgmod.ConfigError as exc:
        print(f"hctl: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDiverged, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"hctl: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"hctl: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"hctl: invalid setting: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(json.dumps({"task": args.task, "out": str(out), "artifacts": len(record["artifacts"])}))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
