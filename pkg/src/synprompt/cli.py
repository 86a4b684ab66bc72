"""Command line entry point: ``synprompt {pretrain,run,sweep,eval,report}``.

Exit status is 0 on success. On failure a single JSON line
``{"error": <kind>, "message": ..., ...}`` goes to stderr and the exit status
is nonzero (2 for bad configuration or arguments, 1 for anything else).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig
from . import experiment

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2


class UsageError(Exception):
    pass


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    if getattr(args, "out", None):
        cfg = cfg.replace(out_dir=args.out)
    return cfg.validate()


def _split_values(raw):
    if raw is None:
        return None
    return [v for v in raw.replace(",", " ").split() if v]


def cmd_pretrain(args) -> dict:
    cfg = _load_config(args)
    root = Path(args.out) if args.out else None
    art = experiment.prepare(cfg, root)
    return {"backbone": str(art.backbone_path), "checksum": art.backbone_checksum,
            "data_checksums": art.data_checksums, "notes": art.notes}


def cmd_run(args) -> dict:
    cfg = _load_config(args)
    manifest = experiment.run(cfg, cfg.out_dir)
    return {"out": cfg.out_dir, "metric": manifest["metric"], "test_metric": manifest["test_metric"]}


def cmd_sweep(args) -> dict:
    if args.axis is None:
        raise UsageError("--axis is required for sweep")
    cfg = _load_config(args)
    seeds = [args.seed] if args.seed is not None else None
    rows = experiment.sweep(cfg, args.axis, _split_values(args.values), cfg.out_dir, seeds)
    return {"out": cfg.out_dir, "cells": len(rows)}


def cmd_eval(args) -> dict:
    if not args.out:
        raise UsageError("--out must name a finished run directory")
    override = ExperimentConfig.load(args.config).validate() if args.config else None
    return experiment.eval_run(args.out, override)


def cmd_report(args) -> dict:
    if not args.out:
        raise UsageError("--out must name a sweep directory")
    print(experiment.report(args.out), end="")
    return {"report": str(Path(args.out) / "report.md")}


COMMANDS = {"pretrain": cmd_pretrain, "run": cmd_run, "sweep": cmd_sweep, "eval": cmd_eval,
            "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="synprompt", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=str, default=None, help="flat YAML config file")
        sp.add_argument("--out", type=str, default=None, help="output (or input) directory")
        sp.add_argument("--seed", type=int, default=None, help="override the run seed")
        if name == "sweep":
            sp.add_argument("--axis", choices=experiment.AXES, default=None)
            sp.add_argument("--values", type=str, default=None, help="comma separated axis values")
    return p


def _fail(kind: str, message: str, code: int, **extra) -> int:
    rec = {"error": kind, "message": message}
    rec.update(extra)
    print(json.dumps(rec, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code in (0, None):
            return EXIT_OK
        return _fail("usage", "invalid command line arguments", EXIT_CONFIG)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        result = COMMANDS[args.command](args)
    except ConfigError as exc:
        return _fail("config", str(exc), EXIT_CONFIG, problems=exc.problems)
    except UsageError as exc:
        return _fail("usage", str(exc), EXIT_CONFIG)
    except FileNotFoundError as exc:
        return _fail("missing_file", str(exc), EXIT_FAILURE)
    except Exception as exc:  # noqa: BLE001 - reported as a machine-readable line
        return _fail(type(exc).__name__, str(exc), EXIT_FAILURE)
    if result is not None and args.command != "report":
        print(json.dumps(result, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
