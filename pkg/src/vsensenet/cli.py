"""Command-line entry point: ``vsense <command> [options]``.

Exit codes: 0 success, 2 bad configuration or arguments, 3 missing
prerequisite artifact, 4 integrity or invariant failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import pipeline as pl
from .errors import (AggregationError, ConfigError, DependencyError, FormatError, IncompatibilityError,
                     InvariantViolation, LabelingError, ParameterError, SequencingError)

EXIT_OK, EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_INVARIANT = 0, 2, 3, 4


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="output directory (default: $VSENSE_OUT or ./vsense_out)")
    common.add_argument("--config", help="JSON run configuration; flags below override it")
    common.add_argument("--seeds", type=_seeds, help="comma-separated training seeds, e.g. 1,2,3")
    common.add_argument("--epochs", type=int, help="epoch count for every regime")
    common.add_argument("--master-seed", type=int, help="seed of the synthetic dataset")
    common.add_argument("--window-len", type=int, help="pressure window length in samples")
    common.add_argument("-q", "--quiet", action="store_true", help="only print warnings and errors")

    p = argparse.ArgumentParser(prog="vsense", description="VSenseNet: flame reconstruction from pressure "
                                "and combustion stability classification on a synthetic combustor.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="synthesize the dataset")
    sub.add_parser("pretrain", parents=[common], help="pretrain the image autoencoder")
    t = sub.add_parser("train", parents=[common], help="train one regime for every seed")
    t.add_argument("regime", choices=("AE",) + pl.TRAINED_REGIMES)
    e = sub.add_parser("evaluate", parents=[common], help="evaluate trained regimes and aggregate over seeds")
    e.add_argument("--regimes", help="comma-separated subset (default: all)")
    r = sub.add_parser("reconstruct", parents=[common], help="write reconstructed test frames as PGM")
    r.add_argument("regime", choices=sorted(pl.ev.RECONSTRUCTING))
    r.add_argument("--seed", type=int, required=True)
    r.add_argument("--per-condition", type=int, default=3)
    sub.add_parser("report", parents=[common], help="print the results table")
    sub.add_parser("run", parents=[common], help="all stages in order")
    sub.add_parser("show-config", parents=[common], help="print the effective configuration and its hash")
    return p


def resolve_config(args) -> pl.RunConfig:
    cfg = pl.RunConfig.load(args.config) if args.config else pl.RunConfig()
    d = cfg.to_dict()
    if args.seeds is not None:
        d["seeds"] = args.seeds
    if args.epochs is not None:
        d["epochs"] = dict.fromkeys(d["epochs"], args.epochs)
    if args.master_seed is not None:
        d["master_seed"] = args.master_seed
    if args.window_len is not None:
        d["window_len"] = args.window_len
    return pl.RunConfig.from_dict(d)


def _dispatch(args, ws: pl.Workspace) -> None:
    cmd = args.command
    if cmd == "generate":
        pl.generate(ws)
    elif cmd == "pretrain":
        pl.pretrain(ws)
    elif cmd == "train":
        pl.train(ws, args.regime)
    elif cmd == "evaluate":
        regimes = args.regimes.split(",") if args.regimes else None
        if regimes:
            bad = set(regimes) - set(pl.TRAINED_REGIMES)
            if bad:
                raise ConfigError(f"unknown regimes {sorted(bad)}")
        pl.evaluate(ws, regimes)
        print(pl.report(ws), end="")
    elif cmd == "reconstruct":
        paths = pl.reconstruct(ws, args.regime, args.seed, args.per_condition)
        print(f"wrote {len(paths)} frames to {ws.root / 'reconstructions'}")
    elif cmd == "report":
        print(pl.report(ws), end="")
    elif cmd == "run":
        pl.run_all(ws)
        print(pl.report(ws), end="")
    elif cmd == "show-config":
        import json
        print(json.dumps({"config": ws.cfg.to_dict(), "config_hash": ws.hash}, indent=2, sort_keys=True))


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    out = args.out or os.environ.get("VSENSE_OUT") or "vsense_out"
    try:
        ws = pl.Workspace(out, resolve_config(args))
        _dispatch(args, ws)
    except (ConfigError, ParameterError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DependencyError as exc:
        print(f"missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except (InvariantViolation, LabelingError, IncompatibilityError, FormatError, AggregationError,
            SequencingError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
