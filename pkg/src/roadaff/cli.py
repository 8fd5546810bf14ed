"""Command line entry point: ``roadaff [global flags] <stage> [--section.key value ...]``.

Exit codes: 0 success, 1 configuration error, 2 stage failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .pipeline import ConfigError, StageError

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _split_overrides(extra: list[str]) -> dict[str, str]:
    """``--net.lr 1e-3`` or ``--net.lr=1e-3`` pairs into ``{"net.lr": "1e-3"}``."""
    out = {}
    i = 0
    while i < len(extra):
        arg = extra[i]
        if not arg.startswith("--") or "." not in arg.split("=", 1)[0]:
            raise ConfigError(f"unrecognized argument {arg!r}")
        key = arg[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"flag {arg} needs a value")
            i += 1
            value = extra[i]
        out[key] = value
        i += 1
    return out


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="roadaff", description=__doc__.splitlines()[0])
    p.add_argument("--config", type=Path, help="INI file with [pipeline] and per-module sections")
    p.add_argument("--seed", type=int, help="global seed (overrides the config file)")
    p.add_argument("--workspace", type=Path, help="workspace directory (overrides the config file)")
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen", help="synthesize world, drives, rendered frames and ground truth")
    seg = sub.add_parser("segment", help="segment the angular-speed series into driving actions")
    seg.add_argument("--series", type=Path, help="angular-speed series file (default: built from the workspace drives)")
    seg.add_argument("--out", type=Path, help="action sequence output (default: workspace actions.csv)")
    seg.add_argument("--segments", type=Path, help="segment summary output (default: next to --out)")
    sub.add_parser("annotate", help="derive partial affordance labels for training frames")
    sub.add_parser("train", help="train the network on the annotated frames")
    sub.add_parser("infer", help="predict complete affordances for the held-out frames")
    ev = sub.add_parser("eval", help="score predictions against ground truth")
    ev.add_argument("--predictions", type=Path)
    ev.add_argument("--truth", type=Path)
    ev.add_argument("--out", type=Path, help="plain-text table (default: workspace metrics.txt)")
    ev.add_argument("--json", type=Path, help="machine-readable record (default: next to --out)")
    ev.add_argument("--report", action="store_true", help="also write per-class bar data")
    sub.add_parser("pipeline", help="run every stage and write the artifact manifest")
    return p


def _segment(cfg, args) -> None:
    if args.series is None:
        pipeline.run_stage(cfg, "segment")
        return
    out = args.out or cfg.workspace / "actions.csv"
    segments = args.segments or out.with_name(out.stem + "_segments.csv")
    try:
        pipeline.segment_series(args.series, out, segments, cfg.build("hdphmm"),
                                pipeline.derive_seed(cfg.seed, "hdphmm"))
    except (OSError, ValueError) as exc:
        raise StageError("segment", str(exc)) from exc


def _eval(cfg, args) -> None:
    if args.report:
        cfg.set("eval", "report", "true")
    if args.predictions is None and args.truth is None and args.out is None:
        rep = pipeline.run_stage(cfg, "eval")
    else:
        ws = cfg.workspace
        pred = args.predictions or ws / "predictions.csv"
        truth = args.truth or ws / "truth.csv"
        out = args.out or ws / "metrics.txt"
        js = args.json or out.with_suffix(".json")
        bars = out.with_name(out.stem + "_bars.csv") if args.report else None
        try:
            rep = pipeline.evaluate_files(pred, truth, out, js, bars)
        except (OSError, ValueError) as exc:
            raise StageError("eval", str(exc)) from exc
    print(pipeline.evaluation.format_report(rep), end="")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        logging.basicConfig(level=args.log_level, format="%(asctime)s %(name)s %(levelname)s %(message)s")
        cfg = pipeline.load_config(args.config, _split_overrides(extra), args.seed, args.workspace)
    except ConfigError as exc:
        print(f"roadaff: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "pipeline":
            pipeline.run_pipeline(cfg)
            print(f"manifest: {cfg.workspace / 'manifest.json'}")
        elif args.command == "segment":
            _segment(cfg, args)
        elif args.command == "eval":
            _eval(cfg, args)
        else:
            pipeline.run_stage(cfg, args.command)
    except StageError as exc:
        print(f"roadaff: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except ConfigError as exc:
        print(f"roadaff: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
