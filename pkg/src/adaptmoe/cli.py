"""Command line: ``train``, ``sweep``, ``analyze``, ``fit-costmodel``, ``make-corpus``.

Exit codes: 0 success, 1 invalid configuration or arguments, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, RunConfig
from .cost import FORMS, REFERENCE_PAIRS
from . import runner, synth


def _parse_pairs(text: str) -> list[tuple[float, float]]:
    pairs = []
    for item in text.split(","):
        c, _, t = item.partition(":")
        pairs.append((float(c), float(t)))
    return pairs


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adaptmoe", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--policy", choices=["top1", "top2", "adaptive"])
    p.add_argument("--threshold", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--output-dir")

    p = sub.add_parser("sweep", help="one adaptive run per threshold")
    p.add_argument("--config", required=True)
    p.add_argument("--thresholds", required=True, help="comma separated, e.g. 0.05,0.1,0.2")
    p.add_argument("--output-dir")

    p = sub.add_parser("analyze", help="per-layer two-expert percentages of a run")
    p.add_argument("--run", required=True)

    p = sub.add_parser("fit-costmodel", help="fit the step-time overhead to (compute, time) pairs")
    p.add_argument("--pairs", help="c:t,c:t,... (default: built-in reference pairs)")
    p.add_argument("--form", choices=FORMS, default="straggler")

    p = sub.add_parser("make-corpus", help="write the synthetic train/val corpora")
    p.add_argument("--out", required=True)
    p.add_argument("--train-lines", type=int, default=3000)
    p.add_argument("--val-lines", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _load(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    overrides = {k: getattr(args, k, None) for k in ("policy", "threshold", "epochs", "seed", "output_dir")}
    data = cfg.to_dict()
    data.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig.from_dict(data)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "train":
            cfg = _load(args)
            print(f"config: {cfg.to_dict()}")
            res = runner.train(cfg)
            print(f"run directory: {res.run_dir} ({len(res.metrics)} steps)")
            if res.evals:
                print(f"final validation loss: {res.final_val_loss:.4f}")
        elif args.command == "sweep":
            cfg = _load(args)
            try:
                thresholds = [float(t) for t in args.thresholds.split(",") if t.strip()]
            except ValueError as exc:
                raise ConfigError("thresholds", str(exc)) from exc
            if not thresholds or any(not 0 <= t <= 1 for t in thresholds):
                raise ConfigError("thresholds", "need one or more values in [0, 1]")
            rows = runner.sweep(cfg, thresholds)
            print(runner.format_table(runner.SWEEP_COLUMNS, [[r[c] for c in runner.SWEEP_COLUMNS] for r in rows]))
        elif args.command == "analyze":
            res = runner.analyze(args.run)
            header = ["epoch"] + [f"layer_{i} %" for i in res["layers"]]
            print(runner.format_table(header, [[r["epoch"]] + [r[f"layer_{i}"] for i in res["layers"]]
                                               for r in res["epochs"]]))
        elif args.command == "fit-costmodel":
            try:
                pairs = _parse_pairs(args.pairs) if args.pairs else REFERENCE_PAIRS
            except ValueError as exc:
                raise ConfigError("pairs", str(exc)) from exc
            print(runner.fit_report(pairs, args.form))
        elif args.command == "make-corpus":
            if args.train_lines < 1 or args.val_lines < 1:
                raise ConfigError("lines", "need at least one line per split")
            for name, path in synth.write_corpora(args.out, args.train_lines, args.val_lines, args.seed).items():
                print(f"{name}: {path} ({path.stat().st_size} bytes)")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
