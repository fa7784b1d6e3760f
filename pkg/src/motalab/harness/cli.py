"""Command line entry point.

Exit codes: 0 success, 1 configuration error, 2 runtime failure, 3 invariant
violation.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

from ..metrics import CapacityError
from ..mota_core import InvariantViolation
from ..task_stream import SHIFT_KINDS, StreamConfigError, export_stream, make_stream
from ..training import DataAccessViolation
from . import config as C

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_INVARIANT = 0, 1, 2, 3


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    # bad flags are configuration errors, not argparse's default exit 2
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = Parser(prog="motalab", description="Continual-learning lab for multi-mode training.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    r = sub.add_parser("run", help="run every (strategy, replicate) cell of a config")
    r.add_argument("config", nargs="?", help="TOML config (default: the shipped one)")
    r.add_argument("--seed", type=int, help="master seed override")
    r.add_argument("--out", help="output root (default: experiment.out)")
    r.add_argument("--force", action="store_true", help="recompute finished cells")
    r.add_argument("--jobs", type=int, default=1, help="parallel cells")

    c = sub.add_parser("compare", help="merge metrics.csv of finished runs")
    c.add_argument("run_ids", nargs="+")
    c.add_argument("--out", default="runs", help="directory holding the runs")
    c.add_argument("--csv", help="write the merged table here instead of stdout")

    la = sub.add_parser("landscape", help="rebuild landscape exports of a finished run")
    la.add_argument("run_id")
    la.add_argument("--strategy", required=True)
    la.add_argument("--replicate", type=int, action="append", help="replicate index (repeatable)")
    la.add_argument("--out", default="runs")

    v = sub.add_parser("validate-config", help="check a config file")
    v.add_argument("config")

    g = sub.add_parser("gen-stream", help="write a frozen CSV stream")
    g.add_argument("--kind", choices=SHIFT_KINDS, default="task_il")
    g.add_argument("--tasks", type=int, default=5)
    g.add_argument("--classes-per-task", type=int, default=2)
    g.add_argument("--samples-per-class", type=int, default=200)
    g.add_argument("--input-dim", type=int, default=16)
    g.add_argument("--std", type=float, default=1.0)
    g.add_argument("--range", type=float, default=1.0, dest="mean_range")
    g.add_argument("--seed", type=int, default=3407)
    g.add_argument("--out", default="stream")
    return p


def cmd_run(args) -> int:
    from .runner import run_experiment

    overrides = {"experiment.seed": args.seed} if args.seed is not None else None
    cfg = C.load(args.config, overrides)
    if args.jobs < 1:
        raise C.ConfigError("--jobs must be >= 1")
    report = run_experiment(cfg, args.out, force=args.force, jobs=args.jobs)
    root = Path(args.out or cfg["experiment"]["out"]) / report["run_id"]
    failed = [(s, r) for s, per in report["cells"].items() for r, c in per.items() if c["status"] != "ok"]
    print(f"run {report['run_id']} -> {root}")
    for s, agg in report["aggregate"].items():
        acc = agg["avg_acc"]["mean"]
        print(f"  {s:18s} avg_acc {acc if acc is None else round(acc, 4)}")
    if failed:
        print(f"{len(failed)} cell(s) failed: {failed}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_compare(args) -> int:
    out = io.StringIO() if args.csv is None else open(args.csv, "w", newline="")
    capacity = {}
    with out:
        w = csv.writer(out, lineterminator="\n")
        header_written = False
        for rid in args.run_ids:
            path = Path(args.out) / rid / "metrics.csv"
            if not path.exists():
                raise FileNotFoundError(f"no metrics.csv for run {rid} under {args.out}")
            with path.open() as fh:
                rows = list(csv.reader(fh))
            if not header_written:
                w.writerow(["run_id"] + rows[0])
                header_written = True
            cap_col = rows[0].index("capacity_params")
            for row in rows[1:]:
                w.writerow([rid] + row)
                capacity[(rid, row[0])] = row[cap_col]
        if args.csv is None:
            sys.stdout.write(out.getvalue())
    print("\ncapacity (parameters)", file=sys.stderr)
    for (rid, s), cap in capacity.items():
        print(f"  {rid}  {s:18s} {cap}", file=sys.stderr)
    return EXIT_OK


def cmd_landscape(args) -> int:
    from .runner import rebuild_landscape

    root = Path(args.out) / args.run_id
    if not (root / "config.toml").exists():
        raise FileNotFoundError(f"run {args.run_id} not found under {args.out}")
    for d in rebuild_landscape(root, args.strategy, args.replicate):
        print(d)
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = C.load(args.config)
    print(f"ok: run id {C.run_id(cfg)}")
    return EXIT_OK


def cmd_gen_stream(args) -> int:
    try:
        stream = make_stream(args.kind, args.tasks, args.classes_per_task, args.samples_per_class, args.seed,
                             args.input_dim, args.std, args.mean_range)
    except StreamConfigError as exc:
        raise C.ConfigError(str(exc)) from exc
    for path in export_stream(stream, args.out):
        print(path)
    return EXIT_OK


COMMANDS = {"run": cmd_run, "compare": cmd_compare, "landscape": cmd_landscape,
            "validate-config": cmd_validate, "gen-stream": cmd_gen_stream}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except C.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InvariantViolation, DataAccessViolation, CapacityError) as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
