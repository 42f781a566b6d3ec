"""Command line interface: run experiments, sweep an axis, emit reports, fetch data.

Exit code is 0 only if every requested run completed.
"""

from __future__ import annotations

import argparse
import ast
import json
import sys
from dataclasses import fields
from pathlib import Path

from .datasets import ingest_dataset, resolve_cache_dir
from .experiment import (
    ExperimentSpec,
    SWEEP_AXES,
    read_rows,
    run_experiment,
    sweep,
)
from .report import emit_report
from .validation import ValidationError

_SPEC_FIELDS = {f.name for f in fields(ExperimentSpec)}


def _parse_value(text):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def parse_config(path):
    """Read a declarative spec: one `key = value` per line, # comments allowed.

    Keys are ExperimentSpec fields; `attack.foo` / `defense.foo` set descriptor
    parameters. Values are Python literals where they parse as such."""
    options = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        options[key.strip()] = _parse_value(value.strip())
    return options


def build_spec(options):
    kwargs = {}
    attack_params = {}
    defense_params = {}
    for key, value in options.items():
        if key.startswith("attack."):
            attack_params[key.split(".", 1)[1]] = value
        elif key.startswith("defense."):
            defense_params[key.split(".", 1)[1]] = value
        elif key in ("sweep_axis", "sweep_grid"):
            kwargs[key] = value
        elif key in _SPEC_FIELDS:
            kwargs[key] = value
        else:
            raise ValidationError(f"unknown spec option {key!r}")
    if attack_params:
        kwargs["attack_params"] = {**kwargs.get("attack_params", {}), **attack_params}
    if defense_params:
        kwargs["defense_params"] = {**kwargs.get("defense_params", {}), **defense_params}
    if isinstance(kwargs.get("seeds"), int):
        kwargs["seeds"] = (kwargs["seeds"],)
    return ExperimentSpec(**kwargs)


def _parse_grid(text, axis):
    """Grid syntax: 'a,b,c', 'start:stop:step' (inclusive), or 'gxr' pairs for
    the lambda grid, e.g. '0.1x10,1x10,1x1'."""
    if axis == "lambda_grid":
        pairs = []
        for piece in text.split(","):
            gan, _, r = piece.partition("x")
            pairs.append((float(gan), float(r)))
        return pairs
    if ":" in text:
        start, stop, step = (float(v) for v in text.split(":"))
        values = []
        v = start
        while v <= stop + 1e-12:
            values.append(round(v, 10))
            v += step
        return values
    return [_parse_value(v) for v in text.split(",")]


def _spec_from_args(args):
    options = {}
    if args.config:
        options.update(parse_config(args.config))
    for key, value in args.option or []:
        options[key] = value
    if args.dataset:
        options["dataset"] = args.dataset
    if args.seeds:
        options["seeds"] = tuple(int(s) for s in args.seeds.split(","))
    if args.attack:
        options["attack"] = None if args.attack == "none" else args.attack
    if args.defense:
        options["defense"] = None if args.defense == "none" else args.defense
    if args.epochs is not None:
        options["epochs"] = args.epochs
    if args.output_dir:
        options["output_dir"] = args.output_dir
    if args.cache_dir:
        options["cache_dir"] = args.cache_dir
    return build_spec(options)


def _add_spec_flags(p):
    p.add_argument("--config", help="declarative spec file (key = value lines)")
    p.add_argument("--dataset", help="mnist | cifar10 | cifar100 | digits | synthetic[:...]")
    p.add_argument("--attack", help="pgan | lra | villain | none")
    p.add_argument("--defense", help="dae | none")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seeds", help="comma-separated seed list")
    p.add_argument("--output-dir", help="where runs, reports, and checkpoints go")
    p.add_argument("--cache-dir", help="dataset cache directory")
    p.add_argument(
        "-o", "--option", nargs=2, action="append", metavar=("KEY", "VALUE"),
        type=str, help="any spec field, e.g. -o attack.rho 0.1",
    )


def _fix_option_values(args):
    if args.option:
        args.option = [(k, _parse_value(v)) for k, v in args.option]


def cmd_run(args):
    _fix_option_values(args)
    spec = _spec_from_args(args)
    rows = run_experiment(spec)
    if spec.output_dir:
        emit_report(rows, Path(spec.output_dir) / "report", plots=args.plots)
    summaries = [r for r in rows if r.get("kind") == "summary"]
    for r in summaries:
        print(f"run {r['run_id']}: final F1 {r['final_f1']}, "
              f"accuracy {r['final_accuracy']}")
    expected = len(spec.resolved().seeds)
    if len(summaries) != expected:
        print(f"error: {expected - len(summaries)} run(s) missing a summary",
              file=sys.stderr)
        return 1
    return 0


def cmd_sweep(args):
    _fix_option_values(args)
    spec = _spec_from_args(args)
    grid = _parse_grid(args.grid, args.axis)
    rows, table = sweep(spec, args.axis, grid)
    if spec.output_dir:
        emit_report(rows, Path(spec.output_dir) / "report", plots=args.plots,
                    sweep_table=table, prefix=f"sweep_{args.axis}")
    for entry in table:
        print(f"{args.axis}={entry['sweep_value']}: "
              f"F1 {entry['f1_mean']} ± {entry['f1_std']} ({entry['n_runs']} runs)")
    expected = len(grid) * len(spec.resolved().seeds)
    done = sum(t["n_runs"] for t in table)
    if done != expected:
        print(f"error: completed {done}/{expected} runs", file=sys.stderr)
        return 1
    return 0


def cmd_report(args):
    runs_dir = Path(args.runs_dir)
    rows = []
    for path in sorted(runs_dir.glob("runs/*.csv")) or sorted(runs_dir.glob("*.csv")):
        rows.extend(read_rows(path))
    if not rows:
        print(f"error: no run CSVs under {runs_dir}", file=sys.stderr)
        return 1
    written = emit_report(rows, args.out or runs_dir / "report", plots=args.plots)
    for path in written:
        print(f"wrote {path}")
    return 0


def cmd_datasets(args):
    if args.datasets_cmd != "fetch":
        return 1
    try:
        data = ingest_dataset(args.name, cache_dir=args.cache_dir, download=True)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"{data.name}: {len(data.train_y)} train / {len(data.test_y)} test, "
          f"shape {data.feature_shape}, cached under {resolve_cache_dir(args.cache_dir)}")
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(prog="vflab",
                                     description="VFL attack/defense laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment spec")
    _add_spec_flags(p_run)
    p_run.add_argument("--plots", action="store_true")
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="sweep one axis of a spec")
    _add_spec_flags(p_sweep)
    p_sweep.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p_sweep.add_argument("--grid", required=True,
                         help="'a,b,c' or 'start:stop:step' or '1x10,0.1x10'")
    p_sweep.add_argument("--plots", action="store_true")
    p_sweep.set_defaults(func=cmd_sweep)

    p_report = sub.add_parser("report", help="aggregate persisted run CSVs")
    p_report.add_argument("--runs-dir", required=True)
    p_report.add_argument("--out")
    p_report.add_argument("--plots", action="store_true")
    p_report.set_defaults(func=cmd_report)

    p_data = sub.add_parser("datasets", help="dataset management")
    data_sub = p_data.add_subparsers(dest="datasets_cmd", required=True)
    p_fetch = data_sub.add_parser("fetch", help="download and verify a dataset")
    p_fetch.add_argument("--name", required=True)
    p_fetch.add_argument("--cache-dir")
    p_fetch.set_defaults(func=cmd_datasets)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # surface a clean one-liner; stack traces stay in -X dev
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
