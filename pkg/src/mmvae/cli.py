"""Command line: generate | train | evaluate | oracle | sweep.

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import sys
from pathlib import Path

from . import config as cfgmod
from . import experiment as exp
from .training import NumericFailure

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def _load_config(args) -> dict:
    text = None
    if getattr(args, "config", None):
        text = Path(args.config).read_text()
    return cfgmod.load(text, args.set or [])


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; missing keys take defaults")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key by dotted path, e.g. training.epochs=50")


def cmd_generate(args) -> int:
    config = _load_config(args)
    out = exp.output_path(args.out or Path(config["output_dir"]) / "data")
    tag = cfgmod.config_hash(config)
    tr, te, truth = exp.generate(config)
    paths = exp.write_dataset(out, tr, te, truth, tag)
    (out / "config.json").write_text(cfgmod.dumps(config))
    print(json.dumps({"config_hash": tag, "files": [str(p) for p in paths]}, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    config = _load_config(args)
    data = exp.output_path(args.data or Path(config["output_dir"]) / "data")
    out = exp.output_path(args.out or Path(config["output_dir"]) / "run")
    arts = exp.run_train(config, data, out, Path(args.resume) if args.resume else None,
                         echo=None if args.quiet else print)
    print(json.dumps({"config_hash": cfgmod.config_hash(config), "checkpoint": str(arts.checkpoint_path),
                      "log": str(arts.log_path), "config": str(arts.config_path)}, sort_keys=True))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    run = exp.output_path(args.run)
    data = exp.output_path(args.data) if args.data else None
    jpath, cpath = exp.run_evaluate(run, data, analytic=args.analytic)
    doc = json.loads(jpath.read_text())
    if not doc["metrics"]:
        print(json.dumps(doc, sort_keys=True))
        return EXIT_NUMERIC
    print(json.dumps({"config_hash": doc["config_hash"], "json": str(jpath), "csv": str(cpath)}, sort_keys=True))
    return EXIT_OK


def cmd_oracle(args) -> int:
    data = exp.output_path(args.data)
    print(json.dumps(exp.oracle_summary(data, args.beta, args.points), sort_keys=True))
    return EXIT_OK


def cmd_sweep(args) -> int:
    """Every combination of the grid values, each run through generate, train and evaluate."""
    base = _load_config(args)
    grid = json.loads(Path(args.grid).read_text())
    if not isinstance(grid, dict) or not grid:
        raise cfgmod.ConfigError("grid must be a non-empty object of key -> list of values")
    keys = sorted(grid)
    root = exp.output_path(args.out or Path(base["output_dir"]) / "sweep")
    rows = []
    for i, combo in enumerate(itertools.product(*(grid[k] for k in keys))):
        assignments = [f"{k}={json.dumps(v)}" for k, v in zip(keys, combo)]
        config = cfgmod.validate(cfgmod.apply_overrides(base, assignments))
        tag = cfgmod.config_hash(config)
        run_dir = root / f"run{i:03d}_{tag}"
        tr, te, truth = exp.generate(config)
        exp.write_dataset(run_dir / "data", tr, te, truth, tag)
        exp.run_train(config, run_dir / "data", run_dir)
        jpath, _ = exp.run_evaluate(run_dir)
        metrics = exp.flatten_metrics(_report_from(jpath))
        rows.append({"run": run_dir.name, "config_hash": tag, **dict(zip(keys, combo)), **metrics})
    columns = sorted({c for r in rows for c in r}, key=lambda c: (c not in ("run", "config_hash"), c))
    buf = io.StringIO()
    writer = csv.DictWriter(buf, columns, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow(r)
    out = root / "sweep.csv"
    out.write_text(buf.getvalue())
    print(json.dumps({"runs": len(rows), "csv": str(out)}, sort_keys=True))
    return EXIT_OK


def _report_from(path: Path):
    from .evaluation import MetricsReport

    doc = json.loads(path.read_text())
    return MetricsReport(doc["metrics"], doc["skipped"])


def parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mmvae", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset (CSV + JSON ground truth)")
    _add_config_args(g)
    g.add_argument("--out", help="output directory (default: <output_dir>/data)")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model on a generated dataset")
    _add_config_args(t)
    t.add_argument("--data", help="dataset directory (default: <output_dir>/data)")
    t.add_argument("--out", help="run directory (default: <output_dir>/run)")
    t.add_argument("--resume", help="checkpoint to start from")
    t.add_argument("--quiet", action="store_true", help="do not echo log lines")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="compute metrics for a trained run")
    e.add_argument("--run", required=True, help="run directory holding config.json and checkpoint.json")
    e.add_argument("--data", help="dataset directory (default: the one used for training)")
    e.add_argument("--analytic", action="store_true",
                   help="evaluate the maximum-likelihood linear model with its exact posterior instead")
    e.set_defaults(func=cmd_evaluate)

    o = sub.add_parser("oracle", help="print exact posteriors and log-likelihoods for a linear dataset")
    o.add_argument("--data", required=True)
    o.add_argument("--beta", type=float, default=1.0)
    o.add_argument("--points", type=int, default=10)
    o.set_defaults(func=cmd_oracle)

    s = sub.add_parser("sweep", help="run a grid of configs and write a combined CSV")
    _add_config_args(s)
    s.add_argument("--grid", required=True, help="JSON object mapping dotted keys to value lists")
    s.add_argument("--out", help="sweep directory (default: <output_dir>/sweep)")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = parser().parse_args(argv)
    try:
        return args.func(args)
    except cfgmod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericFailure as exc:
        print(f"numeric failure at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, json.JSONDecodeError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
