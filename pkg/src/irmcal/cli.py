"""``irmcal`` command line.

Exit status: 0 success, 2 configuration or usage error, 3 runtime failure.
"""
import argparse
import glob
import json
import logging
import os
import sys

from . import __version__, emit, harness, presets
from .calibration import CSV_COLUMNS
from .config import load_config, parse_value
from .datasets import DEFAULT_MNIST_URL, default_mnist_dir, fetch_mnist, save_envs
from .linalg import NonFiniteError
from .nn import ConfigError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
log = logging.getLogger("irmcal")


class UsageError(Exception):
    pass


def _common(p, config=True):
    if config:
        p.add_argument("--config", metavar="FILE", help="TOML experiment config")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config value (repeatable), e.g. --set method.lam=100")
    p.add_argument("--out", metavar="PATH", help="output directory")
    p.add_argument("--seed", type=int, help="run only this seed instead of harness.seeds")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes for sweeps")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="irmcal", description="Train and evaluate invariance objectives on environment-shifted MNIST.")
    parser.add_argument("--version", action="version", version=f"irmcal {__version__}")
    parser.add_argument("-q", "--quiet", action="store_true", help="only print results and errors")
    sub = parser.add_subparsers(dest="verb", metavar="VERB")

    p = sub.add_parser("fetch-data", help="download the MNIST IDX archives")
    _common(p, config=False)
    p.add_argument("--url", default=DEFAULT_MNIST_URL, help="base URL (file:// works for local mirrors)")

    p = sub.add_parser("gen-data", help="generate environment datasets and cache them as .npz")
    _common(p)

    p = sub.add_parser("train", help="train one configuration for each seed")
    _common(p)
    p.add_argument("--svg", action="store_true", help="also render SVG figures (needs matplotlib)")

    p = sub.add_parser("sweep", help="grid search over config values")
    _common(p)
    p.add_argument("--grid", action="append", default=[], metavar="SECTION.KEY=[V1,V2,...]",
                   help="one grid axis (repeatable)")

    p = sub.add_parser("replicate", help="run a pinned desk-scale replication target")
    _common(p)
    p.add_argument("target", choices=sorted(presets.PRESETS))
    p.add_argument("--svg", action="store_true", help="also render SVG figures (needs matplotlib)")

    p = sub.add_parser("report", help="summarise a result directory")
    p.add_argument("path", help="directory written by train/sweep/replicate")
    p.add_argument("--out", metavar="FILE", help="also write the combined report CSV here")
    return parser


def _config(args):
    if args.config and not os.path.isfile(args.config):
        raise ConfigError(f"file not found: {args.config}")
    cfg = load_config(args.config, args.overrides)
    if args.seed is not None:
        cfg = cfg.with_updates(harness={"seeds": [args.seed]})
    return cfg


def _out(args, default):
    return args.out or default


def cmd_fetch_data(args):
    dest = _out(args, default_mnist_dir())
    for path in fetch_mnist(dest, args.url):
        print(path)
    return EXIT_OK


def cmd_gen_data(args):
    cfg = _config(args)
    out = _out(args, "data/envs")
    for seed in cfg.harness.seeds:
        splits = harness.build_envs(cfg, seed)
        path = emit.output_path(out, f"{cfg.dataset.name}-{cfg.config_hash()}-s{seed}.npz")
        os.makedirs(os.path.dirname(path), exist_ok=True)
        save_envs(path, splits.train + splits.val + splits.test, None, config=cfg.to_dict(), seed=seed)
        print(path)
    return EXIT_OK


def _print_run(r):
    if not r.completed:
        print(f"{r.run_id}  FAILED after {r.steps} steps: {r.error}")
        return
    print(f"{r.run_id}  {r.config.method.method:7s} steps={r.steps:<5d} val_acc={r.val_accuracy:6.2f} "
          f"test_acc={r.test_accuracy:6.2f} test_ece={r.mean_metric('test', 'ece'):6.2f} "
          f"var_ece={r.cross_env['ece'].variance:.3f}")


def cmd_train(args):
    cfg = _config(args)
    out = _out(args, "runs-out")
    results = []
    for seed in cfg.harness.seeds:
        log.info("training %s seed %d", cfg.method.method, seed)
        r = harness.train_run(cfg, seed)
        emit.emit_run(r, out)
        _print_run(r)
        results.append(r)
    labelled = [(cfg.method.method, r) for r in results]
    emit.emit_reports(results, emit.output_path(out, "report.csv"))
    emit.emit_plot_data(out, labelled)
    if args.svg:
        emit.render_svg(out, labelled)
    return EXIT_OK if all(r.completed for r in results) else EXIT_RUNTIME


def _grid(specs):
    axes = {}
    for item in specs:
        if "=" not in item:
            raise ConfigError(f"grid axis {item!r} is not of the form section.key=[values]")
        key, text = item.split("=", 1)
        if "." not in key:
            raise ConfigError(f"grid key {key!r} must be section.key")
        values = parse_value(text.strip())
        axes[key.strip()] = values if isinstance(values, list) else [values]
    return axes


def cmd_sweep(args):
    cfg = _config(args)
    axes = _grid(args.grid)
    harness.grid_cells(cfg, axes)  # rejects bad keys and values before any training
    out = _out(args, "sweep-out")
    result = harness.grid_search(cfg, axes, jobs=args.jobs)
    labelled = []
    cells = []
    for cell in result.cells:
        label = " ".join(f"{k}={v}" for k, v in sorted(cell["params"].items())) or cfg.method.method
        for r in cell["runs"]:
            emit.emit_run(r, out)
            _print_run(r)
            labelled.append((label, r))
            if len(axes) == 1:
                cells.append((next(iter(cell["params"].values())), cfg.method.method, r))
    emit.emit_reports([r for _, r in labelled], emit.output_path(out, "report.csv"))
    emit.emit_plot_data(out, labelled, (next(iter(axes)), cells) if len(axes) == 1 else None)
    best = result.best
    doc = {"selection": result.selection,
           "cells": [{"params": c["params"], "score": c["score"], "run_ids": [r.run_id for r in c["runs"]]}
                     for c in result.cells],
           "best": None if best is None else {"params": best["params"], "score": best["score"]},
           "aggregate": {k: list(v) for k, v in result.aggregate.items()}}
    emit.write_json(emit.output_path(out, "sweep.json"), doc)
    if best is None:
        print("no grid cell completed", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"best ({result.selection} = {best['score']:.2f}): {best['params']}")
    return EXIT_OK


def cmd_replicate(args):
    if args.config:
        raise UsageError("replicate uses pinned presets; adjust them with --set instead of --config")
    seeds = None if args.seed is None else [args.seed]
    out = _out(args, os.path.join("replicate-out", args.target))
    summary = presets.run_preset(args.target, out, seeds=seeds, jobs=args.jobs, overrides=args.overrides,
                                 svg=args.svg)
    if "threshold" in summary:
        print(f"early-stop threshold: {summary['threshold']:g}")
    for label, s in summary["arms"].items():
        rows = s.items() if "n_runs" not in s else [("", s)]
        for value, stats in rows:
            name = f"{label} {value}".strip()
            if not stats.get("n_completed"):
                print(f"{name}: no completed runs")
                continue
            print(f"{name}: id_acc={stats['id_accuracy']:.2f} ood_acc={stats['ood_accuracy']:.2f} "
                  f"ood_ece={stats['ood_ece']:.2f} var_ece={stats['variance_ece']:.3f}  (median, n={stats['n_completed']})")
    print(f"results in {out}")
    return EXIT_OK


def cmd_report(args):
    docs = sorted(glob.glob(os.path.join(args.path, "runs", "*", "report.json")))
    if not docs:
        raise ConfigError(f"no runs/*/report.json under {args.path}")
    rows = []
    print(f"{'run_id':28s} {'method':7s} {'seed':>4s} {'val_acc':>8s} {'test_acc':>8s} {'test_ece':>8s} "
          f"{'var_ece':>8s} {'var_ace':>8s} {'var_nll':>8s}")
    for path in docs:
        with open(path) as fh:
            doc = json.load(fh)
        envs = doc.get("environments") or []
        if not envs:
            print(f"{doc['run_id']:28s} {doc['method']:7s} {doc['seed']:>4} failed: {doc.get('error', '')}")
            continue

        def mean(split, key):
            vals = [e[key] for e in envs if e["split"] == split and e[key] is not None]
            return sum(vals) / len(vals) if vals else float("nan")

        var = {m: (doc["cross_env"].get(m) or {}).get("variance") for m in ("ece", "ace", "nll")}
        print(f"{doc['run_id']:28s} {doc['method']:7s} {doc['seed']:>4} {mean('val', 'accuracy'):8.2f} "
              f"{mean('test', 'accuracy'):8.2f} {mean('test', 'ece'):8.2f} "
              + " ".join(f"{v:8.3f}" if v is not None else f"{'nan':>8s}" for v in var.values()))
        with open(os.path.join(os.path.dirname(path), "report.csv")) as fh:
            rows.extend(fh.read().splitlines()[1:])
    if args.out:
        os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
        with open(args.out, "w") as fh:
            fh.write(",".join(CSV_COLUMNS) + "\n")
            fh.writelines(line + "\n" for line in rows)
    return EXIT_OK


COMMANDS = {"fetch-data": cmd_fetch_data, "gen-data": cmd_gen_data, "train": cmd_train, "sweep": cmd_sweep,
            "replicate": cmd_replicate, "report": cmd_report}


def run_cli(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not args.verb:
        parser.print_help()
        return EXIT_CONFIG
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.verb](args)
    except (ConfigError, UsageError) as exc:
        print(f"irmcal: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteError, RuntimeError, OSError, ValueError) as exc:
        print(f"irmcal: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
