"""Result files: per-run directories, combined reports and plot data.

Layout under an output directory::

    runs/<run_id>/config.snapshot    TOML, loadable with load_config
    runs/<run_id>/trajectory.csv     step, objective, risk, per-env accuracies
    runs/<run_id>/report.csv         one row per environment x metric
    runs/<run_id>/report.json        nested reports and cross-environment variances
    report.csv                       all runs concatenated
    plots/scatter.csv                ID vs OOD value of each metric, one row per run
    plots/sweep.csv                  OOD/ID metrics against a swept hyperparameter
    plots/trajectory.csv             long-format step vs accuracy curves

Nothing time-dependent is written, so a rerun with the same configs and seeds
reproduces every file byte for byte.
"""
import csv
import json
import math
import os

import numpy as np

from . import __version__
from . import calibration as cal
from .config import dumps_config

SCATTER_COLUMNS = ("label", "method", "run_id", "seed", "metric", "id_value", "ood_value")
SWEEP_COLUMNS = ("axis", "axis_value", "label", "method", "run_id", "seed", "split", "metric", "value")
TRAJECTORY_COLUMNS = ("label", "run_id", "seed", "step", "series", "value")


def output_path(root, *parts):
    """Join ``parts`` onto ``root`` and refuse anything that escapes it."""
    root = os.path.realpath(root)
    path = os.path.realpath(os.path.join(root, *parts))
    if os.path.commonpath([root, path]) != root:
        raise ValueError(f"refusing to write {path}: outside {root}")
    return path


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _write_rows(path, columns, rows):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k, "")) for k in columns})


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _clean(obj):
    # NaN is not valid JSON; encode it as null.
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def write_json(path, doc):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w") as fh:
        json.dump(_clean(doc), fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def snapshot_text(result):
    head = [f"# run_id = {result.run_id}", f"# seed = {result.seed}", f"# rng = {result.rng}",
            f"# irmcal = {__version__}"]
    return "\n".join(head) + "\n" + dumps_config(result.config)


def run_rows(result):
    cfg = result.config
    return cal.report_rows(result.reports or [], result.run_id, cfg.method.method, cfg.dataset.name, result.seed)


def run_document(result):
    cfg = result.config
    doc = {"run_id": result.run_id, "seed": result.seed, "method": cfg.method.method,
           "dataset": cfg.dataset.name, "config_hash": cfg.config_hash(), "rng": result.rng,
           "steps": result.steps, "stopped_early": result.stopped_early,
           "reached_threshold": result.reached_threshold, "failed": result.failed, "error": result.error,
           "environments": [], "cross_env": {}}
    if result.completed:
        doc.update(json.loads(cal.report_to_json(result.reports, result.cross_env)))
    return doc


def emit_run(result, out_dir):
    """Write the four per-run files; returns the run directory."""
    run_dir = output_path(out_dir, "runs", result.run_id)
    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, "config.snapshot"), "w") as fh:
        fh.write(snapshot_text(result))
    columns = []
    for row in result.trajectory:
        columns.extend(k for k in row if k not in columns)
    _write_rows(os.path.join(run_dir, "trajectory.csv"), columns or ("step", "objective", "risk"),
                result.trajectory)
    cal.write_csv(os.path.join(run_dir, "report.csv"), run_rows(result))
    write_json(os.path.join(run_dir, "report.json"), run_document(result))
    return run_dir


def emit_reports(results, path):
    """Concatenated report CSV; headers only when ``results`` is empty."""
    rows = []
    for r in results:
        rows.extend(run_rows(r))
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    cal.write_csv(path, rows)
    return path


def _id_value(result, metric):
    return result.mean_metric("val", metric)


def scatter_rows(labelled):
    """``labelled`` is a list of ``(label, RunResult)``."""
    rows = []
    for label, r in labelled:
        if not r.completed:
            continue
        for metric in cal.METRICS:
            rows.append({"label": label, "method": r.config.method.method, "run_id": r.run_id, "seed": r.seed,
                         "metric": metric, "id_value": _id_value(r, metric),
                         "ood_value": r.mean_metric("test", metric)})
    return rows


def sweep_rows(axis, cells):
    """``cells`` is a list of ``(axis_value, label, RunResult)``."""
    rows = []
    for value, label, r in cells:
        if not r.completed:
            continue
        for split in ("val", "test"):
            for metric in cal.METRICS:
                rows.append({"axis": axis, "axis_value": value, "label": label, "method": r.config.method.method,
                             "run_id": r.run_id, "seed": r.seed, "split": split, "metric": metric,
                             "value": r.mean_metric(split, metric)})
    return rows


def trajectory_rows(labelled):
    rows = []
    for label, r in labelled:
        for point in r.trajectory:
            for key, value in point.items():
                if key != "step":
                    rows.append({"label": label, "run_id": r.run_id, "seed": r.seed, "step": point["step"],
                                 "series": key, "value": value})
    return rows


def emit_plot_data(out_dir, labelled, sweep=None):
    """Write the plot-data CSVs. ``sweep`` is ``(axis, cells)`` as for :func:`sweep_rows`."""
    paths = {"scatter": output_path(out_dir, "plots", "scatter.csv"),
             "trajectory": output_path(out_dir, "plots", "trajectory.csv")}
    _write_rows(paths["scatter"], SCATTER_COLUMNS, scatter_rows(labelled))
    _write_rows(paths["trajectory"], TRAJECTORY_COLUMNS, trajectory_rows(labelled))
    if sweep is not None:
        paths["sweep"] = output_path(out_dir, "plots", "sweep.csv")
        _write_rows(paths["sweep"], SWEEP_COLUMNS, sweep_rows(*sweep))
    return paths


def render_svg(out_dir, labelled, sweep=None, metric="ece"):
    """Static SVG figures from the same data as the plot CSVs (needs matplotlib)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "irmcal"
    meta = {"Date": None, "Creator": None}
    written = []

    fig, ax = plt.subplots(figsize=(5, 4))
    for label in sorted({lab for lab, _ in labelled}):
        pts = [(r.mean_metric("val", metric), r.mean_metric("test", metric))
               for lab, r in labelled if lab == label and r.completed]
        if pts:
            ax.scatter(*zip(*pts), label=label)
    ax.set_xlabel(f"ID {metric}")
    ax.set_ylabel(f"OOD {metric}")
    ax.legend(fontsize="small")
    path = output_path(out_dir, "plots", f"scatter_{metric}.svg")
    fig.savefig(path, format="svg", metadata=meta)
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(5, 4))
    for label, r in labelled:
        steps = [p["step"] for p in r.trajectory]
        for key in sorted({k for p in r.trajectory for k in p if k.startswith("test_acc/")}):
            ax.plot(steps, [p[key] for p in r.trajectory], label=f"{label} s{r.seed} {key[9:]}")
    ax.set_xlabel("step")
    ax.set_ylabel("OOD accuracy (%)")
    path = output_path(out_dir, "plots", "trajectory.svg")
    fig.savefig(path, format="svg", metadata=meta)
    plt.close(fig)
    written.append(path)

    if sweep is not None:
        axis, cells = sweep
        fig, ax = plt.subplots(figsize=(5, 4))
        for label in sorted({lab for _, lab, _ in cells}):
            values = sorted({v for v, lab, _ in cells if lab == label})
            med = [float(np.median([r.mean_metric("test", metric) for v2, lab, r in cells
                                    if lab == label and v2 == v and r.completed] or [np.nan])) for v in values]
            ax.plot(values, med, marker="o", label=label)
        ax.set_xscale("log")
        ax.set_xlabel(axis)
        ax.set_ylabel(f"OOD {metric} (median over seeds)")
        ax.legend(fontsize="small")
        path = output_path(out_dir, "plots", "sweep.svg")
        fig.savefig(path, format="svg", metadata=meta)
        plt.close(fig)
        written.append(path)
    return written
