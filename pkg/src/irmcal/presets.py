"""Pinned desk-scale experiments behind ``irmcal replicate``.

Each target fixes every configuration value, trains all of its arms for every
seed, writes the result tree with :mod:`irmcal.emit` and a ``summary.json``
holding per-arm medians over seeds.
"""
import logging
from dataclasses import dataclass

import numpy as np

from . import emit
from .config import apply_overrides, from_dict
from .harness import early_stop_threshold_search, grid_search

log = logging.getLogger(__name__)

SWEEP_VALUES = (1.0, 10.0, 100.0, 1000.0, 10000.0)

# Colored MNIST recipe shared by the CMNIST targets. 15000 source images dealt
# over three environments leave 10000 for the two training environments.
CMNIST_BASE = {
    "dataset": {"name": "cmnist", "n_images": 15000, "train_envs": [0.1, 0.2], "test_envs": [0.9],
                "label_noise": 0.25, "downsample": True, "train_fraction": 0.8},
    "optimizer": {"lr": 5e-4, "batch_size": 256, "weight_decay": 1e-3},
    "harness": {"hidden": [256, 256], "max_steps": 700, "eval_interval": 50, "penalty_anneal_steps": 200,
                "early_stop": 0.0, "seeds": [0, 1, 2], "n_bins": 15, "variance_includes_test": True},
}

RMNIST_BASE = {
    "dataset": {"name": "rmnist", "n_images": 10000, "train_envs": [15.0, 30.0, 45.0, 60.0, 75.0],
                "test_envs": [0.0], "train_fraction": 0.8},
    "optimizer": {"lr": 5e-4, "batch_size": 128, "weight_decay": 0.0},
    "harness": {"hidden": [256, 256], "max_steps": 1500, "eval_interval": 50, "penalty_anneal_steps": 200,
                "early_stop_rule": "mean", "seeds": [0, 1, 2], "n_bins": 15, "variance_includes_test": True},
}


@dataclass(frozen=True)
class Arm:
    label: str
    method: dict


@dataclass(frozen=True)
class Preset:
    name: str
    summary: str
    base: dict
    arms: tuple
    axis: str = ""
    values: tuple = ()
    thresholds: tuple = ()


PRESETS = {p.name: p for p in (
    Preset("fig1", "CMNIST ID vs OOD accuracy: ERM against IRMv1 (lam=1e4)", CMNIST_BASE,
           (Arm("ERM", {"name": "ERM"}), Arm("IRMv1", {"name": "IRMv1", "lam": 10000.0}))),
    Preset("fig3", "CMNIST OOD calibration across the IRMv1 penalty weight", CMNIST_BASE,
           (Arm("IRMv1", {"name": "IRMv1"}),), "method.lam", SWEEP_VALUES),
    Preset("fig7", "CMNIST IB-IRM bottleneck weight sweep at lam=1e4", CMNIST_BASE,
           (Arm("IBIRM lam=1e4", {"name": "IBIRM", "lam": 10000.0}),), "method.gamma", SWEEP_VALUES),
    Preset("fig8", "CMNIST IB-IRM penalty weight sweep at gamma=1e4", CMNIST_BASE,
           (Arm("IBIRM gamma=1e4", {"name": "IBIRM", "gamma": 10000.0}),), "method.lam", SWEEP_VALUES),
    Preset("table2-rmnist", "RMNIST cross-environment calibration variance under matched early stopping",
           RMNIST_BASE,
           (Arm("ERM", {"name": "ERM"}), Arm("IRMv1", {"name": "IRMv1", "lam": 1.0}),
            Arm("IBIRM", {"name": "IBIRM", "lam": 1.0, "gamma": 0.01})),
           thresholds=(85.0, 88.0, 90.0)),
)}


def preset_config(preset, arm, overrides=(), seeds=None):
    d = {k: dict(v) for k, v in preset.base.items()}
    d["method"] = dict(arm.method)
    cfg = from_dict(apply_overrides(d, overrides))
    if seeds is not None:
        cfg = cfg.with_updates(harness={"seeds": [int(s) for s in seeds]})
    return cfg


def _median(values):
    values = [v for v in values if np.isfinite(v)]
    return float(np.median(values)) if values else float("nan")


def summarize(runs):
    """Medians over seeds of the quantities the figures and tables plot."""
    done = [r for r in runs if r.completed]
    out = {"n_runs": len(runs), "n_completed": len(done), "run_ids": [r.run_id for r in runs]}
    if not done:
        return out
    out["id_accuracy"] = _median([r.val_accuracy for r in done])
    out["ood_accuracy"] = _median([r.test_accuracy for r in done])
    for metric in ("ece", "ace", "nll"):
        out[f"id_{metric}"] = _median([r.mean_metric("val", metric) for r in done])
        out[f"ood_{metric}"] = _median([r.mean_metric("test", metric) for r in done])
        out[f"variance_{metric}"] = _median([r.cross_env[metric].variance for r in done])
    return out


def run_preset(name, out_dir, seeds=None, jobs=1, overrides=(), svg=False):
    """Run a replication target; returns the summary dict also written to ``summary.json``."""
    if name not in PRESETS:
        raise KeyError(f"unknown replicate target {name!r}; choose from {', '.join(PRESETS)}")
    preset = PRESETS[name]
    labelled = []
    sweep_cells = []
    summary = {"target": name, "description": preset.summary, "arms": {}}
    if preset.thresholds:
        configs = {arm.label: preset_config(preset, arm, overrides, seeds) for arm in preset.arms}
        first = next(iter(configs.values()))
        threshold, table = early_stop_threshold_search(configs, preset.thresholds, first.harness.seeds)
        summary["seeds"] = first.harness.seeds
        summary["threshold"] = threshold
        summary["threshold_search"] = {
            f"{t:g}": {label: {"ood_accuracy": [r.test_accuracy if r.completed else None for r in runs],
                               "reached": [r.reached_threshold for r in runs]}
                       for label, runs in per.items()}
            for t, per in table.items()}
        for t, per in table.items():
            for label, runs in per.items():
                for r in runs:
                    emit.emit_run(r, out_dir)
        for label, runs in table[threshold].items():
            labelled.extend((label, r) for r in runs)
            summary["arms"][label] = summarize(runs)
    else:
        for arm in preset.arms:
            cfg = preset_config(preset, arm, overrides, seeds)
            summary["seeds"] = cfg.harness.seeds
            axes = {preset.axis: list(preset.values)} if preset.axis else None
            log.info("%s: %s over seeds %s", name, arm.label, cfg.harness.seeds)
            result = grid_search(cfg, axes, jobs=jobs)
            arm_summary = {}
            for cell in result.cells:
                for r in cell["runs"]:
                    emit.emit_run(r, out_dir)
                if preset.axis:
                    value = cell["params"][preset.axis]
                    sweep_cells.extend((value, arm.label, r) for r in cell["runs"])
                    arm_summary[f"{value:g}"] = summarize(cell["runs"])
                else:
                    labelled.extend((arm.label, r) for r in cell["runs"])
                    arm_summary = summarize(cell["runs"])
            if preset.axis:
                labelled.extend((f"{arm.label} {preset.axis.split('.')[-1]}={v:g}", r) for v, _, r in
                                [c for c in sweep_cells if c[1] == arm.label])
            summary["arms"][arm.label] = arm_summary
    results = [r for _, r in labelled]
    emit.emit_reports(results, emit.output_path(out_dir, "report.csv"))
    emit.emit_plot_data(out_dir, labelled, (preset.axis, sweep_cells) if preset.axis else None)
    if svg:
        emit.render_svg(out_dir, labelled, (preset.axis, sweep_cells) if preset.axis else None)
    emit.write_json(emit.output_path(out_dir, "summary.json"), summary)
    return summary
