"""Experiment execution: single runs, grid sweeps, early-stop threshold search."""
import functools
import itertools
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import calibration as cal
from . import datasets as ds
from .config import RNG_NAME, DatasetConfig, ExperimentConfig, rng_stream
from .linalg import NonFiniteError
from .training import EpochSampler, Trainer

log = logging.getLogger(__name__)


@dataclass
class EnvSplits:
    train: list
    val: list
    test: list
    n_features: int
    n_classes: int


@dataclass
class RunResult:
    run_id: str
    config: ExperimentConfig
    seed: int
    trajectory: list = field(default_factory=list)
    reports: list = None
    cross_env: dict = None
    failed: bool = False
    error: str = ""
    steps: int = 0
    stopped_early: bool = False
    reached_threshold: bool = True
    wall_clock: float = 0.0
    rng: str = RNG_NAME

    @property
    def completed(self):
        return not self.failed and self.reports is not None

    def report(self, split):
        return [r for r in (self.reports or []) if r.split == split]

    @property
    def test_accuracy(self):
        return float(np.mean([r.accuracy for r in self.report("test")]))

    @property
    def val_accuracy(self):
        return float(np.mean([r.accuracy for r in self.report("val")]))

    def mean_metric(self, split, metric):
        return float(np.mean([r.metric(metric) for r in self.report(split)]))


@functools.lru_cache(maxsize=4)
def _mnist(directory, split):
    return ds.load_mnist(directory or None, split)


@functools.lru_cache(maxsize=8)
def _generate(dataset_key, seed):
    dcfg = DatasetConfig(**json.loads(dataset_key))
    rng = rng_stream(seed, "data")
    data_seed = int(rng.integers(2 ** 31))
    if dcfg.name == "twobit":
        return ds.make_twobit(dcfg.n_per_env, dcfg.train_envs, dcfg.label_noise, data_seed, dcfg.test_envs)
    raw = _mnist(dcfg.mnist_dir, "train").head(dcfg.n_images)
    if dcfg.name == "cmnist":
        spec = ds.CmnistSpec(dcfg.train_envs, dcfg.test_envs, dcfg.label_noise, dcfg.downsample, data_seed)
        return ds.make_cmnist(raw, spec)
    return ds.make_rmnist(raw, ds.RmnistSpec(dcfg.train_envs, dcfg.test_envs, data_seed))


def build_envs(config, seed):
    """Generate environments for ``seed`` and split training environments 80/20."""
    dcfg = config.dataset
    envs = _generate(json.dumps(asdict(dcfg), sort_keys=True), int(seed))
    split_rng = rng_stream(seed, "split")
    train, val, test = [], [], []
    for env in envs:
        if env.split == "test":
            test.append(env)
        else:
            tr, va = ds.split_train_val(env, dcfg.train_fraction, int(split_rng.integers(2 ** 31)))
            train.append(tr)
            val.append(va)
    return EnvSplits(train, val, test, envs[0].X.shape[1], envs[0].n_classes)


def _evaluate_all(trainer, splits, n_bins):
    reports = []
    for split, envs in (("val", splits.val), ("test", splits.test)):
        for env in envs:
            preds = cal.PredictionSet(trainer.predict_proba(env.X), env.y, env.env_id)
            reports.append(cal.evaluate(preds, split, n_bins))
    return reports


def _cross(config, reports):
    include = None if config.harness.variance_includes_test else (lambda r: r.split != "test")
    return cal.cross_env_reports(reports, include)


def _stop_metric(config, val_accs):
    return min(val_accs) if config.harness.early_stop_rule == "min" else float(np.mean(val_accs))


def _accuracy(trainer, env):
    return 100.0 * float((trainer.logits(env.X).argmax(axis=1) == env.y).mean())


def train_run(config, seed=None, thresholds=None):
    """Train one configuration for one seed.

    With ``thresholds`` (a list of validation-accuracy levels) the run continues
    until the largest one is reached and returns ``{threshold: RunResult}``, each
    result being the model state at the first evaluation that crossed that
    level, i.e. exactly what a run early-stopped at that threshold produces.
    """
    seed = config.harness.seeds[0] if seed is None else int(seed)
    start = time.perf_counter()
    h = config.harness
    splits = build_envs(config, seed)
    dims = [splits.n_features] + list(config.hidden) + [splits.n_classes]
    trainer = Trainer(config.method, dims, len(splits.train), config.optimizer.lr, rng_stream(seed, "init"),
                      rng_stream(seed, "birm"), h.penalty_anneal_steps, config.optimizer.weight_decay)
    order_rng = rng_stream(seed, "order")
    samplers = [EpochSampler(len(env), config.batch_size, order_rng) for env in splits.train]
    run_id = f"{config.config_hash()}-s{seed}"

    levels = sorted(set(thresholds)) if thresholds else ([h.early_stop] if h.early_stop > 0 else [])
    snapshots = {}
    trajectory = []

    def make_result(reports, steps, stopped, reached=True, failed=False, error="", level=None):
        rid = run_id if not thresholds or level is None else f"{run_id}-t{level:g}"
        return RunResult(rid, config, seed, list(trajectory), reports,
                         _cross(config, reports) if reports else None, failed, error, steps, stopped, reached,
                         time.perf_counter() - start)

    def record(step, objective, risk):
        val_accs = [_accuracy(trainer, env) for env in splits.val]
        row = {"step": step, "objective": objective, "risk": risk}
        row.update({f"val_acc/{env.env_id}": a for env, a in zip(splits.val, val_accs)})
        row.update({f"test_acc/{env.env_id}": _accuracy(trainer, env) for env in splits.test})
        trajectory.append(row)
        return _stop_metric(config, val_accs)

    objective = risk = float("nan")
    step = 0
    try:
        metric = record(0, objective, risk)
        for level in levels:
            if level not in snapshots and metric >= level:
                snapshots[level] = make_result(_evaluate_all(trainer, splits, h.n_bins), 0, True, level=level)
        while step < h.max_steps and not (levels and len(snapshots) == len(levels)):
            batches = []
            for env, sampler in zip(splits.train, samplers):
                idx = sampler.next()
                batches.append((env.X[idx], env.y[idx]))
            objective, risk = trainer.step(batches)
            step += 1
            if step % h.eval_interval == 0 or step == h.max_steps:
                metric = record(step, objective, risk)
                for level in levels:
                    if level not in snapshots and metric >= level:
                        snapshots[level] = make_result(_evaluate_all(trainer, splits, h.n_bins), step, True,
                                                       level=level)
    except NonFiniteError as exc:
        log.warning("run %s diverged: %s", run_id, exc)
        if thresholds:
            return {lv: snapshots.get(lv) or make_result(None, step, False, failed=True, error=str(exc), level=lv)
                    for lv in levels}
        failed = make_result(None, step, False, failed=True, error=str(exc))
        return failed

    if thresholds:
        missing = [lv for lv in levels if lv not in snapshots]
        final = _evaluate_all(trainer, splits, h.n_bins) if missing else None
        for lv in missing:
            snapshots[lv] = make_result(final, step, False, reached=False, level=lv)
        return {lv: snapshots[lv] for lv in levels}
    if levels and levels[0] in snapshots:
        return snapshots[levels[0]]
    return make_result(_evaluate_all(trainer, splits, h.n_bins), step, False, reached=not levels)


@dataclass
class SweepResult:
    cells: list
    selection: str
    best: object = None
    aggregate: dict = field(default_factory=dict)


def selection_score(result, rule):
    return result.test_accuracy if rule == "oracle_test_acc" else result.val_accuracy


def _value_key(v):
    return (0, v, "") if isinstance(v, (int, float)) and not isinstance(v, bool) else (1, 0, repr(v))


def grid_cells(base, axes):
    """Configs for the Cartesian product of ``axes`` ({"section.key": [values]})."""
    if not axes:
        return [({}, base)]
    keys = sorted(axes)
    out = []
    # sorted values make tie-breaking in selection independent of the order given
    for values in itertools.product(*(sorted(set(axes[k]), key=_value_key) for k in keys)):
        updates = {}
        for k, v in zip(keys, values):
            section, name = k.split(".", 1)
            updates.setdefault(section, {})[name] = v
        out.append((dict(zip(keys, values)), base.with_updates(**updates)))
    return out


def _run_cell(args):
    config, seed = args
    return train_run(config, seed)


def aggregate_runs(runs, split="test"):
    """Mean and standard deviation over seeds of every metric plus cross-env variances."""
    done = [r for r in runs if r.completed]
    out = {}
    if not done:
        return out
    for metric in cal.METRICS:
        vals = [r.mean_metric(split, metric) for r in done]
        out[f"{split}_{metric}"] = (float(np.mean(vals)), float(np.std(vals)))
        var = [r.cross_env[metric].variance for r in done]
        out[f"variance_{metric}"] = (float(np.mean(var)), float(np.std(var)))
    return out


def grid_search(base, axes=None, seeds=None, runner=train_run, jobs=1):
    """Train every grid cell for every seed and select the best cell.

    A cell's score is the seed-mean of the selection criterion (oracle test
    accuracy or validation accuracy); failed runs are excluded. Ties go to the
    earliest cell in sorted-grid order so the result is independent of
    execution order.
    """
    seeds = list(base.harness.seeds if seeds is None else seeds)
    cells = grid_cells(base, axes or {})
    jobs_list = [(cfg, s) for _, cfg in cells for s in seeds]
    if jobs > 1 and runner is train_run:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            flat = list(pool.map(_run_cell, jobs_list))
    else:
        flat = [runner(cfg, s) for cfg, s in jobs_list]
    rule = base.selection
    table = []
    for i, (params, cfg) in enumerate(cells):
        runs = flat[i * len(seeds):(i + 1) * len(seeds)]
        ok = [r for r in runs if r.completed]
        score = float(np.mean([selection_score(r, rule) for r in ok])) if ok else float("nan")
        table.append({"params": params, "config": cfg, "runs": runs, "score": score,
                      "aggregate": aggregate_runs(runs)})
    scored = [c for c in table if np.isfinite(c["score"])]
    best = max(scored, key=lambda c: c["score"]) if scored else None
    return SweepResult(table, rule, best, best["aggregate"] if best else {})


def early_stop_threshold_search(configs, thresholds, seeds=(0,), runner=None):
    """Threshold minimising the across-method variance of OOD accuracy.

    ``configs`` maps a method label to its config. ``runner(config, seed,
    thresholds)`` must return ``{threshold: RunResult}``; thresholds that some
    method never reaches are excluded. Returns ``(threshold, table)`` where
    ``table[threshold][label]`` lists the per-seed results.
    """
    thresholds = sorted(set(float(t) for t in thresholds))
    if not thresholds:
        raise ValueError("no candidate thresholds")
    runner = runner or train_run
    table = {t: {label: [] for label in configs} for t in thresholds}
    for label, cfg in configs.items():
        for s in seeds:
            for t, res in runner(cfg, s, thresholds).items():
                table[t][label].append(res)
    if len(thresholds) == 1:
        return thresholds[0], table
    best, best_var = None, np.inf
    for t in thresholds:
        accs = []
        for label, runs in table[t].items():
            ok = [r for r in runs if r.completed and r.reached_threshold]
            if len(ok) < len(runs) or not ok:
                accs = None
                break
            accs.append(float(np.mean([r.test_accuracy for r in ok])))
        if accs is None:
            continue
        var = float(np.var(accs))
        if var < best_var:
            best, best_var = t, var
    if best is None:
        raise RuntimeError("no candidate threshold was reached by every method")
    return best, table
