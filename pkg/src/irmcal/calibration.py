"""Calibration metrics per environment and their spread across environments.

``ece`` and ``ace`` return fractions in [0, 1]; :func:`evaluate` converts
accuracy/ECE/ACE to percent for reporting, NLL stays in nats.
"""
import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .linalg import population_variance

DEFAULT_BINS = 15
NLL_CLAMP = 1e-12
METRICS = ("accuracy", "ece", "ace", "nll")
CSV_COLUMNS = ("run_id", "method", "dataset", "env_id", "split", "metric", "value", "seed")


@dataclass
class PredictionSet:
    probs: np.ndarray
    labels: np.ndarray
    env_id: str = ""

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).ravel()
        if self.probs.ndim != 2:
            raise ValueError("probs must be an (n, K) matrix")
        n, k = self.probs.shape
        if self.labels.shape[0] != n:
            raise ValueError(f"{self.labels.shape[0]} labels for {n} predictions")
        if n and (self.labels.min() < 0 or self.labels.max() >= k):
            raise ValueError(f"labels must lie in [0, {k})")
        if n and not np.allclose(self.probs.sum(axis=1), 1.0, rtol=0, atol=1e-9):
            raise ValueError("probability rows must sum to 1")

    def __len__(self):
        return self.labels.shape[0]


@dataclass
class BinStats:
    bin: int
    lo: float
    hi: float
    count: int
    acc: float
    conf: float


def _as_preds(preds, labels=None):
    if isinstance(preds, PredictionSet):
        return preds
    return PredictionSet(preds, labels)


def _bin_edges(n_bins):
    return np.arange(n_bins + 1) / n_bins


def ece(preds, n_bins=DEFAULT_BINS, labels=None):
    """Expected calibration error over equal-width top-label confidence bins.

    Bins are half-open on the left, ``(m/M, (m+1)/M]``; empty bins contribute 0.
    Returns ``(value, bins)`` with ``bins`` a list of :class:`BinStats`.
    """
    preds = _as_preds(preds, labels)
    n = len(preds)
    if n == 0:
        raise ValueError("ece of an empty prediction set")
    conf = preds.probs.max(axis=1)
    correct = preds.probs.argmax(axis=1) == preds.labels
    edges = _bin_edges(n_bins)
    idx = np.clip(np.searchsorted(edges, conf, side="left") - 1, 0, n_bins - 1)
    value = 0.0
    bins = []
    for m in range(n_bins):
        mask = idx == m
        count = int(mask.sum())
        if count:
            acc = float(correct[mask].mean())
            c = float(conf[mask].mean())
            value += count / n * abs(acc - c)
        else:
            acc = c = 0.0
        bins.append(BinStats(m, float(edges[m]), float(edges[m + 1]), count, acc, c))
    return value, bins


def ace(preds, n_bins=DEFAULT_BINS, labels=None):
    """Adaptive calibration error with per-class equal-count bins.

    For each class the n class-probabilities are sorted and cut into ``n_bins``
    runs of ``n // n_bins`` samples; the remainder joins the last bin.
    """
    preds = _as_preds(preds, labels)
    n, k = preds.probs.shape
    if n < n_bins:
        raise ValueError(f"ace needs at least {n_bins} samples, got {n}")
    size = n // n_bins
    total = 0.0
    for cls in range(k):
        p = preds.probs[:, cls]
        order = np.argsort(p, kind="stable")
        hit = preds.labels[order] == cls
        ps = p[order]
        for m in range(n_bins):
            stop = n if m == n_bins - 1 else (m + 1) * size
            sl = slice(m * size, stop)
            total += abs(hit[sl].mean() - ps[sl].mean())
    return float(total / (k * n_bins))


def nll(preds, labels=None):
    """Mean negative log-likelihood of the true label, in nats."""
    preds = _as_preds(preds, labels)
    if len(preds) == 0:
        raise ValueError("nll of an empty prediction set")
    p = preds.probs[np.arange(len(preds)), preds.labels]
    return float(-np.log(np.maximum(p, NLL_CLAMP)).mean())


def accuracy(preds, labels=None):
    """Top-1 accuracy in percent; ties go to the lowest class index."""
    preds = _as_preds(preds, labels)
    if len(preds) == 0:
        raise ValueError("accuracy of an empty prediction set")
    return float(100.0 * (preds.probs.argmax(axis=1) == preds.labels).mean())


def cross_env_variance(values):
    values = list(values.values()) if isinstance(values, dict) else list(values)
    if len(values) < 2:
        raise ValueError("cross-environment variance needs at least two environments")
    return population_variance(values)


def reliability_data(preds, n_bins=DEFAULT_BINS, labels=None):
    """Bin table for reliability diagrams, one dict per bin (empty bins included)."""
    _, bins = ece(preds, n_bins, labels)
    return [asdict(b) for b in bins]


def ece_from_table(table):
    n = sum(row["count"] for row in table)
    return sum(row["count"] / n * abs(row["acc"] - row["conf"]) for row in table if row["count"])


@dataclass
class EnvCalibration:
    env_id: str
    split: str
    n: int
    accuracy: float
    ece: float
    ace: float
    nll: float
    bins: list = field(default_factory=list)

    def metric(self, name):
        return getattr(self, name)


@dataclass
class CrossEnvReport:
    metric: str
    values: dict
    variance: float


def evaluate(preds, split="test", n_bins=DEFAULT_BINS):
    """Accuracy/ECE/ACE in percent and NLL in nats for one environment."""
    e, bins = ece(preds, n_bins)
    a = ace(preds, n_bins) if len(preds) >= n_bins else float("nan")
    return EnvCalibration(str(preds.env_id), split, len(preds), accuracy(preds), 100.0 * e, 100.0 * a,
                          nll(preds), [asdict(b) for b in bins])


def cross_env_reports(env_reports, include=None):
    """Variance of each metric across environments.

    ``include`` filters env reports (e.g. to drop the test environment).
    """
    reps = [r for r in env_reports if include is None or include(r)]
    out = {}
    for metric in METRICS:
        values = {r.env_id: r.metric(metric) for r in reps}
        out[metric] = CrossEnvReport(metric, values, cross_env_variance(values))
    return out


def report_rows(env_reports, run_id="", method="", dataset="", seed=""):
    rows = []
    for r in env_reports:
        for metric in METRICS:
            rows.append({"run_id": run_id, "method": method, "dataset": dataset, "env_id": r.env_id,
                         "split": r.split, "metric": metric, "value": r.metric(metric), "seed": seed})
    return rows


def write_csv(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            out = dict(row)
            out["value"] = repr(float(out["value"]))
            writer.writerow(out)


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        row["value"] = float(row["value"])
    return rows


def report_to_json(env_reports, cross=None, **meta):
    doc = dict(meta)
    doc["environments"] = [asdict(r) for r in env_reports]
    if cross is not None:
        doc["cross_env"] = {k: asdict(v) for k, v in cross.items()}
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=True)
