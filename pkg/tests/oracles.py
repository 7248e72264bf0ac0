"""Independent reference implementations used as test oracles.

Nothing here imports the code under test except for data containers.
"""
import math

import numpy as np


def central_diff(f, x, h=1e-5):
    """Central finite-difference gradient of scalar ``f`` at array ``x`` (copied)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), floor))


def loop_softmax(row):
    m = max(row)
    e = [math.exp(v - m) for v in row]
    s = sum(e)
    return [v / s for v in e]


def loop_cross_entropy(z, y):
    total = 0.0
    for row, label in zip(z.tolist(), list(y)):
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        total += lse - row[label]
    return total / len(y)


def loop_ece(probs, labels, n_bins):
    n = len(labels)
    conf = []
    correct = []
    for row, label in zip(probs.tolist(), list(labels)):
        best = 0
        for k in range(1, len(row)):
            if row[k] > row[best]:
                best = k
        conf.append(row[best])
        correct.append(1.0 if best == label else 0.0)
    total = 0.0
    for m in range(n_bins):
        lo, hi = m / n_bins, (m + 1) / n_bins
        members = [i for i in range(n) if (lo < conf[i] <= hi) or (m == 0 and conf[i] <= lo)]
        if members:
            acc = sum(correct[i] for i in members) / len(members)
            c = sum(conf[i] for i in members) / len(members)
            total += len(members) / n * abs(acc - c)
    return total


def loop_ace(probs, labels, n_bins):
    n, k = probs.shape
    size = n // n_bins
    total = 0.0
    for cls in range(k):
        pairs = sorted(((probs[i, cls], i) for i in range(n)), key=lambda t: t[0])
        for m in range(n_bins):
            members = pairs[m * size:] if m == n_bins - 1 else pairs[m * size:(m + 1) * size]
            acc = sum(1.0 for _, i in members if labels[i] == cls) / len(members)
            c = sum(p for p, _ in members) / len(members)
            total += abs(acc - c)
    return total / (k * n_bins)


def loop_nll(probs, labels):
    return -sum(math.log(max(probs[i, labels[i]], 1e-12)) for i in range(len(labels))) / len(labels)


def loop_accuracy(probs, labels):
    hits = 0
    for row, label in zip(probs.tolist(), list(labels)):
        best = 0
        for k in range(1, len(row)):
            if row[k] > row[best]:
                best = k
        hits += best == label
    return 100.0 * hits / len(labels)


def random_prediction_set(rng, n=None, k=None, sharp=None):
    n = n or int(rng.integers(15, 80))
    k = k or int(rng.integers(2, 6))
    sharp = rng.uniform(0.1, 5.0) if sharp is None else sharp
    z = rng.standard_normal((n, k)) * sharp
    p = np.exp(z - z.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    y = rng.integers(0, k, n)
    return p, y
