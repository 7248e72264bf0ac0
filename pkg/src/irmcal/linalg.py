"""Dense float64 helpers shared by the network, objectives and metrics.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64, row-major,
with the batch along the rows.
"""
import numpy as np


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(ValueError):
    """Raised when an input or a result contains NaN or Inf."""


def as_matrix(a, name="matrix"):
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def _check_finite(m, name):
    if not np.all(np.isfinite(m)):
        raise NonFiniteError(f"{name} contains non-finite entries")


def matmul(a, b):
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    out = a @ b
    _check_finite(out, "product")
    return out


def rowwise_softmax(z):
    """Softmax of each row, stabilised by subtracting the row maximum."""
    z = as_matrix(z, "logits")
    _check_finite(z, "logits")
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def rowwise_log_softmax(z):
    z = as_matrix(z, "logits")
    _check_finite(z, "logits")
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def colwise_mean_var(z):
    """Per-column mean and population variance (divides by the row count)."""
    z = as_matrix(z, "input")
    if z.shape[0] == 0 or z.shape[1] == 0:
        raise ValueError("colwise_mean_var needs a non-empty matrix")
    _check_finite(z, "input")
    mean = z.mean(axis=0)
    # centring on the first row keeps constant columns at exactly zero
    d = z - z[0]
    var = ((d - d.mean(axis=0)) ** 2).mean(axis=0)
    return mean, var


def population_variance(values):
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("variance of an empty sequence")
    d = v - v[0]
    return float(((d - d.mean()) ** 2).mean())
