"""A small ReLU MLP with seeded reverse-mode gradients and Adam.

``backward`` takes the derivative of an arbitrary scalar objective with respect
to the logits (the "seed") and pushes it back through a recorded forward pass.
Every training objective in :mod:`irmcal.objectives` is expressed as such a
seed, so one reverse pass per batch is enough.
"""
from dataclasses import dataclass, field

import numpy as np

from .linalg import DimensionError, NonFiniteError, as_matrix, rowwise_log_softmax, rowwise_softmax

CHECKPOINT_FORMAT = "irmcal-mlp"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    """Raised for malformed network or training configuration."""


@dataclass
class MLPParams:
    layer_dims: list
    weights: list
    biases: list

    def __post_init__(self):
        self.layer_dims = [int(d) for d in self.layer_dims]
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise ConfigError("layer count does not match layer_dims")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.layer_dims[l], self.layer_dims[l + 1]):
                raise ConfigError(f"weights[{l}] has shape {w.shape}")
            if b.shape != (self.layer_dims[l + 1],):
                raise ConfigError(f"biases[{l}] has shape {b.shape}")

    @property
    def n_layers(self):
        return len(self.weights)

    def copy(self):
        return MLPParams(list(self.layer_dims), [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def flat(self):
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(self.weights, self.biases)])

    def zeros_like(self):
        return MLPParams(list(self.layer_dims), [np.zeros_like(w) for w in self.weights],
                         [np.zeros_like(b) for b in self.biases])


# Gradients have exactly the parameter layout.
MLPGrads = MLPParams


@dataclass
class ForwardTrace:
    inputs: np.ndarray
    pre_activations: list = field(default_factory=list)
    activations: list = field(default_factory=list)

    @property
    def logits(self):
        return self.pre_activations[-1]


@dataclass
class AdamState:
    m: MLPParams
    v: MLPParams
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params):
        return cls(m=params.zeros_like(), v=params.zeros_like())


def mlp_init(layer_dims, seed):
    """He-scaled Gaussian weights, zero biases.

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    dims = list(layer_dims)
    if len(dims) < 2 or any(int(d) != d or d <= 0 for d in dims):
        raise ConfigError(f"invalid layer_dims {layer_dims!r}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append(rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in))
        biases.append(np.zeros(fan_out))
    return MLPParams(dims, weights, biases)


def forward(params, X):
    X = as_matrix(X, "X")
    if X.shape[1] != params.layer_dims[0]:
        raise DimensionError(f"input has {X.shape[1]} columns, network expects {params.layer_dims[0]}")
    trace = ForwardTrace(inputs=X)
    h = X
    last = params.n_layers - 1
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        a = h @ w + b
        trace.pre_activations.append(a)
        h = a if l == last else np.maximum(a, 0.0)
        trace.activations.append(h)
    return trace


def backward(params, trace, seed, return_input_grad=False):
    """Gradient of a scalar objective w.r.t. the parameters.

    ``seed`` is d(objective)/d(logits) with the logits' shape.
    """
    seed = as_matrix(seed, "seed")
    if seed.shape != trace.logits.shape:
        raise DimensionError(f"seed shape {seed.shape} != logits shape {trace.logits.shape}")
    gw = [None] * params.n_layers
    gb = [None] * params.n_layers
    delta = seed
    for l in range(params.n_layers - 1, -1, -1):
        h_in = trace.inputs if l == 0 else trace.activations[l - 1]
        gw[l] = h_in.T @ delta
        gb[l] = delta.sum(axis=0)
        if l > 0 or return_input_grad:
            delta = delta @ params.weights[l].T
            if l > 0:
                delta = delta * (trace.pre_activations[l - 1] > 0)
    grads = MLPParams(list(params.layer_dims), gw, gb)
    if return_input_grad:
        return grads, delta
    return grads


def cross_entropy(z, y):
    """Mean cross-entropy and its logit seed ``(p - onehot(y)) / n``."""
    z = as_matrix(z, "logits")
    y = np.asarray(y, dtype=np.int64).ravel()
    n, k = z.shape
    if y.shape[0] != n:
        raise DimensionError(f"{y.shape[0]} labels for {n} rows")
    if n == 0:
        raise ValueError("cross_entropy of an empty batch")
    if y.min() < 0 or y.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    logp = rowwise_log_softmax(z)
    rows = np.arange(n)
    risk = -logp[rows, y].mean()
    seed = rowwise_softmax(z)
    seed[rows, y] -= 1.0
    seed /= n
    return float(risk), seed


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update. Returns new (params, state); inputs are untouched."""
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_w, new_b, mw, mb, vw, vb = [], [], [], [], [], []
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for l in range(params.n_layers):
        for p, g, m, v, p_out, m_out, v_out in (
            (params.weights[l], grads.weights[l], state.m.weights[l], state.v.weights[l], new_w, mw, vw),
            (params.biases[l], grads.biases[l], state.m.biases[l], state.v.biases[l], new_b, mb, vb),
        ):
            m1 = b1 * m + (1.0 - b1) * g
            v1 = b2 * v + (1.0 - b2) * g * g
            p_out.append(p - lr * (m1 / c1) / (np.sqrt(v1 / c2) + state.eps))
            m_out.append(m1)
            v_out.append(v1)
    dims = list(params.layer_dims)
    new_state = AdamState(MLPParams(dims, mw, mb), MLPParams(dims, vw, vb), t, b1, b2, state.eps)
    out = MLPParams(dims, new_w, new_b)
    for w in out.weights:
        if not np.all(np.isfinite(w)):
            raise NonFiniteError("Adam produced non-finite parameters")
    return out, new_state


def save_params(path, params):
    arrays = {"format": np.array(CHECKPOINT_FORMAT), "version": np.array(CHECKPOINT_VERSION),
              "layer_dims": np.asarray(params.layer_dims, dtype=np.int64)}
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        arrays[f"W{l}"] = w
        arrays[f"b{l}"] = b
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_params(path):
    with np.load(path, allow_pickle=False) as data:
        if str(data["format"]) != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not an {CHECKPOINT_FORMAT} checkpoint")
        if int(data["version"]) != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {int(data['version'])}")
        dims = [int(d) for d in data["layer_dims"]]
        weights = [data[f"W{l}"].astype(np.float64) for l in range(len(dims) - 1)]
        biases = [data[f"b{l}"].astype(np.float64) for l in range(len(dims) - 1)]
    return MLPParams(dims, weights, biases)
