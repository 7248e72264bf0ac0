"""Minibatch training for every method, shared by the harness and the estimator."""
from dataclasses import replace

import numpy as np

from . import nn
from . import objectives as obj
from .linalg import rowwise_softmax


class EpochSampler:
    """Shuffled minibatches without replacement; reshuffles when an epoch runs out."""

    def __init__(self, n, batch_size, rng):
        self.n = int(n)
        self.batch_size = min(int(batch_size), self.n)
        self.rng = rng
        self._perm = None
        self._pos = 0

    def next(self):
        if self._perm is None or self._pos + self.batch_size > self.n:
            self._perm = self.rng.permutation(self.n)
            self._pos = 0
        idx = self._perm[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx


def annealed(config, step, anneal_steps):
    """Penalty weights capped at 1 before ``anneal_steps``; unchanged afterwards."""
    if anneal_steps <= 0 or step >= anneal_steps:
        return config
    return replace(config, lam=min(config.lam, 1.0), gamma=min(config.gamma, 1.0), preference=0)


def loss_scale(config):
    """Largest penalty weight in use; the step objective is divided by it when > 1."""
    if config.method == "PAIR":
        return 10.0 ** config.preference
    weights = {"IRMv1": [config.lam], "IBIRM": [config.lam, config.gamma], "BIRM": [config.lam]}
    return max([1.0] + weights.get(config.method, []))


class Trainer:
    """Holds a model and its optimizer state for one method.

    ``step`` consumes one ``(X, y)`` batch per training environment.
    """

    def __init__(self, method, layer_dims, n_envs, lr, init_rng, birm_rng=None, anneal_steps=0,
                 weight_decay=0.0, normalize_loss=True):
        self.method = method
        self.layer_dims = list(layer_dims)
        self.n_envs = int(n_envs)
        self.lr = float(lr)
        self.birm_rng = birm_rng if birm_rng is not None else np.random.default_rng(0)
        self.anneal_steps = int(anneal_steps)
        self.weight_decay = float(weight_decay)
        self.normalize_loss = normalize_loss
        self.t = 0
        if method.method == "IRMGAME":
            self.model = obj.game_init(self.layer_dims, self.n_envs, method.irmgame_variant, init_rng)
            self.state = obj.GameOptState.zeros(self.model)
        else:
            self.model = nn.mlp_init(self.layer_dims, init_rng)
            self.state = nn.AdamState.zeros(self.model)

    def step(self, batches):
        """One optimisation step. Returns ``(objective, mean_risk)``."""
        if len(batches) != self.n_envs:
            raise ValueError(f"expected {self.n_envs} environment batches, got {len(batches)}")
        if self.method.method == "IRMGAME":
            self.model, self.state, risks = obj.irmgame_round(self.model, batches, self.state, self.lr)
            self.t += 1
            total = float(np.sum(risks))
            return total, total / len(risks)
        cfg = annealed(self.method, self.t, self.anneal_steps)
        X = np.concatenate([b[0] for b in batches])
        sizes = [len(b[1]) for b in batches]
        trace = nn.forward(self.model, X)
        zs = np.split(trace.logits, np.cumsum(sizes)[:-1])
        objs = obj.method_objectives(cfg, zs, [b[1] for b in batches], rng=self.birm_rng)
        total, seeds = obj.assemble_total(cfg, objs)
        if not np.isfinite(total):
            raise nn.NonFiniteError(f"non-finite objective at step {self.t}")
        scale = loss_scale(cfg) if self.normalize_loss else 1.0
        grads = nn.backward(self.model, trace, np.concatenate(seeds) / scale)
        if self.weight_decay:
            # L2 on weights only, scaled with the rest of the objective
            total += self.weight_decay * sum(float((w * w).sum()) for w in self.model.weights)
            for g, w in zip(grads.weights, self.model.weights):
                g += (2.0 * self.weight_decay / scale) * w
        self.model, self.state = nn.adam_step(self.model, grads, self.state, self.lr)
        self.t += 1
        return total, float(np.mean([o.risk for o in objs]))

    def logits(self, X, chunk=4096):
        out = []
        for start in range(0, X.shape[0], chunk):
            xb = X[start:start + chunk]
            if self.method.method == "IRMGAME":
                out.append(obj.game_predict_logits(self.model, xb))
            else:
                out.append(nn.forward(self.model, xb).logits)
        return np.concatenate(out) if out else np.zeros((0, self.layer_dims[-1]))

    def predict_proba(self, X):
        return rowwise_softmax(self.logits(X))
