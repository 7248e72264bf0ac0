"""Finite-difference checks of analytic parameter gradients for every objective.

Instances with a hidden ReLU pre-activation within ``KINK_MARGIN`` of zero are
redrawn: a finite-difference step there straddles the kink, where the loss is
not differentiable and the comparison says nothing about the gradient code.
"""
import numpy as np

from irmcal import nn
from irmcal import objectives as obj

from oracles import rel_err

STEP = 1e-5
DIMS = [4, 8, 3]
OBJECTIVES = ("ERM", "IRMv1", "IBIRM", "PAIR", "BIRM", "IRMGAME")
KINK_MARGIN = 1e-3


def near_kink(params, X, relu_on_output=False):
    pre = nn.forward(params, X).pre_activations
    hidden = pre if relu_on_output else pre[:-1]
    return any(np.abs(a).min() < KINK_MARGIN for a in hidden)


def params_central_diff(f, params, h=STEP):
    """Central differences of scalar ``f(params)`` for every weight and bias entry."""
    out = []
    for arrays in (params.weights, params.biases):
        grads = []
        for a in arrays:
            g = np.zeros_like(a)
            for i in np.ndindex(a.shape):
                old = a[i]
                a[i] = old + h
                fp = f(params)
                a[i] = old - h
                fm = f(params)
                a[i] = old
                g[i] = (fp - fm) / (2 * h)
            grads.append(g)
        out.append(grads)
    return out


def _flat(weights, biases):
    return np.concatenate([x.ravel() for x in weights] + [x.ravel() for x in biases])


def random_batches(rng, n_envs, k=DIMS[-1], max_batch=16):
    batches = []
    for _ in range(n_envs):
        n = int(rng.integers(2, max_batch + 1))
        batches.append((rng.standard_normal((n, DIMS[0])), rng.integers(0, k, n)))
    return batches


def random_config(rng, method):
    lam = float(10 ** rng.uniform(-1, 1))
    if method == "IBIRM":
        return obj.MethodConfig("IBIRM", lam=lam, gamma=float(10 ** rng.uniform(-1, 1)))
    if method == "PAIR":
        return obj.MethodConfig("PAIR", preference=int(rng.integers(0, 2)))
    if method == "BIRM":
        return obj.MethodConfig("BIRM", lam=lam, birm_sd=0.1, birm_n=int(rng.integers(1, 4)))
    return obj.MethodConfig(method, lam=lam)


def mlp_instance(method, rng):
    """Relative error between backward() and finite differences for one random case."""
    while True:
        params = nn.mlp_init(DIMS, rng)
        for b in params.biases:
            b[:] = rng.standard_normal(b.shape) * 0.1
        batches = random_batches(rng, int(rng.integers(1, 4)) if method != "PAIR" else 2)
        X = np.concatenate([b[0] for b in batches])
        if not near_kink(params, X):
            break
    cfg = random_config(rng, method)
    sizes = np.cumsum([len(b[1]) for b in batches])[:-1]
    ys = [b[1] for b in batches]
    noise = None
    if method == "BIRM":
        noise = [rng.normal(0.0, cfg.birm_sd, cfg.birm_n) for _ in batches]

    def total(p):
        zs = np.split(nn.forward(p, X).logits, sizes)
        return obj.assemble_total(cfg, obj.method_objectives(cfg, zs, ys, birm_noise=noise))[0]

    trace = nn.forward(params, X)
    zs = np.split(trace.logits, sizes)
    _, seeds = obj.assemble_total(cfg, obj.method_objectives(cfg, zs, ys, birm_noise=noise))
    g = nn.backward(params, trace, np.concatenate(seeds))
    fw, fb = params_central_diff(total, params)
    return rel_err(_flat(g.weights, g.biases), _flat(fw, fb))


def game_instance(rng):
    """Head-e gradient of the ensemble loss (1/|E| factor included) against finite differences."""
    n_envs = int(rng.integers(2, 4))
    variant = "V" if rng.random() < 0.5 else "F"
    while True:
        game = obj.game_init(DIMS, n_envs, variant, rng)
        X, y = random_batches(rng, 1)[0]
        batches = random_batches(rng, n_envs)
        if game.featurizer is None or not any(
                near_kink(game.featurizer, Xb, relu_on_output=True) for Xb in [X] + [b[0] for b in batches]):
            break
    e = int(rng.integers(0, n_envs))
    feats, _ = obj.game_features(game, X)
    _, grad, _ = obj.game_head_loss(game, feats, y, e)

    def loss(head):
        g2 = game.copy()
        g2.heads[e] = head
        return nn.cross_entropy(obj.game_predict_logits(g2, X), y)[0]

    fw, fb = params_central_diff(loss, game.heads[e].copy())
    err = rel_err(_flat(grad.weights, grad.biases), _flat(fw, fb))
    if variant == "V":
        _, fgrad = obj.game_featurizer_grad(game, batches)

        def feat_loss(phi):
            g2 = game.copy()
            g2.featurizer = phi
            return sum(nn.cross_entropy(obj.game_predict_logits(g2, Xb), yb)[0] for Xb, yb in batches)

        fw, fb = params_central_diff(feat_loss, game.featurizer.copy())
        err = max(err, rel_err(_flat(fgrad.weights, fgrad.biases), _flat(fw, fb)))
    return err


def instance(method, rng):
    return game_instance(rng) if method == "IRMGAME" else mlp_instance(method, rng)
