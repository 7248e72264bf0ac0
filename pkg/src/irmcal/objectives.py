"""Training objectives: ERM and the IRM family, as (value, logit-seed) pairs.

Every penalty here is a function of one environment's logits ``z`` (plus labels),
so its parameter gradient is ``backward(params, trace, seed)`` with the analytic
``seed = d(penalty)/dz``. The second-order structure of the IRMv1 penalty (the
gradient of a squared gradient) is folded into those closed forms.

Conventions shared by all objectives: the total objective of a step is
``sum_e (risk_e + penalty_e)`` where ``penalty_e`` already carries the method's
weights, and ``seed_e`` is d(total)/d(z_e).
"""
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .linalg import DimensionError, as_matrix, rowwise_softmax

METHODS = ("ERM", "IRMv1", "IBIRM", "PAIR", "IRMGAME", "BIRM")
PAIR_PREFERENCES = (0, 1, 2, 3, 4)

_ALIASES = {m.lower(): m for m in METHODS}
_ALIASES.update({"ib-irm": "IBIRM", "ib_irm": "IBIRM", "irm": "IRMv1", "irm-game": "IRMGAME",
                 "irm_game": "IRMGAME"})


def canonical_method(name):
    try:
        return _ALIASES[str(name).lower()]
    except KeyError:
        raise nn.ConfigError(f"unknown method {name!r}; expected one of {', '.join(METHODS)}") from None


@dataclass
class MethodConfig:
    method: str = "ERM"
    lam: float = 1.0
    gamma: float = 1.0
    preference: int = 0
    birm_sd: float = 0.1
    birm_n: int = 5
    irmgame_variant: str = "V"

    def __post_init__(self):
        self.method = canonical_method(self.method)
        self.lam = float(self.lam)
        self.gamma = float(self.gamma)
        if self.lam < 0 or self.gamma < 0:
            raise nn.ConfigError("lam and gamma must be non-negative")
        if int(self.preference) != self.preference or self.preference < 0:
            raise nn.ConfigError("preference must be a non-negative integer")
        self.preference = int(self.preference)
        if self.method == "PAIR" and self.preference not in PAIR_PREFERENCES:
            raise nn.ConfigError(f"PAIR preference must be one of {PAIR_PREFERENCES}")
        if not self.birm_sd > 0:
            raise nn.ConfigError("birm_sd must be positive")
        if int(self.birm_n) != self.birm_n or self.birm_n < 1:
            raise nn.ConfigError("birm_n must be a positive integer")
        self.birm_n = int(self.birm_n)
        self.irmgame_variant = str(self.irmgame_variant).upper()
        if self.irmgame_variant not in ("F", "V"):
            raise nn.ConfigError("irmgame_variant must be 'F' or 'V'")


@dataclass
class EnvObjective:
    env_id: str
    risk: float
    penalty: float
    seed: np.ndarray
    method: str = "ERM"
    components: dict = field(default_factory=dict)

    @property
    def total(self):
        return self.risk + self.penalty


def _onehot(y, k):
    y = np.asarray(y, dtype=np.int64).ravel()
    out = np.zeros((y.shape[0], k))
    out[np.arange(y.shape[0]), y] = 1.0
    return out


def _check_envs(zs, ys):
    if len(zs) != len(ys):
        raise DimensionError(f"{len(zs)} logit batches for {len(ys)} label batches")
    if len(zs) == 0:
        raise ValueError("at least one environment is required")
    for z in zs:
        if np.asarray(z).shape[0] == 0:
            raise ValueError("empty environment batch")


def _env_ids(env_ids, count):
    return [str(e) for e in env_ids] if env_ids is not None else [str(i) for i in range(count)]


def erm_objective(zs, ys, env_ids=None):
    _check_envs(zs, ys)
    ids = _env_ids(env_ids, len(zs))
    out = []
    for e, z, y in zip(ids, zs, ys):
        risk, seed = nn.cross_entropy(z, y)
        out.append(EnvObjective(e, risk, 0.0, seed, "ERM", {"risk": risk}))
    return out


def dummy_scale_grad(z, y, w=1.0, p=None):
    """d/dw of mean CE(w*z, y): ``(1/n) sum_ik z_ik (softmax(w z)_ik - y_ik)``."""
    z = as_matrix(z, "logits")
    q = rowwise_softmax(w * z) if p is None else p
    return float((z * (q - _onehot(y, z.shape[1]))).sum() / z.shape[0])


def _scale_grad_and_seed(z, y, w, q):
    """g(w) and dg/dz for the logit-multiplier derivative at scale ``w``."""
    n = z.shape[0]
    r = q - _onehot(y, z.shape[1])
    g = (z * r).sum() / n
    zbar = (z * q).sum(axis=1, keepdims=True)
    dg = (r + w * q * (z - zbar)) / n
    return float(g), dg


def irmv1_penalty(z, p, y):
    """Squared gradient of the risk w.r.t. a scalar dummy classifier at 1.0."""
    z = as_matrix(z, "logits")
    p = as_matrix(p, "probabilities")
    if p.shape != z.shape:
        raise DimensionError(f"probabilities {p.shape} vs logits {z.shape}")
    if np.asarray(y).shape[0] != z.shape[0]:
        raise DimensionError("label count does not match logits")
    g, dg = _scale_grad_and_seed(z, y, 1.0, p)
    return g * g, 2.0 * g * dg


def ibirm_penalty(z):
    """Mean over logit dimensions of the batch population variance."""
    z = as_matrix(z, "logits")
    n, k = z.shape
    if n == 0:
        raise ValueError("ibirm_penalty of an empty batch")
    centred = z - z.mean(axis=0)
    penalty = float((centred ** 2).mean())
    return penalty, centred * (2.0 / (n * k))


def vrex_penalty(risks):
    """Population variance of the per-environment risks and d(var)/d(risk_e)."""
    r = np.asarray(risks, dtype=np.float64).ravel()
    if r.size == 0:
        raise ValueError("vrex_penalty needs at least one environment")
    d = r - r.mean()
    return float((d ** 2).mean()), 2.0 * d / r.size


def birm_penalty(z, y, birm_sd, birm_n, rng=None, noise=None):
    """IRMv1 penalty averaged over Gaussian perturbations of the dummy classifier.

    ``w_s = 1 + eps_s`` with ``eps_s ~ N(0, birm_sd^2)``. Pass ``noise`` to
    freeze the draws; otherwise ``birm_n`` draws are taken from ``rng``.
    Returns ``(penalty, seed, noise)``.
    """
    if not birm_sd > 0:
        raise nn.ConfigError("birm_sd must be positive")
    if birm_n < 1:
        raise nn.ConfigError("birm_n must be at least 1")
    z = as_matrix(z, "logits")
    if noise is None:
        if rng is None:
            raise ValueError("birm_penalty needs an rng or explicit noise")
        noise = rng.normal(0.0, birm_sd, size=int(birm_n))
    noise = np.asarray(noise, dtype=np.float64).ravel()
    penalty = 0.0
    seed = np.zeros_like(z)
    for eps in noise:
        w = 1.0 + eps
        g, dg = _scale_grad_and_seed(z, y, w, rowwise_softmax(w * z))
        penalty += g * g
        seed += 2.0 * g * dg
    return penalty / noise.size, seed / noise.size, noise


def pair_objective(zs, ys, preference, env_ids=None):
    """ERM + 10**preference * (IRMv1 + VREx), split per environment.

    The VREx variance is shared evenly across environments in ``penalty`` so that
    the step total is still the sum of per-environment totals.
    """
    _check_envs(zs, ys)
    ids = _env_ids(env_ids, len(zs))
    scale = 10.0 ** int(preference)
    ce = [nn.cross_entropy(z, y) for z, y in zip(zs, ys)]
    vrex, risk_seeds = vrex_penalty([r for r, _ in ce])
    out = []
    for e, z, y, (risk, ce_seed), rs in zip(ids, zs, ys, ce, risk_seeds):
        z = as_matrix(z, "logits")
        irm, irm_seed = irmv1_penalty(z, rowwise_softmax(z), y)
        seed = ce_seed + scale * (irm_seed + rs * ce_seed)
        penalty = scale * (irm + vrex / len(zs))
        out.append(EnvObjective(e, risk, penalty, seed, "PAIR",
                                {"risk": risk, "irmv1": irm, "vrex": vrex, "scale": scale}))
    return out


def method_objectives(config, zs, ys, rng=None, env_ids=None, birm_noise=None):
    """Per-environment objectives for one forward pass under ``config``.

    ``birm_noise`` optionally freezes BIRM draws, one array per environment.
    """
    m = config.method
    if m == "PAIR":
        return pair_objective(zs, ys, config.preference, env_ids)
    objs = erm_objective(zs, ys, env_ids)
    if m in ("ERM", "IRMGAME"):
        for o in objs:
            o.method = m
        return objs
    for i, (o, z, y) in enumerate(zip(objs, zs, ys)):
        z = as_matrix(z, "logits")
        o.method = m
        if m in ("IRMv1", "IBIRM"):
            irm, irm_seed = irmv1_penalty(z, rowwise_softmax(z), y)
            o.components["irmv1"] = irm
            o.penalty += config.lam * irm
            o.seed = o.seed + config.lam * irm_seed
            if m == "IBIRM":
                ib, ib_seed = ibirm_penalty(z)
                o.components["ib"] = ib
                o.penalty += config.gamma * ib
                o.seed = o.seed + config.gamma * ib_seed
        elif m == "BIRM":
            noise = None if birm_noise is None else birm_noise[i]
            pen, pen_seed, used = birm_penalty(z, y, config.birm_sd, config.birm_n, rng=rng, noise=noise)
            o.components["birm"] = pen
            o.components["noise"] = used
            o.penalty += config.lam * pen
            o.seed = o.seed + config.lam * pen_seed
    return objs


def assemble_total(config, objectives):
    """Total scalar objective and the per-environment logit seeds."""
    for o in objectives:
        if o.method != config.method:
            raise ValueError(f"objective computed for {o.method} cannot be assembled as {config.method}")
    total = float(sum(o.risk + o.penalty for o in objectives))
    return total, [o.seed for o in objectives]


# --- IRM Game ---------------------------------------------------------------

@dataclass
class GameModel:
    """Shared featurizer plus one linear head per training environment.

    ``featurizer`` is ``None`` for the fixed-identity (F) variant. In the V
    variant the featurizer output goes through a ReLU before the heads.
    """
    featurizer: object
    heads: list

    @property
    def n_envs(self):
        return len(self.heads)

    def copy(self):
        return GameModel(None if self.featurizer is None else self.featurizer.copy(),
                         [h.copy() for h in self.heads])


def game_init(layer_dims, n_envs, variant, seed):
    """Game model for an MLP shape ``layer_dims``; F uses linear heads on raw inputs."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    dims = list(layer_dims)
    if variant == "F" or len(dims) == 2:
        featurizer = None
        feat_dim = dims[0]
    else:
        featurizer = nn.mlp_init(dims[:-1], rng)
        feat_dim = dims[-2]
    heads = [nn.mlp_init([feat_dim, dims[-1]], rng) for _ in range(n_envs)]
    return GameModel(featurizer, heads)


def game_features(game, X):
    """Returns ``(features, trace)``; trace is None for the identity featurizer."""
    X = as_matrix(X, "X")
    if game.featurizer is None:
        return X, None
    trace = nn.forward(game.featurizer, X)
    return np.maximum(trace.logits, 0.0), trace


def ensemble_logits(game, feats):
    return sum(feats @ h.weights[0] + h.biases[0] for h in game.heads) / game.n_envs


def game_predict_logits(game, X):
    feats, _ = game_features(game, X)
    return ensemble_logits(game, feats)


def game_head_loss(game, feats, y, e):
    """Ensemble CE on one batch and its gradient w.r.t. head ``e`` only."""
    if not 0 <= e < game.n_envs:
        raise IndexError(f"no head {e}")
    risk, seed = nn.cross_entropy(ensemble_logits(game, feats), y)
    scaled = seed / game.n_envs
    grad = nn.MLPParams(list(game.heads[e].layer_dims), [feats.T @ scaled], [scaled.sum(axis=0)])
    return risk, grad, seed


def game_featurizer_grad(game, batches):
    """Summed ensemble CE over environments and its featurizer gradient."""
    if game.featurizer is None:
        raise ValueError("the F variant has no trainable featurizer")
    w_ens = sum(h.weights[0] for h in game.heads) / game.n_envs
    total = 0.0
    grad = game.featurizer.zeros_like()
    for X, y in batches:
        feats, trace = game_features(game, X)
        risk, seed = nn.cross_entropy(ensemble_logits(game, feats), y)
        total += risk
        dfeat = (seed @ w_ens.T) * (trace.logits > 0)
        g = nn.backward(game.featurizer, trace, dfeat)
        grad = nn.MLPParams(grad.layer_dims, [a + b for a, b in zip(grad.weights, g.weights)],
                            [a + b for a, b in zip(grad.biases, g.biases)])
    return total, grad


@dataclass
class GameOptState:
    heads: list
    featurizer: object = None

    @classmethod
    def zeros(cls, game):
        return cls([nn.AdamState.zeros(h) for h in game.heads],
                   None if game.featurizer is None else nn.AdamState.zeros(game.featurizer))


def irmgame_round(game, batches, state, lr):
    """One best-response sweep: heads in fixed env order, then the featurizer (V).

    ``batches`` holds one ``(X, y)`` per training environment. Returns
    ``(game, state, risks)`` where ``risks`` are the per-head ensemble losses.
    """
    if len(batches) != game.n_envs or len(state.heads) != game.n_envs:
        raise ValueError(f"{len(batches)} batches / {len(state.heads)} optimizer states for {game.n_envs} heads")
    game = game.copy()
    head_states = list(state.heads)
    risks = []
    for e, (X, y) in enumerate(batches):
        feats, _ = game_features(game, X)
        risk, grad, _ = game_head_loss(game, feats, y, e)
        game.heads[e], head_states[e] = nn.adam_step(game.heads[e], grad, head_states[e], lr)
        risks.append(risk)
    phi_state = state.featurizer
    if game.featurizer is not None:
        _, grad = game_featurizer_grad(game, batches)
        game.featurizer, phi_state = nn.adam_step(game.featurizer, grad, phi_state, lr)
    return game, GameOptState(head_states, phi_state), risks
