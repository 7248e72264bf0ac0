"""scikit-learn style classifier over the invariance objectives."""
import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .config import rng_stream
from .objectives import MethodConfig
from .training import EpochSampler, Trainer


class IRMClassifier(ClassifierMixin, BaseEstimator):
    """ReLU MLP trained with one of ERM, IRMv1, IBIRM, PAIR, IRMGAME, BIRM.

    ``fit`` takes an ``environments`` array giving the environment of every
    row; without it all rows form a single environment (penalties that compare
    environments then have nothing to compare).

    >>> clf = IRMClassifier(method="IRMv1", lam=10.0, max_steps=200).fit(X, y, environments=env)
    >>> clf.predict_proba(X_new)
    """

    def __init__(self, method="ERM", lam=1.0, gamma=0.0, preference=0, birm_sd=0.1, birm_n=1,
                 irmgame_variant="F", hidden=(64,), lr=1e-3, batch_size=256, max_steps=1000,
                 weight_decay=0.0, penalty_anneal_steps=0, random_state=0):
        self.method = method
        self.lam = lam
        self.gamma = gamma
        self.preference = preference
        self.birm_sd = birm_sd
        self.birm_n = birm_n
        self.irmgame_variant = irmgame_variant
        self.hidden = hidden
        self.lr = lr
        self.batch_size = batch_size
        self.max_steps = max_steps
        self.weight_decay = weight_decay
        self.penalty_anneal_steps = penalty_anneal_steps
        self.random_state = random_state

    def _method_config(self):
        return MethodConfig(self.method, float(self.lam), float(self.gamma), int(self.preference),
                            float(self.birm_sd), int(self.birm_n), self.irmgame_variant)

    def fit(self, X, y, environments=None):
        X, y = check_X_y(X, y, dtype=np.float64)
        check_classification_targets(y)
        if int(self.batch_size) < 1 or int(self.max_steps) < 0 or float(self.lr) <= 0:
            raise ValueError("batch_size >= 1, max_steps >= 0 and lr > 0 are required")
        self.classes_, codes = np.unique(y, return_inverse=True)
        if self.classes_.shape[0] < 2:
            raise ValueError("fit needs at least two classes")
        if environments is None:
            environments = np.zeros(X.shape[0], dtype=np.int64)
        environments = np.asarray(environments)
        if environments.shape != (X.shape[0],):
            raise ValueError(f"environments must have shape ({X.shape[0]},), got {environments.shape}")
        self.environments_ = np.unique(environments)
        groups = [np.flatnonzero(environments == e) for e in self.environments_]
        self.n_features_in_ = X.shape[1]

        seed = int(self.random_state or 0)
        dims = [X.shape[1]] + [int(h) for h in self.hidden] + [self.classes_.shape[0]]
        trainer = Trainer(self._method_config(), dims, len(groups), self.lr, rng_stream(seed, "init"),
                          rng_stream(seed, "birm"), self.penalty_anneal_steps, self.weight_decay)
        order = rng_stream(seed, "order")
        samplers = [EpochSampler(len(g), min(int(self.batch_size), len(g)), order) for g in groups]
        self.loss_curve_ = []
        for _ in range(int(self.max_steps)):
            batches = []
            for g, sampler in zip(groups, samplers):
                idx = g[sampler.next()]
                batches.append((X[idx], codes[idx]))
            objective, _ = trainer.step(batches)
            self.loss_curve_.append(objective)
        self.trainer_ = trainer
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "trainer_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, the model was fitted with {self.n_features_in_}")
        return self.trainer_.predict_proba(X)

    def predict(self, X):
        check_is_fitted(self, "trainer_")
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]
