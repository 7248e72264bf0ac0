import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from irmcal import IRMClassifier
from irmcal.datasets import make_twobit


def _data(seed=0):
    envs = make_twobit(500, [0.95, 0.9], seed=seed)
    X = np.concatenate([e.X for e in envs])
    y = np.concatenate([e.y for e in envs])
    env = np.repeat(np.arange(len(envs)), 500)
    return X, y, env


def test_fit_predict_string_labels():
    X, y, env = _data()
    labels = np.array(["no", "yes"])[y]
    clf = IRMClassifier(max_steps=300, lr=0.01, hidden=(16,)).fit(X, labels, environments=env)
    assert set(clf.classes_) == {"no", "yes"}
    assert clf.predict(X).dtype == labels.dtype
    assert clf.score(X, labels) > 0.85
    proba = clf.predict_proba(X)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0)
    assert len(clf.loss_curve_) == 300


@pytest.mark.parametrize("method,extra", [("IRMv1", {"lam": 10.0}), ("IBIRM", {"gamma": 1.0}), ("PAIR", {}),
                                          ("BIRM", {"birm_n": 2}), ("IRMGAME", {"irmgame_variant": "V"})])
def test_every_method_fits(method, extra):
    X, y, env = _data()
    clf = IRMClassifier(method=method, max_steps=30, hidden=(8,), **extra).fit(X, y, environments=env)
    assert clf.predict(X).shape == y.shape
    assert np.all(np.isfinite(clf.loss_curve_))


def test_params_and_clone():
    clf = IRMClassifier(method="IRMv1", lam=5.0)
    assert clf.get_params()["lam"] == 5.0
    assert clone(clf).set_params(lam=7.0).lam == 7.0


def test_random_state_determinism():
    X, y, env = _data()
    a = IRMClassifier(max_steps=40, random_state=3).fit(X, y, environments=env).predict_proba(X)
    b = IRMClassifier(max_steps=40, random_state=3).fit(X, y, environments=env).predict_proba(X)
    np.testing.assert_array_equal(a, b)


def test_unfitted_and_feature_mismatch():
    X, y, env = _data()
    with pytest.raises(NotFittedError):
        IRMClassifier().predict(X)
    clf = IRMClassifier(max_steps=1).fit(X, y)
    with pytest.raises(ValueError, match="features"):
        clf.predict(np.ones((3, 5)))


def test_bad_inputs():
    X, y, env = _data()
    with pytest.raises(ValueError):
        IRMClassifier().fit(X, y, environments=env[:-1])
    with pytest.raises(ValueError):
        IRMClassifier().fit(X, np.zeros_like(y))
    with pytest.raises(ValueError):
        IRMClassifier(lr=0.0).fit(X, y)
