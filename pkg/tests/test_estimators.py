import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from poisoncert.data import make_halfmoons
from poisoncert.estimators import PoisoningCertifier, SGDNetwork
from poisoncert.train import SQUARED

from conftest import brute_force, halfmoons_config


@pytest.fixture(scope="module")
def moons():
    return make_halfmoons(20, 10, 0.1, seed=1, batch_size=5, epochs=2)


def test_network_matches_replay(moons):
    net = SGDNetwork(lr=0.5, batch_size=5, epochs=2).fit(moons.X_train, moons.y_train)
    logits = net.decision_function(moons.X_test)
    assert logits.shape == (10,)
    assert np.array_equal(net.predict(moons.X_test), (logits >= 0).astype(float))
    assert 0.0 <= net.score(moons.X_test, moons.y_test) <= 1.0


def test_network_unfitted_raises(moons):
    with pytest.raises(NotFittedError):
        SGDNetwork().predict(moons.X_test)


def test_regression_network():
    rng = np.random.default_rng(0)
    X = rng.uniform(size=(30, 3))
    y = X @ [0.2, -0.1, 0.3]
    net = SGDNetwork(loss=SQUARED, lr=0.5, batch_size=10, epochs=20).fit(X, y)
    assert net.score(X, y) > -0.01


def test_certifier_exact_and_clone(moons):
    net = SGDNetwork(lr=0.5, batch_size=5, epochs=2)
    cert = PoisoningCertifier(net, n=2).fit(moons.X_train, moons.y_train, moons.X_test, moons.y_test)
    assert cert.status_ == "optimal" and cert.primal_ == cert.bound_
    assert cert.primal_ >= cert.clean_value_
    X, y = cert.poisoned_training_set()
    assert int(np.sum(y != moons.y_train)) <= 2
    assert clone(cert).get_params()["n"] == 2


def test_certifier_heuristic_mode(moons):
    net = SGDNetwork(lr=0.5, batch_size=5, epochs=2)
    cert = PoisoningCertifier(net, n=1, search="heuristic").fit(moons.X_train, moons.y_train, moons.X_test,
                                                                moons.y_test)
    assert cert.bound_ is None and cert.status_ == "optimal"


def test_certifier_needs_test_set(moons):
    with pytest.raises(ValueError, match="X_test"):
        PoisoningCertifier(n=1).fit(moons.X_train, moons.y_train)
