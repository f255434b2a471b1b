"""Shared problem builders for the test suite."""

import itertools

import numpy as np
import pytest

from poisoncert.data import FeatureMap, expand, load_diabetes_scaled, load_iris_binary, make_halfmoons, minmax_scale
from poisoncert.objectives import ObjectiveSpec
from poisoncert.threat import ActionTable, PoisonAssignment, ThreatModel
from poisoncert.train import HINGE, SQUARED, Params, TrainConfig, init_params, loss_and_grad, replay
from poisoncert.solve import evaluate_objective

POLY3 = FeatureMap("polynomial", 3, include_bias=False)


def halfmoons(n_train=100, n_test=40, seed=0, batch_size=20, epochs=4):
    d = make_halfmoons(n_train, n_test, 0.1, seed=seed, batch_size=batch_size, epochs=epochs)
    return expand(POLY3, minmax_scale(d, feature_range=(-1.0, 1.0)))


def halfmoons_config(lr=0.5):
    return TrainConfig(lr, HINGE, init_params([9, 1], scale=0.0))


def iris():
    return load_iris_binary()


def iris_config():
    return TrainConfig(0.03, HINGE, init_params([4, 1], scale=0.0))


IRIS_SUBSTITUTION = dict(kind="substitution", n=8, domain_lo=0.0, domain_hi=1.0)


def diabetes():
    return load_diabetes_scaled()


def diabetes_lstsq_config(ds, lr=0.3):
    from poisoncert.cli import _lstsq_init

    return TrainConfig(lr, SQUARED, _lstsq_init(ds))


def random_codes(table, n_train, n, rng):
    codes = np.zeros(n_train, dtype=np.int64)
    k = int(rng.integers(0, n + 1))
    for i in rng.choice(n_train, k, replace=False):
        if table.n_actions(i):
            codes[i] = rng.integers(1, table.n_actions(i) + 1)
    return codes


def brute_force(cfg, ds, n, objective=None):
    """Maximum objective over every label-flip set of size at most ``n``."""
    objective = objective or ObjectiveSpec()
    best = -np.inf
    for k in range(n + 1):
        for S in itertools.combinations(range(ds.n_train), k):
            a = PoisonAssignment.from_flips(ds, S)
            best = max(best, evaluate_objective(replay(cfg, ds, a), objective, ds))
    return best


@pytest.fixture(scope="session")
def hm_small():
    return halfmoons(20, 10, seed=3, batch_size=5, epochs=2)


@pytest.fixture(scope="session")
def hm_full():
    return halfmoons()


def random_assignment(tm, ds, rng, k=None):
    """Valid complete assignment with poisoned values drawn from the threat boxes (corners 30% of the time)."""
    a = PoisonAssignment.clean(ds)
    k = int(rng.integers(0, tm.n + 1)) if k is None else k
    for i in rng.choice(ds.n_train, k, replace=False):
        boxes = tm.poison_boxes(ds, int(i))
        xlo, xhi, ylo, yhi = boxes[int(rng.integers(len(boxes)))]
        if rng.random() < 0.3:
            x = np.where(rng.random(ds.d) < 0.5, xlo, xhi)
            y = ylo if rng.random() < 0.5 else yhi
        else:
            x = rng.uniform(xlo, xhi)
            y = float(rng.uniform(ylo, yhi))
        a = a.with_poison(int(i), x, y)
    return a


def random_partial(full, ds, rng, p=0.5):
    part = full
    for i in range(ds.n_train):
        if rng.random() < p:
            part = part.with_undecided(i, ds)
    return part


def soundness_cases():
    """(name, dataset, config, threat model) across the three built-in datasets."""
    hm = halfmoons(30, 10, batch_size=10, epochs=2)
    di = diabetes()
    di_small = di.subset(64, 10)
    return [
        ("halfmoons-linear", hm, halfmoons_config(), ThreatModel(n=3, label_flip=True)),
        ("halfmoons-mlp", hm, TrainConfig(0.1, HINGE, init_params([9, 4, 1], seed=3)),
         ThreatModel(n=2, label_flip=True)),
        ("halfmoons-mlp-box", hm, TrainConfig(0.1, HINGE, init_params([9, 4, 1], seed=3)),
         ThreatModel(n=2, epsilon=0.05, label_flip=True)),
        ("iris-substitution", iris(), iris_config(), ThreatModel(**IRIS_SUBSTITUTION)),
        ("diabetes-labels", di_small, TrainConfig(0.3, SQUARED, init_params([10, 1], scale=0.0)),
         ThreatModel(n=5, nu=0.5)),
        ("diabetes-mlp-box", di_small.subset(32, 5), TrainConfig(0.05, SQUARED, init_params([10, 3, 1], seed=2)),
         ThreatModel(n=3, epsilon=0.05, nu=0.2)),
        ("diabetes-full", di, diabetes_lstsq_config(di), ThreatModel(n=50, nu=0.5)),
    ]


def finite_difference(params, x, y, loss, h=1e-5):
    flat = params.flat()
    out = np.zeros_like(flat)
    for k in range(flat.size):
        e = np.zeros_like(flat)
        e[k] = h
        lp = loss_and_grad(params.unflat(flat + e), (x, y), loss)[0]
        lm = loss_and_grad(params.unflat(flat - e), (x, y), loss)[0]
        out[k] = (lp - lm) / (2 * h)
    return out


def random_gradient_case(rng, loss):
    """Random network and sample away from ReLU and hinge kinks."""
    sizes = [int(rng.integers(1, 5))] + [int(v) for v in rng.integers(1, 5, size=rng.integers(0, 3))] + [1]
    while True:
        params = init_params(sizes, seed=int(rng.integers(1 << 30)), scale=2.0)
        params = Params(params.weights, [b + rng.normal(size=b.shape) for b in params.biases])
        x = rng.normal(size=sizes[0])
        y = float(rng.integers(0, 2)) if loss == HINGE else float(rng.normal())
        Ws, bs = params.weights, params.biases
        z, ok = x, True
        for k, (W, b) in enumerate(zip(Ws, bs)):
            u = W @ z + b
            if k < len(Ws) - 1:
                ok &= bool(np.all(np.abs(u) > 1e-3))
                z = np.maximum(u, 0)
        if loss == HINGE:
            ok &= abs(1 - (2 * y - 1) * u[0]) > 1e-3
        if ok:
            return params, x, y
