"""scikit-learn style front ends for training and certification."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import CLASSIFICATION, REGRESSION, Dataset
from .objectives import DOS, TEST_ERROR, ObjectiveSpec, predictions
from .solve import SolverOptions, branch_and_bound, evaluate_objective, local_search
from .threat import BOUNDED, ThreatModel
from .train import HINGE, SQUARED, TrainConfig, _forward, _stack, init_params, replay


def _task_of(loss: str) -> str:
    return CLASSIFICATION if loss == HINGE else REGRESSION


class SGDNetwork(BaseEstimator):
    """ReLU network trained by plain mini-batch SGD in a fixed sample order.

    Training is fully deterministic: batches follow the row order of ``X``
    and the initialization is seeded. ``hidden`` lists hidden-layer widths
    (empty for a linear model).
    """

    def __init__(self, hidden=(), loss=HINGE, lr=0.1, batch_size=20, epochs=1, init_scale=0.0, random_state=0):
        self.hidden = hidden
        self.loss = loss
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.init_scale = init_scale
        self.random_state = random_state

    def _config(self, d: int) -> TrainConfig:
        sizes = [d, *self.hidden, 1]
        return TrainConfig(self.lr, self.loss, init_params(sizes, self.random_state, self.init_scale),
                           self.random_state)

    def _dataset(self, X, y, X_test=None, y_test=None) -> Dataset:
        if X_test is None:
            X_test, y_test = np.empty((0, X.shape[1])), np.empty(0)
        return Dataset(X, y, X_test, y_test, task=_task_of(self.loss), batch_size=self.batch_size,
                       epochs=self.epochs)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float)
        self.config_ = self._config(X.shape[1])
        self.trace_ = replay(self.config_, self._dataset(X, y))
        self.params_ = self.trace_.final
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=float)
        Ws, bs = _stack(self.params_, 1)
        us, _ = _forward(Ws, bs, X[None])
        return np.asarray(us[-1][0, :, 0], dtype=float)

    def predict(self, X) -> np.ndarray:
        out = self.decision_function(X)
        return predictions(out) if self.loss == HINGE else out

    def score(self, X, y) -> float:
        """Accuracy for classification, negative mean squared error for regression."""
        pred = self.predict(X)
        y = np.asarray(y, dtype=float)
        if self.loss == HINGE:
            return float(np.mean(pred == y))
        return -float(np.mean((pred - y) ** 2))


class PoisoningCertifier(BaseEstimator):
    """Worst-case poisoning attack and certificate for an :class:`SGDNetwork`.

    ``fit(X, y, X_test=..., y_test=...)`` runs the certification search and
    exposes ``certificate_``, ``attack_`` (the incumbent assignment),
    ``primal_``, ``bound_`` and ``status_``. With ``search="heuristic"`` only
    the local-search attack runs and ``bound_`` is left as ``None``.
    """

    def __init__(self, network=None, n=1, kind=BOUNDED, epsilon=0.0, nu=0.0, label_flip=True, objective=TEST_ERROR,
                 targets=None, search="exact", time_limit=None, obbt=True, aux=True, heuristic_budget=20_000):
        self.network = network
        self.n = n
        self.kind = kind
        self.epsilon = epsilon
        self.nu = nu
        self.label_flip = label_flip
        self.objective = objective
        self.targets = targets
        self.search = search
        self.time_limit = time_limit
        self.obbt = obbt
        self.aux = aux
        self.heuristic_budget = heuristic_budget

    def fit(self, X, y, X_test=None, y_test=None):
        net = self.network if self.network is not None else SGDNetwork()
        X, y = check_X_y(X, y, dtype=float)
        if X_test is not None:
            X_test, y_test = check_X_y(X_test, y_test, dtype=float)
        if self.objective != DOS and X_test is None:
            raise ValueError("test-set objectives need X_test and y_test")
        ds = net._dataset(X, y, X_test, y_test)
        cfg = net._config(X.shape[1])
        kw = {"label_flip": self.label_flip} if net.loss == HINGE else {"nu": self.nu}
        tm = ThreatModel(kind=self.kind, n=self.n, epsilon=self.epsilon, **kw)
        obj = ObjectiveSpec(self.objective, self.targets)
        if self.search == "heuristic":
            res = local_search(cfg, ds, tm, obj, budget=self.heuristic_budget)
            self.attack_, self.primal_, self.bound_ = res.assignment, res.value, None
            self.status_ = "optimal" if res.optimal else "heuristic"
            self.certificate_ = None
        elif self.search == "exact":
            opts = SolverOptions(mode="auxiliary" if self.aux else "direct", obbt=self.obbt,
                                 time_limit=self.time_limit, heuristic_budget=self.heuristic_budget)
            cert = branch_and_bound(cfg, ds, tm, obj, opts)
            self.certificate_ = cert
            self.attack_, self.primal_, self.bound_, self.status_ = cert.incumbent, cert.primal, cert.bound, cert.status
        else:
            raise ValueError(f"unknown search {self.search!r}")
        self.dataset_ = ds
        self.clean_value_ = float(evaluate_objective(replay(cfg, ds), obj, ds))
        return self

    def poisoned_training_set(self):
        """Training arrays of the incumbent attack."""
        check_is_fitted(self, "attack_")
        return self.attack_.materialize(self.dataset_)


__all__ = ["SGDNetwork", "PoisoningCertifier", "HINGE", "SQUARED"]
