"""Deterministic SGD replay for feed-forward ReLU networks.

Everything here is the concrete semantics that the interval relaxation and
the MIQCP encoding must agree with. Sums run in ascending index order through
explicit elementwise loops, so a replay of one assignment is bit-identical to
the same assignment evaluated inside a batch of many.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import CLASSIFICATION, REGRESSION, Dataset
from .objectives import DOS, ObjectiveSpec, score_logits

HINGE = "hinge"
SQUARED = "squared_error"
LOSSES = (HINGE, SQUARED)


@dataclass(frozen=True, eq=False)
class Params:
    """Layer weights ``W_k`` (out x in) and biases ``b_k``."""

    weights: tuple
    biases: tuple

    def __post_init__(self):
        ws = tuple(np.array(w, dtype=float) for w in self.weights)
        bs = tuple(np.array(b, dtype=float).reshape(-1) for b in self.biases)
        if len(ws) != len(bs) or not ws:
            raise ValueError("need one bias per weight matrix and at least one layer")
        for k, (w, b) in enumerate(zip(ws, bs)):
            if w.ndim != 2 or w.shape[0] != b.shape[0]:
                raise ValueError(f"layer {k + 1}: weight {w.shape} and bias {b.shape} disagree")
            if k and w.shape[1] != ws[k - 1].shape[0]:
                raise ValueError(f"layer {k + 1}: expects {w.shape[1]} inputs, previous layer gives {ws[k - 1].shape[0]}")
        if ws[-1].shape[0] != 1:
            raise ValueError("final layer must have a single output")
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(self.weights, self.biases)])

    def unflat(self, vec) -> Params:
        vec = np.asarray(vec, dtype=float)
        ws, bs, pos = [], [], 0
        for w, b in zip(self.weights, self.biases):
            ws.append(vec[pos:pos + w.size].reshape(w.shape))
            pos += w.size
            bs.append(vec[pos:pos + b.size])
            pos += b.size
        return Params(ws, bs)

    def equals(self, other: Params) -> bool:
        return all(np.array_equal(a, b) for a, b in zip(self.weights, other.weights)) and all(
            np.array_equal(a, b) for a, b in zip(self.biases, other.biases)
        )

    def to_dict(self) -> dict:
        return {
            "layers": [
                {"in": w.shape[1], "out": w.shape[0], "weight": w.ravel().tolist(), "bias": b.tolist()}
                for w, b in zip(self.weights, self.biases)
            ]
        }

    @classmethod
    def from_dict(cls, data: dict) -> Params:
        ws = [np.array(l["weight"], dtype=float).reshape(l["out"], l["in"]) for l in data["layers"]]
        bs = [np.array(l["bias"], dtype=float) for l in data["layers"]]
        return cls(ws, bs)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> Params:
        return cls.from_dict(json.loads(text))


def init_params(sizes: Sequence[int], seed: int = 0, scale: float = 1.0) -> Params:
    """Seeded initialization.

    Weights of a layer with fan-in ``m`` are uniform on
    ``[-scale/sqrt(m), scale/sqrt(m)]``; biases start at zero. ``scale=0``
    gives the all-zero initialization used for the linear experiments.
    """
    rng = np.random.default_rng(seed)
    ws, bs = [], []
    for m, n in zip(sizes[:-1], sizes[1:]):
        lim = scale / np.sqrt(m)
        ws.append(rng.uniform(-lim, lim, size=(n, m)) if scale else np.zeros((n, m)))
        bs.append(np.zeros(n))
    return Params(ws, bs)


@dataclass(frozen=True, eq=False)
class TrainConfig:
    lr: float | tuple = 0.1
    loss: str = HINGE
    init: Params | None = None
    seed: int = 0

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.init is None:
            raise ValueError("TrainConfig needs an explicit initialization")
        lrs = np.atleast_1d(np.asarray(self.lr, dtype=float))
        if np.any(lrs < 0):
            raise ValueError("learning rate must be non-negative")
        if not np.isscalar(self.lr):
            object.__setattr__(self, "lr", tuple(float(v) for v in self.lr))

    def lr_at(self, t: int) -> float:
        """Learning rate for iteration ``t`` (1-based)."""
        if isinstance(self.lr, tuple):
            return self.lr[t - 1]
        return float(self.lr)

    def check_task(self, dataset: Dataset) -> None:
        want = CLASSIFICATION if self.loss == HINGE else REGRESSION
        if dataset.task != want:
            raise ValueError(f"{self.loss} loss needs a {want} dataset, got {dataset.task}")
        if dataset.d != self.init.sizes[0]:
            raise ValueError(f"network expects {self.init.sizes[0]} features, dataset has {dataset.d}")
        if isinstance(self.lr, tuple) and len(self.lr) != dataset.n_iterations:
            raise ValueError("learning-rate schedule length must equal the iteration count")

    def to_dict(self) -> dict:
        return {"lr": list(self.lr) if isinstance(self.lr, tuple) else self.lr, "loss": self.loss,
                "seed": self.seed, "init": self.init.to_dict()}


# ---------------------------------------------------------------------------
# batched kernels; leading axis "a" indexes independent runs
# ---------------------------------------------------------------------------

def _matvec(W, z):
    """``W @ z`` per run and sample, summed in ascending column order.

    ``W``: (A, n, m); ``z``: (A, B, m) -> (A, B, n).
    """
    acc = W[:, None, :, 0] * z[:, :, None, 0]
    for c in range(1, W.shape[2]):
        acc = acc + W[:, None, :, c] * z[:, :, None, c]
    return acc


def _rmatvec(W, g):
    """``W.T @ g``: (A, n, m), (A, B, n) -> (A, B, m)."""
    acc = W[:, None, 0, :] * g[:, :, 0, None]
    for r in range(1, W.shape[1]):
        acc = acc + W[:, None, r, :] * g[:, :, r, None]
    return acc


def _sum_batch(v):
    """Sum over axis 1 in ascending order."""
    acc = v[:, 0]
    for j in range(1, v.shape[1]):
        acc = acc + v[:, j]
    return acc


def _forward(Ws, bs, x):
    """Forward pass; returns pre-activations and activations per layer."""
    us, zs = [], [x]
    z = x
    for k, (W, b) in enumerate(zip(Ws, bs)):
        u = _matvec(W, z) + b[:, None, :]
        us.append(u)
        if k < len(Ws) - 1:
            z = np.where(u > 0, u, 0.0)
            zs.append(z)
    return us, zs


def _loss(yhat, y, loss):
    if loss == HINGE:
        sign = 2.0 * y - 1.0
        r = 1.0 - sign * yhat
        h = r > 0
        return np.where(h, r, 0.0), -sign * h, r, h
    e = yhat - y
    return e * e, 2.0 * e, None, None


def _backward(Ws, us, zs, g):
    """Per-sample gradients; ``g`` is dL/dyhat with shape (A, B)."""
    K = len(Ws)
    gu = g[:, :, None]
    dWs, dbs, gus, gzs = [None] * K, [None] * K, [None] * K, [None] * K
    for k in range(K - 1, -1, -1):
        gus[k] = gu
        dWs[k] = gu[:, :, :, None] * zs[k][:, :, None, :]
        dbs[k] = gu
        if k:
            gz = _rmatvec(Ws[k], gu)
            gzs[k - 1] = gz
            gu = np.where(us[k - 1] > 0, gz, 0.0)
    return dWs, dbs, gus, gzs


@dataclass
class IterationRecord:
    """Everything computed at one SGD step, for one run."""

    t: int
    batch: np.ndarray
    u: list
    z: list
    relu_on: list
    yhat: np.ndarray
    r: np.ndarray | None
    hinge_on: np.ndarray | None
    loss: np.ndarray
    dloss: np.ndarray
    grad_u: list
    grad_z: list
    grad_W: list
    grad_b: list


@dataclass
class Trace:
    params: list
    iterations: list = field(default_factory=list)
    test_logits: np.ndarray | None = None
    test_u: list | None = None

    @property
    def final(self) -> Params:
        return self.params[-1]

    @property
    def losses(self) -> list:
        return [rec.loss for rec in self.iterations]

    def total_loss(self) -> float:
        total = 0.0
        for rec in self.iterations:
            for v in rec.loss:
                total = total + float(v)
        return total

    def epoch_losses(self, dataset: Dataset) -> np.ndarray:
        per = np.zeros(dataset.epochs)
        for rec in self.iterations:
            per[(rec.t - 1) // dataset.batches_per_epoch] += float(np.sum(rec.loss))
        return per

    def equals(self, other: Trace) -> bool:
        if len(self.params) != len(other.params) or not all(a.equals(b) for a, b in zip(self.params, other.params)):
            return False
        for r1, r2 in zip(self.iterations, other.iterations):
            for name in ("yhat", "loss", "dloss"):
                if not np.array_equal(getattr(r1, name), getattr(r2, name)):
                    return False
        return np.array_equal(self.test_logits, other.test_logits)


def _stack(params: Params, A: int):
    Ws = [np.broadcast_to(w, (A,) + w.shape).copy() for w in params.weights]
    bs = [np.broadcast_to(b, (A,) + b.shape).copy() for b in params.biases]
    return Ws, bs


def run_sgd(config: TrainConfig, dataset: Dataset, X, Y, *, record: bool = False,
            objective: ObjectiveSpec | None = None):
    """Replay SGD for ``A`` runs at once.

    ``X`` has shape (A, N, d) (A may be 1 and broadcast), ``Y`` (A, N).
    Returns ``(Ws, bs, objective_values, traces)``; traces only with
    ``record=True``.
    """
    Y = np.asarray(Y, dtype=float)
    X = np.asarray(X, dtype=float)
    A = max(X.shape[0], Y.shape[0])
    X = np.broadcast_to(X, (A,) + X.shape[1:])
    Y = np.broadcast_to(Y, (A,) + Y.shape[1:])
    Ws, bs = _stack(config.init, A)
    loss_total = np.zeros(A)
    records = [[] for _ in range(A)] if record else None
    history = [[config.init] for _ in range(A)] if record else None
    for t in range(1, dataset.n_iterations + 1):
        idx = dataset.batch(t)
        xb, yb = X[:, idx], Y[:, idx]
        us, zs = _forward(Ws, bs, xb)
        yhat = us[-1][:, :, 0]
        L, g, r, h = _loss(yhat, yb, config.loss)
        for j in range(L.shape[1]):
            loss_total = loss_total + L[:, j]
        dWs, dbs, gus, gzs = _backward(Ws, us, zs, g)
        step = config.lr_at(t) / len(idx)
        Ws = [W - step * _sum_batch(dW) for W, dW in zip(Ws, dWs)]
        bs = [b - step * _sum_batch(db) for b, db in zip(bs, dbs)]
        if record:
            for a in range(A):
                records[a].append(IterationRecord(
                    t=t, batch=idx,
                    u=[u[a] for u in us], z=[z[a] for z in zs[1:]],
                    relu_on=[u[a] > 0 for u in us[:-1]],
                    yhat=yhat[a], r=None if r is None else r[a], hinge_on=None if h is None else h[a],
                    loss=L[a], dloss=g[a],
                    grad_u=[v[a] for v in gus], grad_z=[None if v is None else v[a] for v in gzs],
                    grad_W=[v[a] for v in dWs], grad_b=[v[a][:, :] for v in dbs],
                ))
                history[a].append(Params([W[a] for W in Ws], [b[a] for b in bs]))
    values = None
    test_us = None
    if dataset.n_test:
        test_us, _ = _forward(Ws, bs, np.broadcast_to(dataset.X_test, (A,) + dataset.X_test.shape))
    if objective is not None:
        if objective.kind == DOS:
            values = loss_total
        else:
            values = score_logits(objective, test_us[-1][:, :, 0], dataset.y_test)
    traces = None
    if record:
        traces = [
            Trace(history[a], records[a],
                  test_logits=None if test_us is None else test_us[-1][a, :, 0],
                  test_u=None if test_us is None else [u[a] for u in test_us])
            for a in range(A)
        ]
    return Ws, bs, values, traces


# ---------------------------------------------------------------------------
# single-example API
# ---------------------------------------------------------------------------

def forward(params: Params, x):
    """Return ``(logit, cache)`` with ``cache = {"u": [...], "z": [...]}``."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] != params.sizes[0]:
        raise ValueError(f"input has dimension {x.shape[0]}, network expects {params.sizes[0]}")
    Ws, bs = _stack(params, 1)
    us, zs = _forward(Ws, bs, x[None, None, :])
    return float(us[-1][0, 0, 0]), {"u": [u[0, 0] for u in us], "z": [z[0, 0] for z in zs]}


def loss_and_grad(params: Params, sample, loss: str):
    """Loss, gradient (a :class:`Params`) and dL/dyhat for one sample."""
    x, y = (sample.features, sample.label) if hasattr(sample, "features") else sample
    x = np.asarray(x, dtype=float).reshape(-1)
    if loss == HINGE and y not in (0.0, 1.0):
        raise ValueError("hinge loss needs a 0/1 label")
    Ws, bs = _stack(params, 1)
    us, zs = _forward(Ws, bs, x[None, None, :])
    L, g, _, _ = _loss(us[-1][:, :, 0], np.array([[float(y)]]), loss)
    dWs, dbs, _, _ = _backward(Ws, us, zs, g)
    grad = Params([dW[0, 0] for dW in dWs], [db[0, 0] for db in dbs])
    return float(L[0, 0]), grad, float(g[0, 0])


def poisoned_arrays(dataset: Dataset, assignment):
    """Materialize the training arrays an assignment induces."""
    if not assignment.is_complete:
        raise ValueError("assignment has undecided samples")
    return assignment.materialize(dataset)


def replay(config: TrainConfig, dataset: Dataset, assignment=None) -> Trace:
    """Train on the (possibly poisoned) dataset and record every quantity."""
    config.check_task(dataset)
    if assignment is None:
        X, Y = dataset.X_train, dataset.y_train
    else:
        X, Y = poisoned_arrays(dataset, assignment)
    _, _, _, traces = run_sgd(config, dataset, X[None], Y[None], record=True)
    return traces[0]


def replay_arrays(config: TrainConfig, dataset: Dataset, X, Y, objective: ObjectiveSpec,
                  chunk: int = 2048, threads: int = 1):
    """Objective values for many runs given stacked (A, N, d) / (A, N) data.

    Results keep input order. ``threads > 1`` evaluates chunks on a thread
    pool; every chunk is computed the same way, so values do not depend on it.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    A = max(X.shape[0], Y.shape[0])
    spans = [(s, min(s + chunk, A)) for s in range(0, A, chunk)]

    def work(span):
        s, e = span
        xs = X if X.shape[0] == 1 else X[s:e]
        ys = Y if Y.shape[0] == 1 else Y[s:e]
        if xs.shape[0] == 1 and ys.shape[0] == 1 and e - s > 1:
            ys = np.broadcast_to(ys, (e - s,) + ys.shape[1:])
        Ws, bs, vals, _ = run_sgd(config, dataset, xs, ys, objective=objective)
        return Ws, bs, vals

    if threads > 1 and len(spans) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(work, spans))
    else:
        parts = [work(s) for s in spans]
    return parts


def replay_batched(config: TrainConfig, dataset: Dataset, assignments: list, objective: ObjectiveSpec,
                   threads: int = 1):
    """Final parameters and objective value for every assignment, in order."""
    if not assignments:
        raise ValueError("empty assignment list")
    config.check_task(dataset)
    arrays = [poisoned_arrays(dataset, a) for a in assignments]
    X = np.stack([x for x, _ in arrays])
    Y = np.stack([y for _, y in arrays])
    out = []
    for Ws, bs, vals in replay_arrays(config, dataset, X, Y, objective, threads=threads):
        for a in range(vals.shape[0]):
            out.append((Params([W[a] for W in Ws], [b[a] for b in bs]), float(vals[a])))
    return out


def evaluate_trace(trace: Trace, objective: ObjectiveSpec, dataset: Dataset) -> float:
    if objective.kind == DOS:
        return trace.total_loss()
    return float(score_logits(objective, trace.test_logits, dataset.y_test))
