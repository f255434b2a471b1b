"""Datasets, ingestion, feature expansion and the fixed batching schedule.

Training order is part of the certified object: sample ``i`` always lands in
batch ``i // batch_size`` of every epoch, and nothing is ever shuffled after a
:class:`Dataset` is built.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from sklearn.preprocessing import FunctionTransformer, PolynomialFeatures

CLASSIFICATION = "classification"
REGRESSION = "regression"
TASKS = (CLASSIFICATION, REGRESSION)


class DataError(ValueError):
    """Raised for malformed input data."""


@dataclass(frozen=True)
class Sample:
    features: np.ndarray
    label: float

    def __post_init__(self):
        object.__setattr__(self, "features", np.asarray(self.features, dtype=float))
        object.__setattr__(self, "label", float(self.label))


@dataclass(frozen=True, eq=False)
class Dataset:
    """Ordered train/test split plus the batching contract.

    ``X_train`` and ``X_test`` are float arrays of shape ``(N, d)`` and
    ``(N_test, d)``; labels are 1-d float arrays.
    """

    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    task: str = CLASSIFICATION
    batch_size: int = 20
    epochs: int = 1
    name: str = "custom"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for attr in ("X_train", "X_test"):
            arr = np.array(getattr(self, attr), dtype=float)
            if arr.ndim != 2:
                raise DataError(f"{attr} must be 2-d, got shape {arr.shape}")
            arr.setflags(write=False)
            object.__setattr__(self, attr, arr)
        for attr in ("y_train", "y_test"):
            arr = np.array(getattr(self, attr), dtype=float).reshape(-1)
            arr.setflags(write=False)
            object.__setattr__(self, attr, arr)
        if self.task not in TASKS:
            raise DataError(f"unknown task {self.task!r}")
        if self.X_train.shape[0] == 0:
            raise DataError("empty training set")
        if self.X_train.shape[0] != self.y_train.shape[0]:
            raise DataError("X_train and y_train lengths differ")
        if self.X_test.shape[0] != self.y_test.shape[0]:
            raise DataError("X_test and y_test lengths differ")
        if self.X_test.shape[0] and self.X_test.shape[1] != self.X_train.shape[1]:
            raise DataError("train and test feature dimensions differ")
        if self.task == CLASSIFICATION:
            for name, y in (("train", self.y_train), ("test", self.y_test)):
                bad = np.flatnonzero((y != 0.0) & (y != 1.0))
                if bad.size:
                    raise DataError(
                        f"{name} label at index {bad[0]} is {y[bad[0]]}, expected 0 or 1"
                    )
        if self.batch_size < 1 or self.epochs < 1:
            raise DataError("batch_size and epochs must be positive")

    @property
    def n_train(self) -> int:
        return self.X_train.shape[0]

    @property
    def n_test(self) -> int:
        return self.X_test.shape[0]

    @property
    def d(self) -> int:
        return self.X_train.shape[1]

    @property
    def batches_per_epoch(self) -> int:
        return math.ceil(self.n_train / self.batch_size)

    @property
    def n_iterations(self) -> int:
        return self.epochs * self.batches_per_epoch

    def batch(self, t: int) -> np.ndarray:
        """Sample indices used at iteration ``t`` (1-based, as in ``θ^(t)``)."""
        if not 1 <= t <= self.n_iterations:
            raise IndexError(f"iteration {t} outside 1..{self.n_iterations}")
        j = (t - 1) % self.batches_per_epoch
        return np.arange(j * self.batch_size, min((j + 1) * self.batch_size, self.n_train))

    def schedule(self) -> list[np.ndarray]:
        return [self.batch(t) for t in range(1, self.n_iterations + 1)]

    def iterations_of(self, i: int) -> list[int]:
        """Iterations in which training sample ``i`` is used."""
        j = i // self.batch_size
        return [e * self.batches_per_epoch + j + 1 for e in range(self.epochs)]

    @property
    def train(self) -> list[Sample]:
        return [Sample(x, y) for x, y in zip(self.X_train, self.y_train)]

    @property
    def test(self) -> list[Sample]:
        return [Sample(x, y) for x, y in zip(self.X_test, self.y_test)]

    def with_training(self, *, batch_size: int | None = None, epochs: int | None = None) -> Dataset:
        return replace(
            self,
            batch_size=self.batch_size if batch_size is None else batch_size,
            epochs=self.epochs if epochs is None else epochs,
        )

    def subset(self, n_train: int | None = None, n_test: int | None = None) -> Dataset:
        """First ``n_train`` / ``n_test`` samples, order preserved."""
        return replace(
            self,
            X_train=self.X_train[:n_train],
            y_train=self.y_train[:n_train],
            X_test=self.X_test[:n_test],
            y_test=self.y_test[:n_test],
        )

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for arr in (self.X_train, self.y_train, self.X_test, self.y_test):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(f"{self.task}|{self.batch_size}|{self.epochs}".encode())
        return h.hexdigest()[:16]

    def equals(self, other: Dataset) -> bool:
        return (
            self.task == other.task
            and self.batch_size == other.batch_size
            and self.epochs == other.epochs
            and all(
                np.array_equal(a, b)
                for a, b in (
                    (self.X_train, other.X_train),
                    (self.y_train, other.y_train),
                    (self.X_test, other.X_test),
                    (self.y_test, other.y_test),
                )
            )
        )


def _read_rows(path, header: bool):
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if header and lineno == 1:
                continue
            if not row or all(not c.strip() for c in row):
                continue
            try:
                rows.append([float(c) for c in row])
            except ValueError as exc:
                raise DataError(f"{path}: row {lineno}: {exc}") from None
            if len(rows[-1]) != len(rows[0]):
                raise DataError(
                    f"{path}: row {lineno}: expected {len(rows[0])} columns, got {len(rows[-1])}"
                )
            if len(rows[-1]) < 2:
                raise DataError(f"{path}: row {lineno}: need at least one feature and a label")
    return np.array(rows, dtype=float).reshape(len(rows), -1)


def load_csv(
    path,
    task: str = CLASSIFICATION,
    *,
    header: bool = False,
    test_path=None,
    n_train: int | None = None,
    batch_size: int = 20,
    epochs: int = 1,
) -> Dataset:
    """Read ``feature_1, ..., feature_d, label`` rows in file order.

    The test set comes from ``test_path`` when given, otherwise from the rows
    after the first ``n_train``. With neither, the test set is empty.
    """
    if task not in TASKS:
        raise DataError(f"unknown task {task!r}")
    rows = _read_rows(path, header)
    if rows.shape[0] == 0:
        raise DataError(f"{path}: no data rows")
    if task == CLASSIFICATION:
        bad = np.flatnonzero((rows[:, -1] != 0) & (rows[:, -1] != 1))
        if bad.size:
            raise DataError(
                f"{path}: data row {bad[0] + 1}: label {rows[bad[0], -1]} is not 0 or 1"
            )
    if test_path is not None:
        test = _read_rows(test_path, header)
        if test.shape[1] != rows.shape[1]:
            raise DataError(f"{test_path}: column count differs from {path}")
        train = rows if n_train is None else rows[:n_train]
    elif n_train is not None:
        train, test = rows[:n_train], rows[n_train:]
    else:
        train, test = rows, np.empty((0, rows.shape[1]))
    return Dataset(
        train[:, :-1], train[:, -1], test[:, :-1], test[:, -1],
        task=task, batch_size=batch_size, epochs=epochs, name=Path(path).stem,
    )


def save_csv(dataset: Dataset, path, *, split: str = "train") -> None:
    X, y = (dataset.X_train, dataset.y_train) if split == "train" else (dataset.X_test, dataset.y_test)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        for xi, yi in zip(X, y):
            writer.writerow([repr(float(v)) for v in xi] + [repr(float(yi))])


def minmax_scale(dataset: Dataset, *, labels: bool = False, feature_range=(0.0, 1.0)) -> Dataset:
    """Scale every feature to ``feature_range`` using train and test jointly.

    Constant columns map to the lower end. With ``labels=True`` (regression
    only) the labels are scaled to [0, 1]. The applied ranges go into ``meta``.
    """
    X = np.vstack([dataset.X_train, dataset.X_test])
    lo, hi = X.min(axis=0), X.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    a, b = feature_range
    meta = dict(dataset.meta, feature_min=lo.tolist(), feature_max=hi.tolist(), feature_range=[a, b])
    out = replace(
        dataset,
        X_train=a + (b - a) * (dataset.X_train - lo) / span,
        X_test=a + (b - a) * (dataset.X_test - lo) / span,
        meta=meta,
    )
    if labels:
        if dataset.task != REGRESSION:
            raise DataError("label scaling applies to regression only")
        y = np.concatenate([dataset.y_train, dataset.y_test])
        ylo, yhi = y.min(), y.max()
        yspan = yhi - ylo if yhi > ylo else 1.0
        meta.update(label_min=float(ylo), label_max=float(yhi))
        out = replace(
            out,
            y_train=(dataset.y_train - ylo) / yspan,
            y_test=(dataset.y_test - ylo) / yspan,
            meta=meta,
        )
    return out


def make_halfmoons(
    n_train: int = 100,
    n_test: int = 40,
    noise: float = 0.1,
    seed: int = 0,
    *,
    batch_size: int = 20,
    epochs: int = 1,
) -> Dataset:
    """Two interleaving half circles; class 0 is the upper arc.

    Points are drawn in one seeded pass and the first ``n_train`` become the
    training set.
    """
    if n_train <= 0 or n_test <= 0:
        raise DataError("n_train and n_test must be positive")
    if noise < 0:
        raise DataError("noise must be non-negative")
    from sklearn.datasets import make_moons

    X, y = make_moons(n_samples=n_train + n_test, shuffle=True, noise=noise or None, random_state=seed)
    return Dataset(
        X[:n_train], y[:n_train], X[n_train:], y[n_train:],
        task=CLASSIFICATION, batch_size=batch_size, epochs=epochs, name="halfmoons",
        meta={"seed": seed, "noise": noise},
    )


def load_iris_binary(seed: int = 0, *, n_train: int = 80, batch_size: int = 20, epochs: int = 4) -> Dataset:
    """Iris restricted to setosa (0) vs. versicolor (1), 80/20 split, scaled to [0, 1].

    The bundled file is sorted by class, so rows are permuted once with
    ``seed`` before the split.
    """
    from sklearn.datasets import load_iris

    bunch = load_iris()
    keep = bunch.target < 2
    X, y = bunch.data[keep], bunch.target[keep].astype(float)
    order = np.random.default_rng(seed).permutation(len(y))
    X, y = X[order], y[order]
    ds = Dataset(
        X[:n_train], y[:n_train], X[n_train:], y[n_train:],
        task=CLASSIFICATION, batch_size=batch_size, epochs=epochs, name="iris", meta={"seed": seed},
    )
    return minmax_scale(ds)


def load_diabetes_scaled(
    seed: int = 0, *, n_train: int = 320, n_test: int = 89, batch_size: int = 32, epochs: int = 4
) -> Dataset:
    """Diabetes regression with features and labels scaled to [0, 1]."""
    from sklearn.datasets import load_diabetes

    bunch = load_diabetes()
    order = np.random.default_rng(seed).permutation(len(bunch.target))[: n_train + n_test]
    X, y = bunch.data[order], bunch.target[order].astype(float)
    ds = Dataset(
        X[:n_train], y[:n_train], X[n_train:], y[n_train:],
        task=REGRESSION, batch_size=batch_size, epochs=epochs, name="diabetes", meta={"seed": seed},
    )
    return minmax_scale(ds, labels=True)


@dataclass(frozen=True)
class FeatureMap:
    """Fixed feature expansion applied before training.

    ``polynomial`` emits every monomial of total degree ``<= degree`` in
    graded lexicographic order (bias first when ``include_bias``), e.g. for
    inputs ``(a, b)`` and degree 2: ``1, a, b, a^2, ab, b^2``. The Halfmoons
    setup uses degree 3 without bias, which gives 9 features.
    """

    kind: str = "identity"
    degree: int = 1
    include_bias: bool = True
    input_dim: int | None = None

    def transformer(self, d: int):
        if self.input_dim is not None and self.input_dim != d:
            raise DataError(f"feature map expects d={self.input_dim}, dataset has d={d}")
        if self.kind == "identity":
            return FunctionTransformer(validate=True).fit(np.zeros((1, d)))
        if self.kind == "polynomial":
            if self.degree < 1:
                raise DataError("polynomial degree must be >= 1")
            return PolynomialFeatures(self.degree, include_bias=self.include_bias).fit(np.zeros((1, d)))
        raise DataError(f"unknown feature map {self.kind!r}")

    def output_dim(self, d: int) -> int:
        tr = self.transformer(d)
        return d if self.kind == "identity" else tr.n_output_features_

    def to_dict(self) -> dict:
        return {"kind": self.kind, "degree": self.degree, "include_bias": self.include_bias}


def expand(feature_map: FeatureMap, dataset: Dataset) -> Dataset:
    tr = feature_map.transformer(dataset.d)
    d_out = feature_map.output_dim(dataset.d)
    return replace(
        dataset,
        X_train=tr.transform(dataset.X_train),
        X_test=tr.transform(dataset.X_test) if dataset.n_test else np.empty((0, d_out)),
        meta=dict(dataset.meta, feature_map=feature_map.to_dict()),
    )
