"""Threat models, poisoning assignments and Hamming-ball neighborhoods."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .data import CLASSIFICATION, Dataset

BOUNDED = "bounded"
SUBSTITUTION = "substitution"

CLEAN = 0
POISONED = 1
UNDECIDED = -1

_TOL = 1e-12


class UnsupportedNeighborhood(ValueError):
    """The threat model has no finite action set to search over."""


@dataclass(frozen=True, eq=False)
class ThreatModel:
    """Adversary capabilities.

    ``bounded``: up to ``n`` samples move within an infinity-norm ball of
    radius ``epsilon``; labels may flip (``label_flip``, classification) or
    move by at most ``nu`` (regression).

    ``substitution``: up to ``n`` samples are replaced by arbitrary points of
    the box ``[domain_lo, domain_hi]`` with any label (0/1, or within
    ``label_domain`` for regression).

    ``grid`` declares a finite candidate set for continuous feature
    perturbations: ``"vertices"`` uses box corners (a seeded subset of at most
    ``max_corners``) plus ``n_interior`` seeded interior points.
    """

    kind: str = BOUNDED
    n: int = 0
    epsilon: float = 0.0
    nu: float = 0.0
    label_flip: bool = False
    domain_lo: object = None
    domain_hi: object = None
    label_domain: tuple = (0.0, 1.0)
    grid: str | None = None
    n_interior: int = 4
    max_corners: int = 64
    grid_seed: int = 0

    def __post_init__(self):
        if self.kind not in (BOUNDED, SUBSTITUTION):
            raise ValueError(f"unknown threat kind {self.kind!r}")
        if self.n < 0 or self.epsilon < 0 or self.nu < 0:
            raise ValueError("n, epsilon and nu must be non-negative")
        if self.kind == SUBSTITUTION:
            if self.domain_lo is None or self.domain_hi is None:
                raise ValueError("substitution needs domain_lo and domain_hi")
            lo = np.atleast_1d(np.asarray(self.domain_lo, dtype=float))
            hi = np.atleast_1d(np.asarray(self.domain_hi, dtype=float))
            if np.any(lo > hi):
                raise ValueError("domain_lo must not exceed domain_hi")
            if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
                raise ValueError("attacker domain must be bounded")
            object.__setattr__(self, "domain_lo", lo)
            object.__setattr__(self, "domain_hi", hi)
            if self.grid is None:
                object.__setattr__(self, "grid", "vertices")
        if self.grid not in (None, "vertices"):
            raise ValueError(f"unknown candidate grid {self.grid!r}")

    # -- helpers -----------------------------------------------------------
    def domain(self, d: int):
        lo = np.broadcast_to(self.domain_lo, (d,)).astype(float)
        hi = np.broadcast_to(self.domain_hi, (d,)).astype(float)
        return lo, hi

    def check(self, dataset: Dataset) -> None:
        if self.n > dataset.n_train:
            raise ValueError(f"budget n={self.n} exceeds N={dataset.n_train}")
        if self.kind == SUBSTITUTION:
            lo, hi = self.domain(dataset.d)
            if np.any(dataset.X_train < lo - _TOL) or np.any(dataset.X_train > hi + _TOL):
                raise ValueError("attacker domain must contain the clean training points")

    @property
    def continuous_features(self) -> bool:
        return self.kind == SUBSTITUTION or self.epsilon > 0

    def label_options(self, y: float, dataset: Dataset) -> list[float]:
        """Labels a poisoned sample may carry (classification)."""
        if self.kind == SUBSTITUTION or self.label_flip:
            return [y, 1.0 - y] if self.continuous_features else [1.0 - y]
        return [y]

    def feature_box(self, x: np.ndarray):
        """Box of poisoned feature values for a sample with clean features ``x``."""
        if self.kind == SUBSTITUTION:
            return self.domain(x.shape[0])
        return x - self.epsilon, x + self.epsilon

    def label_box(self, y: float, dataset: Dataset):
        """Interval covering the poisoned label."""
        if dataset.task == CLASSIFICATION:
            opts = self.label_options(y, dataset)
            return min(opts), max(opts)
        if self.kind == SUBSTITUTION:
            return self.label_domain
        return y - self.nu, y + self.nu

    def poison_boxes(self, dataset: Dataset, i: int):
        """Boxes ``(x_lo, x_hi, y_lo, y_hi)`` whose union holds every poisoned value of sample i.

        Classification labels are split per discrete value so each box has a
        degenerate label.
        """
        x, y = dataset.X_train[i], float(dataset.y_train[i])
        xlo, xhi = self.feature_box(x)
        if dataset.task == CLASSIFICATION:
            return [(xlo, xhi, lab, lab) for lab in self.label_options(y, dataset)]
        ylo, yhi = self.label_box(y, dataset)
        return [(xlo, xhi, ylo, yhi)]

    def has_effect(self, dataset: Dataset) -> bool:
        if self.n == 0:
            return False
        if self.continuous_features:
            return True
        if dataset.task == CLASSIFICATION:
            return self.label_flip
        return self.nu > 0

    def discrete_exact(self, dataset: Dataset) -> bool:
        """True when :meth:`actions` lists every distinct poisoned value."""
        if self.continuous_features:
            return False
        return dataset.task == CLASSIFICATION

    def actions(self, dataset: Dataset, i: int):
        """Finite candidate poisoned values ``(xs (M, d), ys (M,))`` for sample i.

        Label-only regression attacks use the two label vertices ``y ± nu``.
        """
        x, y = dataset.X_train[i], float(dataset.y_train[i])
        d = dataset.d
        if not self.has_effect(dataset):
            return np.empty((0, d)), np.empty(0)
        if not self.continuous_features:
            if dataset.task == CLASSIFICATION:
                return x[None, :].copy(), np.array([1.0 - y])
            return np.stack([x, x]), np.array([y - self.nu, y + self.nu])
        if self.grid is None:
            raise UnsupportedNeighborhood(
                "continuous feature perturbations need a declared candidate grid (grid='vertices')"
            )
        pts = self._grid_points(d)
        if self.kind == BOUNDED:
            pts = x + self.epsilon * (2.0 * pts - 1.0)
        else:
            lo, hi = self.domain(d)
            pts = lo + (hi - lo) * pts
        if dataset.task == CLASSIFICATION:
            labs = self.label_options(y, dataset)
        else:
            labs = list(self.label_box(y, dataset))
        xs = np.repeat(pts, len(labs), axis=0)
        ys = np.tile(np.array(labs, dtype=float), len(pts))
        return xs, ys

    def _grid_points(self, d: int) -> np.ndarray:
        """Candidate points in unit-cube coordinates, shared by every sample."""
        rng = np.random.default_rng(self.grid_seed)
        if 2 ** d <= self.max_corners:
            corners = np.array(list(itertools.product((0.0, 1.0), repeat=d)))
        else:
            corners = rng.integers(0, 2, size=(self.max_corners, d)).astype(float)
            corners = np.unique(corners, axis=0)
        interior = rng.uniform(0.0, 1.0, size=(self.n_interior, d))
        return np.vstack([corners, interior])

    def to_dict(self) -> dict:
        out = {
            "kind": self.kind, "n": self.n, "epsilon": self.epsilon, "nu": self.nu,
            "label_flip": self.label_flip, "grid": self.grid, "n_interior": self.n_interior,
            "max_corners": self.max_corners, "grid_seed": self.grid_seed,
        }
        if self.kind == SUBSTITUTION:
            out.update(domain_lo=np.asarray(self.domain_lo).tolist(), domain_hi=np.asarray(self.domain_hi).tolist(),
                       label_domain=list(self.label_domain))
        return out

    @classmethod
    def from_dict(cls, data: dict) -> ThreatModel:
        data = dict(data)
        if "label_domain" in data:
            data["label_domain"] = tuple(data["label_domain"])
        return cls(**data)


@dataclass(frozen=True, eq=False)
class PoisonAssignment:
    """Per-sample state: clean, poisoned to ``(x[i], y[i])``, or undecided."""

    status: np.ndarray
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        st = np.array(self.status, dtype=np.int8)
        x = np.array(self.x, dtype=float)
        y = np.array(self.y, dtype=float)
        if x.ndim != 2 or x.shape[0] != st.shape[0] or y.shape != st.shape:
            raise ValueError("status, x and y must align")
        if np.any((st != CLEAN) & (st != POISONED) & (st != UNDECIDED)):
            raise ValueError("status entries must be CLEAN, POISONED or UNDECIDED")
        for arr in (st, x, y):
            arr.setflags(write=False)
        object.__setattr__(self, "status", st)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @classmethod
    def clean(cls, dataset: Dataset) -> PoisonAssignment:
        return cls(np.zeros(dataset.n_train), dataset.X_train, dataset.y_train)

    @classmethod
    def undecided(cls, dataset: Dataset) -> PoisonAssignment:
        return cls(np.full(dataset.n_train, UNDECIDED), dataset.X_train, dataset.y_train)

    @classmethod
    def from_flips(cls, dataset: Dataset, indices) -> PoisonAssignment:
        a = cls.clean(dataset)
        for i in indices:
            a = a.with_poison(i, dataset.X_train[i], 1.0 - dataset.y_train[i])
        return a

    def __len__(self):
        return self.status.shape[0]

    @property
    def budget_used(self) -> int:
        return int(np.sum(self.status == POISONED))

    @property
    def is_complete(self) -> bool:
        return not np.any(self.status == UNDECIDED)

    @property
    def poisoned_indices(self) -> np.ndarray:
        return np.flatnonzero(self.status == POISONED)

    @property
    def undecided_indices(self) -> np.ndarray:
        return np.flatnonzero(self.status == UNDECIDED)

    def _with(self, i, state, xi=None, yi=None) -> PoisonAssignment:
        st, x, y = self.status.copy(), self.x.copy(), self.y.copy()
        st[i] = state
        if xi is not None:
            x[i] = xi
            y[i] = yi
        return PoisonAssignment(st, x, y)

    def with_clean(self, i: int, dataset: Dataset) -> PoisonAssignment:
        return self._with(i, CLEAN, dataset.X_train[i], dataset.y_train[i])

    def with_poison(self, i: int, xi, yi) -> PoisonAssignment:
        return self._with(i, POISONED, np.asarray(xi, dtype=float), float(yi))

    def with_undecided(self, i: int, dataset: Dataset) -> PoisonAssignment:
        return self._with(i, UNDECIDED, dataset.X_train[i], dataset.y_train[i])

    def materialize(self, dataset: Dataset):
        """Training arrays with poisoned values in place (clean elsewhere)."""
        mask = self.status == POISONED
        X = np.where(mask[:, None], self.x, dataset.X_train)
        Y = np.where(mask, self.y, dataset.y_train)
        return X, Y

    def complete_with_clean(self, dataset: Dataset) -> PoisonAssignment:
        a = self
        for i in self.undecided_indices:
            a = a.with_clean(int(i), dataset)
        return a

    def key(self) -> bytes:
        mask = self.status == POISONED
        return self.status.tobytes() + np.where(mask[:, None], self.x, 0).tobytes() + np.where(mask, self.y, 0).tobytes()

    def digest(self) -> str:
        import hashlib

        return hashlib.sha256(self.key()).hexdigest()[:16]

    def to_json_list(self) -> list[dict]:
        return [{"index": int(i), "x": self.x[i].tolist(), "y": float(self.y[i])} for i in self.poisoned_indices]

    @classmethod
    def from_json_list(cls, dataset: Dataset, items) -> PoisonAssignment:
        a = cls.clean(dataset)
        for item in items:
            a = a.with_poison(int(item["index"]), item["x"], item["y"])
        return a


@dataclass(frozen=True)
class Violation:
    index: int | None
    family: str
    detail: str


def validate(tm: ThreatModel, a: PoisonAssignment, dataset: Dataset) -> list[Violation]:
    """Every constraint the assignment breaks; an empty list means valid."""
    out = []
    if len(a) != dataset.n_train or a.x.shape[1] != dataset.d:
        return [Violation(None, "shape", f"assignment covers {len(a)} samples, dataset has {dataset.n_train}")]
    if a.budget_used > tm.n:
        out.append(Violation(None, "budget", f"{a.budget_used} poisoned samples exceed budget n={tm.n}"))
    classification = dataset.task == CLASSIFICATION
    for i in a.poisoned_indices:
        i = int(i)
        x, y = dataset.X_train[i], float(dataset.y_train[i])
        xt, yt = a.x[i], float(a.y[i])
        if tm.kind == BOUNDED:
            dev = float(np.max(np.abs(xt - x))) if x.size else 0.0
            if dev > tm.epsilon + _TOL:
                out.append(Violation(i, "feature_bound", f"|x~ - x|_inf = {dev:g} > epsilon = {tm.epsilon:g}"))
            if classification:
                allowed = {y, 1.0 - y} if tm.label_flip else {y}
                if yt not in allowed:
                    out.append(Violation(i, "label", f"label {yt:g} not allowed (clean label {y:g})"))
            elif abs(yt - y) > tm.nu + _TOL:
                out.append(Violation(i, "label", f"|y~ - y| = {abs(yt - y):g} > nu = {tm.nu:g}"))
        else:
            lo, hi = tm.domain(dataset.d)
            if np.any(xt < lo - _TOL) or np.any(xt > hi + _TOL):
                out.append(Violation(i, "domain", "substituted features leave the attacker domain"))
            if classification:
                if yt not in (0.0, 1.0):
                    out.append(Violation(i, "label", f"label {yt:g} is not 0 or 1"))
            elif not tm.label_domain[0] - _TOL <= yt <= tm.label_domain[1] + _TOL:
                out.append(Violation(i, "label", f"label {yt:g} outside {tm.label_domain}"))
    return out


# ---------------------------------------------------------------------------
# discrete action encoding used by neighborhood search
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ActionTable:
    """Per-sample actions; code 0 is clean and codes 1..M index ``xs``/``ys``."""

    xs: list
    ys: list
    feature_change: bool = True

    @classmethod
    def build(cls, tm: ThreatModel, dataset: Dataset) -> ActionTable:
        xs, ys = [], []
        for i in range(dataset.n_train):
            ax, ay = tm.actions(dataset, i)
            xs.append(ax)
            ys.append(ay)
        moves = any(
            len(ay) and not np.array_equal(ax, np.broadcast_to(dataset.X_train[i], ax.shape))
            for i, (ax, ay) in enumerate(zip(xs, ys))
        )
        return cls(xs, ys, moves)

    def n_actions(self, i: int) -> int:
        return len(self.ys[i])

    def codes_of(self, a: PoisonAssignment) -> np.ndarray:
        """Action code per sample; raises if a poisoned value is off the table."""
        if not a.is_complete:
            raise ValueError("neighborhoods need a complete center")
        codes = np.zeros(len(a), dtype=np.int64)
        for i in a.poisoned_indices:
            match = np.flatnonzero((self.ys[i] == a.y[i]) & np.all(self.xs[i] == a.x[i], axis=1))
            if match.size == 0:
                raise UnsupportedNeighborhood(f"sample {i}: poisoned value is not a declared candidate")
            codes[i] = match[0] + 1
        return codes

    def assignment(self, dataset: Dataset, codes) -> PoisonAssignment:
        codes = np.asarray(codes)
        status = (codes > 0).astype(np.int8)
        X = dataset.X_train.copy()
        Y = dataset.y_train.copy()
        for i in np.flatnonzero(codes):
            X[i] = self.xs[i][codes[i] - 1]
            Y[i] = self.ys[i][codes[i] - 1]
        return PoisonAssignment(status, X, Y)

    def arrays(self, dataset: Dataset, codes: np.ndarray):
        """Stacked training arrays for code matrix (A, N)."""
        codes = np.asarray(codes)
        A = codes.shape[0]
        X = np.broadcast_to(dataset.X_train, (A,) + dataset.X_train.shape)
        Y = np.broadcast_to(dataset.y_train, (A, dataset.n_train)).copy()
        feature_change = self.feature_change
        if feature_change:
            X = X.copy()
        rows, cols = np.nonzero(codes)
        for r, c in zip(rows, cols):
            Y[r, c] = self.ys[c][codes[r, c] - 1]
            if feature_change:
                X[r, c] = self.xs[c][codes[r, c] - 1]
        if not feature_change:
            X = dataset.X_train[None]
        return X, Y


def shell(codes: np.ndarray, n_actions, radius: int, budget: int) -> Iterator[tuple]:
    """Moves at action-Hamming distance exactly ``radius`` that respect the budget.

    Yields ``(positions, new_codes)`` tuples in a fixed order: number of
    touched poisoned positions ascending, then lexicographic positions, then
    lexicographic replacement codes.
    """
    codes = np.asarray(codes)
    poisoned = [int(i) for i in np.flatnonzero(codes)]
    clean = [int(i) for i in np.flatnonzero(codes == 0) if n_actions[i] > 0]
    used = len(poisoned)
    for p in range(0, radius + 1):
        q = radius - p
        if p > len(poisoned) or q > len(clean):
            continue
        # each of the q clean positions becomes poisoned; at best all p go clean
        if used + q - p > budget:
            continue
        for pp in itertools.combinations(poisoned, p):
            for qq in itertools.combinations(clean, q):
                positions = tuple(sorted(pp + qq))
                alts = []
                for i in positions:
                    if codes[i]:
                        alts.append([c for c in range(n_actions[i] + 1) if c != codes[i]])
                    else:
                        alts.append(range(1, n_actions[i] + 1))
                for new in itertools.product(*alts):
                    gone = sum(1 for i, c in zip(positions, new) if codes[i] and c == 0)
                    if used + q - gone <= budget:
                        yield positions, new


def neighborhood(a: PoisonAssignment, radius: int, tm: ThreatModel, dataset: Dataset,
                 table: ActionTable | None = None) -> Iterator[PoisonAssignment]:
    """Complete assignments at action-Hamming distance 1..radius from ``a``.

    The center itself is not yielded. With radius at least
    ``a.budget_used + tm.n`` the stream plus the center covers every feasible
    assignment over the action table.
    """
    if radius < 1:
        raise ValueError("radius must be >= 1")
    table = table or ActionTable.build(tm, dataset)
    codes = table.codes_of(a)
    sizes = [table.n_actions(i) for i in range(dataset.n_train)]
    for r in range(1, radius + 1):
        for positions, new in shell(codes, sizes, r, tm.n):
            c = codes.copy()
            c[list(positions)] = new
            yield table.assignment(dataset, c)


def count_feasible(n_train: int, n: int) -> int:
    """Number of label-flip assignments with at most ``n`` flips."""
    return sum(math.comb(n_train, k) for k in range(min(n, n_train) + 1))
