"""Sound interval relaxation of a poisoned SGD trajectory.

One pass bounds every quantity of every training iteration: parameters,
pre-activations, losses, loss derivatives and per-sample gradients. The
result supplies the big-M constants of the MIQCP encoding and the dual bounds
used by branch-and-bound.

Rounding: endpoints are pushed outward after every operation by
``ROUND_EPS`` times the magnitude of the terms involved. Round-to-nearest
errors are far below that, so containment holds for concrete float replays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import CLASSIFICATION, Dataset
from .objectives import DOS, TARGETED, TEST_ERROR, ObjectiveSpec
from .threat import CLEAN, POISONED, SUBSTITUTION, UNDECIDED, PoisonAssignment, ThreatModel, validate
from .train import HINGE, Params, TrainConfig

ROUND_EPS = 1e-12
DIRECT = "direct"
AUXILIARY = "auxiliary"

ON, OFF, UNSTABLE = "on", "off", "unstable"


class BoundError(ValueError):
    """Raised for inconsistent inputs or non-finite bounds."""


@dataclass(frozen=True, eq=False)
class Interval:
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo <= self.hi:
            raise BoundError(f"empty interval [{self.lo}, {self.hi}]")

    @property
    def width(self) -> float:
        return self.hi - self.lo

    def __contains__(self, v) -> bool:
        return self.lo <= v <= self.hi


@dataclass(eq=False)
class IntervalTensor:
    """Elementwise bounds ``lo <= x <= hi`` on an array."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        if self.lo.shape != self.hi.shape:
            raise BoundError(f"bound shapes differ: {self.lo.shape} vs {self.hi.shape}")

    @classmethod
    def point(cls, x) -> IntervalTensor:
        x = np.asarray(x, dtype=float)
        return cls(x.copy(), x.copy())

    @property
    def shape(self):
        return self.lo.shape

    @property
    def width(self) -> np.ndarray:
        return self.hi - self.lo

    def __getitem__(self, idx) -> IntervalTensor:
        return IntervalTensor(self.lo[idx], self.hi[idx])

    def contains(self, x, tol: float = 0.0) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return (self.lo - tol <= x) & (x <= self.hi + tol)

    def hull(self, other: IntervalTensor) -> IntervalTensor:
        return IntervalTensor(np.minimum(self.lo, other.lo), np.maximum(self.hi, other.hi))

    def intersect(self, other: IntervalTensor) -> IntervalTensor:
        lo, hi = np.maximum(self.lo, other.lo), np.minimum(self.hi, other.hi)
        if np.any(lo > hi):
            raise BoundError("intervals do not intersect")
        return IntervalTensor(lo, hi)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.lo)) and np.all(np.isfinite(self.hi)))

    def to_dict(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}


# ---------------------------------------------------------------------------
# raw endpoint arithmetic on (lo, hi) array pairs
# ---------------------------------------------------------------------------

def _out(lo, hi, mag):
    pad = ROUND_EPS * mag
    return lo - pad, hi + pad


def _mag(lo, hi):
    return np.maximum(np.abs(lo), np.abs(hi))


def _mul(alo, ahi, blo, bhi):
    p1, p2, p3, p4 = alo * blo, alo * bhi, ahi * blo, ahi * bhi
    lo = np.minimum(np.minimum(p1, p2), np.minimum(p3, p4))
    hi = np.maximum(np.maximum(p1, p2), np.maximum(p3, p4))
    return _out(lo, hi, _mag(lo, hi))


def _add(alo, ahi, blo, bhi):
    lo, hi = alo + blo, ahi + bhi
    return _out(lo, hi, _mag(alo, ahi) + _mag(blo, bhi))


def _sum(lo, hi, axis):
    return _out(lo.sum(axis=axis), hi.sum(axis=axis), _mag(lo, hi).sum(axis=axis))


def _scale(c, lo, hi):
    """``c * [lo, hi]`` for a scalar ``c``."""
    a, b = c * lo, c * hi
    lo2, hi2 = np.minimum(a, b), np.maximum(a, b)
    return _out(lo2, hi2, _mag(lo2, hi2))


def _square(lo, hi):
    slo, shi = lo * lo, hi * hi
    top = np.maximum(slo, shi)
    bottom = np.where((lo <= 0) & (hi >= 0), 0.0, np.minimum(slo, shi))
    return _out(bottom, top, top)


def _affine(Wlo, Whi, zlo, zhi, blo=None, bhi=None):
    """Interval ``W z + b``; ``W``: (n, m), ``z``: (S, m) -> (S, n)."""
    plo, phi = _mul(Wlo[None, :, :], Whi[None, :, :], zlo[:, None, :], zhi[:, None, :])
    lo, hi = _sum(plo, phi, axis=2)
    if blo is not None:
        lo, hi = _add(lo, hi, blo[None, :], bhi[None, :])
    return lo, hi


def iv_mul(a: IntervalTensor, b: IntervalTensor) -> IntervalTensor:
    return IntervalTensor(*_mul(a.lo, a.hi, b.lo, b.hi))


def iv_affine(W: IntervalTensor, x: IntervalTensor, b: IntervalTensor) -> IntervalTensor:
    """Bounds on ``W x + b`` over all members of the three boxes.

    ``x`` may be a vector (m,) or a stack of vectors (S, m).
    """
    W_lo, W_hi = np.atleast_2d(W.lo), np.atleast_2d(W.hi)
    vec = x.lo.ndim == 1
    xlo, xhi = np.atleast_2d(x.lo), np.atleast_2d(x.hi)
    if W_lo.shape[1] != xlo.shape[1] or np.atleast_1d(b.lo).shape[0] != W_lo.shape[0]:
        raise BoundError(f"shape mismatch: W {W_lo.shape}, x {x.shape}, b {b.shape}")
    lo, hi = _affine(W_lo, W_hi, xlo, xhi, np.atleast_1d(b.lo), np.atleast_1d(b.hi))
    return IntervalTensor(lo[0], hi[0]) if vec else IntervalTensor(lo, hi)


def iv_relu(u: IntervalTensor):
    """ReLU image and phase per neuron.

    A neuron is ``on`` only when its lower bound is strictly positive: at
    ``u = 0`` the concrete network treats the unit as inactive, so a lower
    bound of exactly zero stays ``unstable``.
    """
    z = IntervalTensor(np.maximum(u.lo, 0.0), np.maximum(u.hi, 0.0))
    phase = np.where(u.lo > 0, ON, np.where(u.hi <= 0, OFF, UNSTABLE))
    return z, phase


# ---------------------------------------------------------------------------
# per-sample forward/backward bounds
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class SampleBounds:
    """Bounds for a stack of samples at one iteration (leading axis = sample)."""

    x: IntervalTensor
    y: IntervalTensor
    u: list
    z: list
    yhat: IntervalTensor
    r: IntervalTensor | None
    loss: IntervalTensor
    dloss: IntervalTensor
    grad_u: list
    grad_z: list
    grad_W: list

    def take(self, idx) -> SampleBounds:
        def sel(v):
            if v is None:
                return None
            if isinstance(v, list):
                return [sel(e) for e in v]
            return v[idx]

        return SampleBounds(*(sel(getattr(self, f)) for f in _SB_FIELDS))

    @staticmethod
    def hull_all(parts: list) -> SampleBounds:
        def h(vals):
            if vals[0] is None:
                return None
            if isinstance(vals[0], list):
                return [h([v[k] for v in vals]) for k in range(len(vals[0]))]
            out = vals[0]
            for v in vals[1:]:
                out = out.hull(v)
            return out

        return SampleBounds(*(h([getattr(p, f) for p in parts]) for f in _SB_FIELDS))


_SB_FIELDS = ("x", "y", "u", "z", "yhat", "r", "loss", "dloss", "grad_u", "grad_z", "grad_W")


@dataclass(eq=False)
class ParamBounds:
    W: list
    b: list

    @classmethod
    def point(cls, params: Params) -> ParamBounds:
        return cls([IntervalTensor.point(w) for w in params.weights], [IntervalTensor.point(b) for b in params.biases])

    def contains(self, params: Params, tol: float = 0.0) -> bool:
        return all(np.all(W.contains(w, tol)) for W, w in zip(self.W, params.weights)) and all(
            np.all(B.contains(b, tol)) for B, b in zip(self.b, params.biases)
        )

    def max_width(self) -> float:
        return max(max(float(np.max(W.width)) for W in self.W), max(float(np.max(B.width)) for B in self.b))


def sample_bounds(theta: ParamBounds, xlo, xhi, ylo, yhi, loss: str) -> SampleBounds:
    """Forward and backward interval pass for a stack of input boxes."""
    xlo, xhi = np.atleast_2d(xlo).astype(float), np.atleast_2d(xhi).astype(float)
    ylo, yhi = np.atleast_1d(ylo).astype(float), np.atleast_1d(yhi).astype(float)
    K = len(theta.W)
    us, zs, masks = [], [(xlo, xhi)], []
    zlo, zhi = xlo, xhi
    for k in range(K):
        W, b = theta.W[k], theta.b[k]
        ulo, uhi = _affine(W.lo, W.hi, zlo, zhi, b.lo, b.hi)
        us.append((ulo, uhi))
        if k < K - 1:
            zlo, zhi = np.maximum(ulo, 0.0), np.maximum(uhi, 0.0)
            zs.append((zlo, zhi))
            masks.append(((ulo > 0).astype(float), (uhi > 0).astype(float)))
    yhlo, yhhi = us[-1][0][:, 0], us[-1][1][:, 0]
    if loss == HINGE:
        slo, shi = 2.0 * ylo - 1.0, 2.0 * yhi - 1.0
        mlo, mhi = _mul(slo, shi, yhlo, yhhi)
        rlo, rhi = _out(1.0 - mhi, 1.0 - mlo, 1.0 + _mag(mlo, mhi))
        Llo, Lhi = np.maximum(rlo, 0.0), np.maximum(rhi, 0.0)
        hlo, hhi = (rlo > 0).astype(float), (rhi > 0).astype(float)
        glo, ghi = _mul(-shi, -slo, hlo, hhi)
        r = IntervalTensor(rlo, rhi)
    else:
        elo, ehi = _add(yhlo, yhhi, -yhi, -ylo)
        Llo, Lhi = _square(elo, ehi)
        glo, ghi = 2.0 * elo, 2.0 * ehi
        r = None
    gu = [None] * K
    gz = [None] * K
    gW = [None] * K
    gulo, guhi = glo[:, None], ghi[:, None]
    for k in range(K - 1, -1, -1):
        gu[k] = IntervalTensor(gulo, guhi)
        zl, zh = zs[k]
        gW[k] = IntervalTensor(*_mul(gulo[:, :, None], guhi[:, :, None], zl[:, None, :], zh[:, None, :]))
        if k:
            W = theta.W[k]
            gzlo, gzhi = _affine(W.lo.T, W.hi.T, gulo, guhi)
            gz[k - 1] = IntervalTensor(gzlo, gzhi)
            mlo_, mhi_ = masks[k - 1]
            gulo, guhi = _mul(gzlo, gzhi, mlo_, mhi_)
    return SampleBounds(
        x=IntervalTensor(xlo, xhi), y=IntervalTensor(ylo, yhi),
        u=[IntervalTensor(*p) for p in us], z=[IntervalTensor(*p) for p in zs[1:]],
        yhat=IntervalTensor(yhlo, yhhi), r=r, loss=IntervalTensor(Llo, Lhi), dloss=IntervalTensor(glo, ghi),
        grad_u=gu, grad_z=gz, grad_W=gW,
    )


def _top_sum(dev, r, axis=0, largest=True):
    """Sum of the ``r`` largest (or most negative) entries along ``axis``, clipped at 0."""
    if r <= 0 or dev.shape[axis] == 0:
        return np.zeros(np.delete(dev.shape, axis) if dev.ndim > 1 else ())
    if largest:
        v = np.maximum(dev, 0.0)
        part = -np.sort(-v, axis=axis)
    else:
        v = np.minimum(dev, 0.0)
        part = np.sort(v, axis=axis)
    return np.take(part, np.arange(min(r, dev.shape[axis])), axis=axis).sum(axis=axis)


# ---------------------------------------------------------------------------
# trajectory propagation
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class IterationBounds:
    """Bounds at iteration ``t`` (uses parameters ``θ^(t-1)``).

    ``nominal`` covers every batch sample in its node state: fixed samples at
    their fixed value; undecided samples at the hull of clean and poisoned
    inputs (direct) or at their clean input (auxiliary). ``clean`` and
    ``poison`` hold the split bounds for the undecided samples listed in
    ``open_idx``.
    """

    t: int
    batch: np.ndarray
    nominal: SampleBounds
    open_idx: np.ndarray
    clean: SampleBounds | None
    poison: SampleBounds | None
    deviations: int
    step: float


@dataclass(eq=False)
class BoundState:
    mode: str
    params: list
    iterations: list
    test: SampleBounds | None
    partial: PoisonAssignment
    remaining: int
    shared_poison: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def test_logits(self) -> IntervalTensor | None:
        return None if self.test is None else self.test.yhat

    def is_degenerate(self, tol: float = 1e-9) -> bool:
        widths = [p.max_width() for p in self.params]
        return max(widths) <= tol

    def contains(self, trace, assignment: PoisonAssignment, tol: float = 0.0) -> list[str]:
        """Describe every place the concrete ``trace`` escapes these bounds.

        ``assignment`` is the complete assignment that produced ``trace``; it
        must extend :attr:`partial`.
        """
        bad = []
        for t, (pb, p) in enumerate(zip(self.params, trace.params)):
            if not pb.contains(p, tol):
                bad.append(f"params at t={t}")
        for ib, rec in zip(self.iterations, trace.iterations):
            pos = {int(i): j for j, i in enumerate(ib.open_idx)}
            for j, i in enumerate(ib.batch):
                i = int(i)
                chans = [("nominal", ib.nominal, j)]
                if i in pos:
                    poisoned = assignment.status[i] == POISONED
                    if poisoned:
                        chans = [("poison", ib.poison, pos[i])]
                        if self.mode == DIRECT:
                            chans.append(("nominal", ib.nominal, j))
                    else:
                        chans.append(("clean", ib.clean, pos[i]))
                for name, sb, jj in chans:
                    for what, bound, val in _concrete_pairs(sb, jj, rec, j):
                        if not np.all(bound.contains(val, tol)):
                            bad.append(f"t={ib.t} sample={i} {name}.{what}")
        if self.test is not None and trace.test_logits is not None:
            if not np.all(self.test.yhat.contains(trace.test_logits, tol)):
                bad.append("test logits")
        return bad


def _concrete_pairs(sb: SampleBounds, j, rec, jr):
    out = [("yhat", sb.yhat[j], rec.yhat[jr]), ("loss", sb.loss[j], rec.loss[jr]), ("dloss", sb.dloss[j], rec.dloss[jr])]
    if sb.r is not None:
        out.append(("r", sb.r[j], rec.r[jr]))
    for k, u in enumerate(sb.u):
        out.append((f"u{k + 1}", u[j], rec.u[k][jr]))
    for k, z in enumerate(sb.z):
        out.append((f"z{k + 1}", z[j], rec.z[k][jr]))
    for k, g in enumerate(sb.grad_W):
        out.append((f"dW{k + 1}", g[j], rec.grad_W[k][jr]))
        out.append((f"du{k + 1}", sb.grad_u[k][j], rec.grad_u[k][jr]))
    return out


def _box_of(tm: ThreatModel, dataset: Dataset, i: int):
    boxes = tm.poison_boxes(dataset, i)
    xlo = np.min([b[0] for b in boxes], axis=0)
    xhi = np.max([b[1] for b in boxes], axis=0)
    return xlo, xhi, min(b[2] for b in boxes), max(b[3] for b in boxes)


def propagate(config: TrainConfig, dataset: Dataset, tm: ThreatModel, partial: PoisonAssignment | None = None,
              mode: str = AUXILIARY) -> BoundState:
    """Bound the whole training trajectory over every completion of ``partial``.

    Both modes cap the number of samples that deviate from clean in each batch
    by the remaining budget ``r``. ``direct`` propagates every undecided sample
    with the hull of its clean and poisoned inputs and sums those gradient
    bounds. ``auxiliary`` propagates clean and poisoned inputs separately and
    adds only the ``r`` largest deviations per parameter.
    """
    if mode not in (DIRECT, AUXILIARY):
        raise BoundError(f"unknown mode {mode!r}")
    config.check_task(dataset)
    tm.check(dataset)
    partial = PoisonAssignment.undecided(dataset) if partial is None else partial
    violations = validate(tm, partial, dataset)
    if violations:
        raise BoundError(f"inconsistent partial assignment: {violations[0].detail}")
    remaining = tm.n - partial.budget_used
    live = remaining > 0 and tm.has_effect(dataset)
    status = partial.status
    Xn, Yn = partial.materialize(dataset)
    shared = tm.kind == SUBSTITUTION

    theta = ParamBounds.point(config.init)
    params = [theta]
    iterations = []
    shared_cache = None
    for t in range(1, dataset.n_iterations + 1):
        idx = dataset.batch(t)
        open_idx = idx[status[idx] == UNDECIDED] if live else idx[:0]
        xlo, xhi = Xn[idx].copy(), Xn[idx].copy()
        ylo, yhi = Yn[idx].copy(), Yn[idx].copy()
        clean = poison = None
        if open_idx.size:
            clean = sample_bounds(theta, dataset.X_train[open_idx], dataset.X_train[open_idx],
                                  dataset.y_train[open_idx], dataset.y_train[open_idx], config.loss)
            if shared:
                boxes = tm.poison_boxes(dataset, int(open_idx[0]))
                parts = [sample_bounds(theta, b[0], b[1], b[2], b[3], config.loss) for b in boxes]
                one = SampleBounds.hull_all(parts)
                poison = one.take(np.zeros(open_idx.size, dtype=int))
                shared_cache = one
            else:
                per = []
                for i in open_idx:
                    boxes = tm.poison_boxes(dataset, int(i))
                    parts = [sample_bounds(theta, b[0], b[1], b[2], b[3], config.loss) for b in boxes]
                    per.append(SampleBounds.hull_all(parts))
                poison = _stack_bounds(per)
            if mode == DIRECT:
                where = np.searchsorted(idx, open_idx)
                for j, i in zip(where, open_idx):
                    bx = _box_of(tm, dataset, int(i))
                    xlo[j] = np.minimum(bx[0], dataset.X_train[i])
                    xhi[j] = np.maximum(bx[1], dataset.X_train[i])
                    ylo[j] = min(bx[2], dataset.y_train[i])
                    yhi[j] = max(bx[3], dataset.y_train[i])
        nominal = sample_bounds(theta, xlo, xhi, ylo, yhi, config.loss)
        step = config.lr_at(t) / len(idx)
        dev = min(remaining, open_idx.size)
        fixed = np.ones(len(idx), dtype=bool)
        if open_idx.size:
            fixed[np.searchsorted(idx, open_idx)] = False
        alt = poison if mode == AUXILIARY else (nominal.take(~fixed) if open_idx.size else None)
        newW, newb = [], []
        for k in range(len(theta.W)):
            for fam, prev, out in (("grad_W", theta.W[k], newW), ("grad_u", theta.b[k], newb)):
                g = getattr(nominal, fam)[k][fixed]
                slo, shi = _sum(g.lo, g.hi, axis=0)
                if open_idx.size:
                    cg = getattr(clean, fam)[k]
                    clo, chi = _sum(cg.lo, cg.hi, axis=0)
                    slo, shi = _add(slo, shi, clo, chi)
                    if dev:
                        ag = getattr(alt, fam)[k]
                        up = _top_sum(ag.hi - cg.hi, dev, largest=True)
                        down = _top_sum(ag.lo - cg.lo, dev, largest=False)
                        slo, shi = _out(slo + down, shi + up, _mag(slo, shi) + np.abs(down) + up)
                lo, hi = _add(prev.lo, prev.hi, -step * shi, -step * slo)
                out.append(IntervalTensor(lo, hi))
        theta = ParamBounds(newW, newb)
        params.append(theta)
        iterations.append(IterationBounds(t, idx, nominal, open_idx, clean, poison, dev, step))
    test = None
    if dataset.n_test:
        test = sample_bounds(theta, dataset.X_test, dataset.X_test, dataset.y_test, dataset.y_test, config.loss)
    return BoundState(mode, params, iterations, test, partial, remaining, shared,
                      meta={"shared_poison": shared_cache})


def _stack_bounds(parts: list) -> SampleBounds:
    def cat(vals):
        if vals[0] is None:
            return None
        if isinstance(vals[0], list):
            return [cat([v[k] for v in vals]) for k in range(len(vals[0]))]
        return IntervalTensor(np.concatenate([v.lo for v in vals]), np.concatenate([v.hi for v in vals]))

    return SampleBounds(*(cat([getattr(p, f) for p in parts]) for f in _SB_FIELDS))


# ---------------------------------------------------------------------------
# test-logit tightening
# ---------------------------------------------------------------------------

def group_test_points(dataset: Dataset, groups: int, seed: int = 0) -> np.ndarray:
    """Group label per test sample.

    Two groups split by class (classification); otherwise seeded
    farthest-point clustering on the features.
    """
    n = dataset.n_test
    if groups < 1:
        raise BoundError("need at least one group")
    if groups > n:
        raise BoundError(f"{groups} groups requested for {n} test samples")
    if groups == 1:
        return np.zeros(n, dtype=int)
    if groups == n:
        return np.arange(n)
    if groups == 2 and dataset.task == CLASSIFICATION and len(np.unique(dataset.y_test)) == 2:
        return dataset.y_test.astype(int)
    X = dataset.X_test
    centers = [int(np.random.default_rng(seed).integers(n))]
    dist = np.linalg.norm(X - X[centers[0]], axis=1)
    while len(centers) < groups:
        nxt = int(np.argmax(dist))
        centers.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(X - X[nxt], axis=1))
    d = np.stack([np.linalg.norm(X - X[c], axis=1) for c in centers], axis=1)
    return np.argmin(d, axis=1)


def _dir_contrib(sb: SampleBounds, glo, ghi):
    """Per-sample bounds on ``dW·x + db`` over test boxes (linear model).

    ``sb`` covers S samples; the test boxes are (G, d). Returns (S, G).
    """
    qlo, qhi = _affine(sb.x.lo, sb.x.hi, glo, ghi)  # (G, S)
    qlo, qhi = _out(qlo.T + 1.0, qhi.T + 1.0, 1.0 + _mag(qlo.T, qhi.T))
    g = sb.grad_u[0]
    return _mul(g.lo[:, :1], g.hi[:, :1], qlo, qhi)


def trajectory_logit_bounds(bs: BoundState, config: TrainConfig, dataset: Dataset, glo, ghi) -> IntervalTensor:
    """Logit bounds over test boxes from the budget-consistent trajectory sum.

    For a single-layer model the final logit is ``θ^(0)·x̂`` minus the
    step-weighted gradient contributions of every (iteration, sample) pair.
    Each sample is either poisoned in every iteration it appears in or in
    none, and at most the remaining budget of undecided samples are
    poisoned, so the ``r`` largest per-sample deviations are added once
    globally instead of once per batch.
    """
    glo, ghi = np.atleast_2d(glo), np.atleast_2d(ghi)
    G = glo.shape[0]
    N = dataset.n_train
    W0, b0 = config.init.weights[0], config.init.biases[0]
    baselo, basehi = _affine(glo, ghi, W0, W0)  # (1, G)
    baselo, basehi = _out(baselo[0] + b0[0], basehi[0] + b0[0], 1.0 + _mag(baselo[0], basehi[0]))
    fixed_lo, fixed_hi = np.zeros(G), np.zeros(G)
    clo, chi = np.zeros((N, G)), np.zeros((N, G))
    plo, phi = np.zeros((N, G)), np.zeros((N, G))
    is_open = np.zeros(N, dtype=bool)
    for ib in bs.iterations:
        nlo, nhi = _dir_contrib(ib.nominal, glo, ghi)
        nlo, nhi = _scale(ib.step, nlo, nhi)
        openset = set(int(i) for i in ib.open_idx)
        keep = np.array([int(i) not in openset for i in ib.batch])
        if keep.any():
            fixed_lo, fixed_hi = _add(fixed_lo, fixed_hi, *_sum(nlo[keep], nhi[keep], axis=0))
        if ib.open_idx.size:
            a, b = _scale(ib.step, *_dir_contrib(ib.clean, glo, ghi))
            c, d = _scale(ib.step, *_dir_contrib(ib.poison, glo, ghi))
            rows = ib.open_idx
            clo[rows], chi[rows] = _add(clo[rows], chi[rows], a, b)
            plo[rows], phi[rows] = _add(plo[rows], phi[rows], c, d)
            is_open[rows] = True
    r = bs.remaining
    ol = np.flatnonzero(is_open)
    olo, ohi = _sum(clo[ol], chi[ol], axis=0)
    up = _top_sum(clo[ol] - plo[ol], r, largest=True)
    down = _top_sum(chi[ol] - phi[ol], r, largest=False)
    totlo, tothi = _add(fixed_lo, fixed_hi, olo, ohi)
    lo = baselo - tothi + down
    hi = basehi - totlo + up
    mag = _mag(baselo, basehi) + _mag(totlo, tothi) + up - down
    return IntervalTensor(*_out(lo, hi, mag))


def obbt_test_hull(bs: BoundState, config: TrainConfig, dataset: Dataset, groups: int, seed: int = 0) -> IntervalTensor:
    """Tightened test-logit bounds shared within groups of test points.

    Each group's bounding box is pushed through the trajectory bound (single
    linear layer) or through the final parameter box (deeper networks); every
    member gets the intersection of its own bound with its group's bound.
    """
    labels = group_test_points(dataset, groups, seed)
    own = bs.test.yhat
    lo, hi = own.lo.copy(), own.hi.copy()
    gids = np.unique(labels)
    boxes_lo = np.stack([dataset.X_test[labels == g].min(axis=0) for g in gids])
    boxes_hi = np.stack([dataset.X_test[labels == g].max(axis=0) for g in gids])
    if len(config.init.weights) == 1:
        grp = trajectory_logit_bounds(bs, config, dataset, boxes_lo, boxes_hi)
    else:
        sb = sample_bounds(bs.params[-1], boxes_lo, boxes_hi, np.zeros(len(gids)), np.zeros(len(gids)), config.loss)
        grp = sb.yhat
    for j, g in enumerate(gids):
        m = labels == g
        lo[m] = np.maximum(lo[m], grp.lo[j])
        hi[m] = np.minimum(hi[m], grp.hi[j])
    if np.any(lo > hi):
        raise BoundError("tightened test bounds are empty")
    return IntervalTensor(lo, hi)


# ---------------------------------------------------------------------------
# dual bounds and big-M extraction
# ---------------------------------------------------------------------------

def dual_bound(bs: BoundState, objective: ObjectiveSpec, dataset: Dataset, test_logits: IntervalTensor | None = None) -> float:
    """Upper bound on the objective over every completion of ``bs.partial``."""
    if objective.kind in (TEST_ERROR, TARGETED):
        iv = test_logits if test_logits is not None else bs.test_logits
        if iv is None:
            raise BoundError("test-error objective needs test-logit bounds")
        can1 = iv.hi >= 0
        can0 = iv.lo < 0
        if objective.kind == TEST_ERROR:
            hits = np.where(dataset.y_test == 1, can0, can1)
        else:
            t = objective.target_array(dataset.n_test)
            hits = np.where(t == 1, can1, np.where(t == 0, can0, False))
        return float(np.sum(hits))
    if objective.kind == DOS:
        N = dataset.n_train
        fixed = 0.0
        mag = 0.0
        cl, pl = np.zeros(N), np.zeros(N)
        for ib in bs.iterations:
            openset = set(int(i) for i in ib.open_idx)
            for j, i in enumerate(ib.batch):
                if int(i) not in openset:
                    fixed += float(ib.nominal.loss.hi[j])
                    mag += abs(float(ib.nominal.loss.hi[j]))
            if ib.open_idx.size:
                cl[ib.open_idx] += ib.clean.loss.hi
                pl[ib.open_idx] += ib.poison.loss.hi
        total = fixed + float(np.sum(cl)) + float(_top_sum(pl - cl, bs.remaining))
        return total + ROUND_EPS * (mag + float(np.sum(np.abs(cl)) + np.sum(np.abs(pl))))
    raise BoundError(f"unsupported objective {objective.kind}")


@dataclass(eq=False)
class BigMTable:
    """Bounds for every encoded variable family.

    ``params[t]`` bounds θ^(t). ``train[t]`` holds the per-batch-position
    :class:`SampleBounds` of iteration t as propagated (clean inputs for
    undecided samples in auxiliary mode); ``direct[t]`` covers every value a
    sample may take, clean or poisoned, and feeds direct encodings.
    ``aux[t]`` bounds one substituted sample at iteration t; ``test`` bounds
    the test passes, with ``test_logits`` possibly tightened.
    """

    params: list
    train: list
    batches: list
    aux: list | None
    test: SampleBounds | None
    test_logits: IntervalTensor | None
    mode: str
    partial: PoisonAssignment | None = None
    direct: list | None = None

    def check_finite(self) -> None:
        def walk(v, where):
            if v is None:
                return
            if isinstance(v, list):
                for k, e in enumerate(v):
                    walk(e, f"{where}[{k}]")
            elif isinstance(v, IntervalTensor):
                if not v.is_finite():
                    raise BoundError(f"non-finite bound in {where}; is the attacker domain bounded?")
            elif isinstance(v, SampleBounds):
                for f in _SB_FIELDS:
                    walk(getattr(v, f), f"{where}.{f}")
            elif isinstance(v, ParamBounds):
                walk(v.W, f"{where}.W")
                walk(v.b, f"{where}.b")

        walk(self.params, "params")
        walk(self.train, "train")
        walk(self.direct, "direct")
        walk(self.aux, "aux")
        walk(self.test, "test")
        walk(self.test_logits, "test_logits")

    def relu_phase(self, t: int, j: int, k: int) -> np.ndarray:
        u = self.train[t - 1].u[k]
        return np.where(u.lo[j] > 0, ON, np.where(u.hi[j] <= 0, OFF, UNSTABLE))

    def to_dict(self) -> dict:
        """Nested ``t -> i -> k -> {lo, hi}`` export of the big-M constants."""
        out = {"mode": self.mode, "relu": {}, "hinge": {}, "test": {}}
        for t, (sb, idx) in enumerate(zip(self.train, self.batches), start=1):
            rt = out["relu"].setdefault(str(t), {})
            ht = out["hinge"].setdefault(str(t), {})
            for j, i in enumerate(idx):
                rt[str(int(i))] = {str(k + 1): {"lo": u.lo[j].tolist(), "hi": u.hi[j].tolist()}
                                   for k, u in enumerate(sb.u[:-1])}
                if sb.r is not None:
                    ht[str(int(i))] = {"lo": float(sb.r.lo[j]), "hi": float(sb.r.hi[j])}
        if self.test_logits is not None:
            for i in range(self.test_logits.lo.shape[0]):
                out["test"][str(i)] = {"lo": float(self.test_logits.lo[i]), "hi": float(self.test_logits.hi[i]),
                                       "gap": float(self.test_logits.hi[i] - self.test_logits.lo[i])}
        return out


def _hull_open(ib: IterationBounds) -> SampleBounds:
    """Per-position bounds covering both channels of every undecided sample."""
    if not ib.open_idx.size:
        return ib.nominal
    where = {int(i): j for j, i in enumerate(ib.open_idx)}
    rows = []
    for p, i in enumerate(ib.batch):
        one = ib.nominal.take(np.array([p]))
        if int(i) in where:
            j = np.array([where[int(i)]])
            one = SampleBounds.hull_all([one, ib.poison.take(j)])
        rows.append(one)
    return _stack_bounds(rows)


def big_m_tables(bs: BoundState, test_logits: IntervalTensor | None = None) -> BigMTable:
    """Collect encoding bounds from a propagated state.

    In auxiliary mode undecided samples take their clean-input bounds and the
    shared substitution bounds populate ``aux``.
    """
    train = [ib.nominal for ib in bs.iterations]
    aux = None
    if bs.mode == AUXILIARY:
        aux = []
        for ib in bs.iterations:
            if ib.poison is not None and ib.open_idx.size:
                aux.append(ib.poison.take(np.array([0])))
            else:
                aux.append(None)
    direct = train
    if bs.mode == AUXILIARY:
        direct = [_hull_open(ib) for ib in bs.iterations]
    tl = test_logits if test_logits is not None else bs.test_logits
    table = BigMTable(bs.params, train, [ib.batch for ib in bs.iterations], aux, bs.test, tl, bs.mode, bs.partial,
                      direct)
    table.check_finite()
    return table
