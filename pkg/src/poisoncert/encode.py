"""Mixed-integer quadratically constrained encoding of poisoning, training and evaluation.

The model is exact for the concrete replay semantics: every complete poisoning
assignment that passes threat-model validation induces one variable valuation
(see :func:`witness`) that satisfies every constraint, and its objective equals
the concrete attack objective.

Variable names are dotted paths: the family comes first, followed by the
indices that apply, in the fixed order ``t i j k r c`` (iteration, training
sample, auxiliary sample, layer, row, column). Layers are numbered from 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import CLASSIFICATION, Dataset
from .interval import AUXILIARY, BigMTable, BoundError
from .objectives import DOS, TARGETED, TEST_ERROR, ObjectiveSpec
from .threat import POISONED, SUBSTITUTION, UNDECIDED, PoisonAssignment, ThreatModel, validate
from .train import HINGE, TrainConfig, _backward, _forward, _loss

CONTINUOUS = "continuous"
BINARY = "binary"
TIE_EPS = 1e-6
FEAS_TOL = 1e-7


class EncodeError(ValueError):
    """Raised when a model cannot be built from the supplied inputs."""


@dataclass(frozen=True)
class VarRef:
    name: str
    kind: str
    lo: float
    hi: float


@dataclass(frozen=True)
class Constraint:
    """``sum(c * v) + sum(c * v1 * v2) <sense> rhs`` over variable indices."""

    name: str
    lin: tuple
    quad: tuple
    sense: str
    rhs: float

    @property
    def is_quadratic(self) -> bool:
        return bool(self.quad)


@dataclass(eq=False)
class MiqcpModel:
    variables: list = field(default_factory=list)
    constraints: list = field(default_factory=list)
    obj_lin: list = field(default_factory=list)
    obj_quad: list = field(default_factory=list)
    obj_const: float = 0.0
    sense: str = "maximize"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.index = {v.name: k for k, v in enumerate(self.variables)}

    def add_var(self, name: str, kind: str = CONTINUOUS, lo: float = 0.0, hi: float = 1.0) -> int:
        if name in self.index:
            raise EncodeError(f"duplicate variable {name}")
        lo, hi = float(lo), float(hi)
        if not (np.isfinite(lo) and np.isfinite(hi)):
            raise EncodeError(f"infinite bound on {name}")
        if lo > hi:
            raise EncodeError(f"empty bounds on {name}: [{lo}, {hi}]")
        self.index[name] = len(self.variables)
        self.variables.append(VarRef(name, kind, lo, hi))
        return self.index[name]

    def add_con(self, name: str, lin=(), quad=(), sense: str = "=", rhs: float = 0.0) -> None:
        lin = tuple((float(c), int(v)) for c, v in lin if c != 0)
        quad = tuple((float(c), int(a), int(b)) for c, a, b in quad if c != 0)
        self.constraints.append(Constraint(name, lin, quad, sense, float(rhs)))

    def var(self, name: str) -> VarRef:
        return self.variables[self.index[name]]

    def census(self) -> dict:
        n_bin = sum(v.kind == BINARY for v in self.variables)
        n_quad = sum(c.is_quadratic for c in self.constraints)
        fam = {}
        for v in self.variables:
            if v.kind == BINARY:
                key = v.name.split(".", 1)[0]
                fam[key] = fam.get(key, 0) + 1
        return {
            "variables": len(self.variables), "binaries": n_bin, "continuous": len(self.variables) - n_bin,
            "constraints": len(self.constraints), "quadratic_constraints": n_quad,
            "linear_constraints": len(self.constraints) - n_quad, "binaries_by_family": dict(sorted(fam.items())),
        }

    def objective_value(self, values: np.ndarray) -> float:
        v = self.obj_const
        for c, a in self.obj_lin:
            v += c * values[a]
        for c, a, b in self.obj_quad:
            v += c * values[a] * values[b]
        return float(v)


def vname(fam: str, t=None, i=None, j=None, k=None, r=None, c=None) -> str:
    parts = [fam]
    for key, val in (("t", t), ("i", i), ("j", j), ("k", k), ("r", r), ("c", c)):
        if val is not None:
            parts.append(f"{key}{val}")
    return ".".join(parts)


# ---------------------------------------------------------------------------
# builder
# ---------------------------------------------------------------------------

class _Builder:
    def __init__(self, config, dataset, tm, objective, table, aux_mode, linearize):
        self.cfg, self.ds, self.tm, self.obj, self.tab = config, dataset, tm, objective, table
        self.aux, self.lin = aux_mode, linearize
        self.m = MiqcpModel()
        self.sizes = config.init.sizes
        self.K = len(self.sizes) - 1
        self.hinge = config.loss == HINGE
        self.products = []

    # -- small helpers ------------------------------------------------------
    def var(self, name, lo, hi, kind=CONTINUOUS):
        return self.m.add_var(name, kind, lo, hi)

    def binvar(self, name, lo=0.0, hi=1.0):
        return self.m.add_var(name, BINARY, lo, hi)

    def product(self, name, b, v, coef=1.0):
        """Terms for ``coef * b * v`` with ``b`` binary: raw quadratic or McCormick."""
        if not self.lin:
            return (), ((coef, b, v),)
        vb = self.m.variables[v]
        L, U = vb.lo, vb.hi
        w = self.var(name, min(0.0, L), max(0.0, U))
        self.products.append((w, b, v))
        self.m.add_con(f"mc1.{name}", [(1, w), (-U, b)], (), "<=", 0.0)
        self.m.add_con(f"mc2.{name}", [(1, w), (-L, b)], (), ">=", 0.0)
        self.m.add_con(f"mc3.{name}", [(1, w), (-1, v), (-L, b)], (), "<=", -L)
        self.m.add_con(f"mc4.{name}", [(1, w), (-1, v), (-U, b)], (), ">=", -U)
        return ((coef, w),), ()

    # -- perturbation block -------------------------------------------------
    def perturbation(self):
        ds, tm, m = self.ds, self.tm, self.m
        partial = self.tab.partial
        d = ds.d
        budget_on = tm.n > 0 and tm.has_effect(ds)
        self.s = []
        for i in range(ds.n_train):
            st = partial.status[i] if partial is not None else UNDECIDED
            lo = 1.0 if st == POISONED else 0.0
            hi = 0.0 if (not budget_on or st == 0) else 1.0
            self.s.append(self.binvar(vname("s", i=i), lo, hi))
        m.add_con("budget", [(1.0, s) for s in self.s], (), "<=", float(tm.n))
        if self.aux:
            self._aux_block()
            return
        self.xt, self.yt = [], []
        for i in range(ds.n_train):
            x, y = ds.X_train[i], float(ds.y_train[i])
            st = partial.status[i] if partial is not None else UNDECIDED
            if tm.kind == SUBSTITUTION:
                flo, fhi = tm.domain(d)
            else:
                flo, fhi = x - tm.epsilon, x + tm.epsilon
            if st == POISONED:
                flo = fhi = partial.x[i]
            xs = [self.var(vname("xt", i=i, c=c), min(flo[c], x[c]), max(fhi[c], x[c])) for c in range(d)]
            self.xt.append(xs)
            for c in range(d):
                if tm.kind == SUBSTITUTION:
                    # x(1-s) + L s <= xt <= x(1-s) + U s
                    m.add_con(vname("feat_lo", i=i, c=c), [(1, xs[c]), (x[c] - flo[c], self.s[i])], (), ">=", x[c])
                    m.add_con(vname("feat_hi", i=i, c=c), [(1, xs[c]), (x[c] - fhi[c], self.s[i])], (), "<=", x[c])
                else:
                    eps = tm.epsilon
                    m.add_con(vname("feat_lo", i=i, c=c), [(1, xs[c]), (eps, self.s[i])], (), ">=", x[c])
                    m.add_con(vname("feat_hi", i=i, c=c), [(1, xs[c]), (-eps, self.s[i])], (), "<=", x[c])
            if ds.task == CLASSIFICATION:
                free = tm.kind == SUBSTITUTION or tm.label_flip
                ylo, yhi = (0.0, 1.0) if free else (y, y)
                if st == POISONED:
                    ylo = yhi = float(partial.y[i])
                yv = self.binvar(vname("yt", i=i), ylo, yhi)
                # y(1-s) <= yt <= y(1-s) + s
                m.add_con(vname("lab_lo", i=i), [(1, yv), (y, self.s[i])], (), ">=", y)
                m.add_con(vname("lab_hi", i=i), [(1, yv), (y - (1.0 if free else 0.0), self.s[i])], (), "<=", y)
            else:
                if tm.kind == SUBSTITUTION:
                    llo, lhi = tm.label_domain
                else:
                    llo, lhi = y - tm.nu, y + tm.nu
                if st == POISONED:
                    llo = lhi = float(partial.y[i])
                yv = self.var(vname("yt", i=i), min(llo, y), max(lhi, y))
                m.add_con(vname("lab_lo", i=i), [(1, yv), (y - llo, self.s[i])], (), ">=", y)
                m.add_con(vname("lab_hi", i=i), [(1, yv), (y - lhi, self.s[i])], (), "<=", y)
            self.yt.append(yv)

    def _aux_block(self):
        ds, tm, m = self.ds, self.tm, self.m
        d, n = ds.d, tm.n
        lo, hi = tm.domain(d)
        self.st = [[self.binvar(vname("st", i=i, j=j), 0.0, self.m.variables[self.s[i]].hi) for j in range(n)]
                   for i in range(ds.n_train)]
        for i in range(ds.n_train):
            m.add_con(vname("subst", i=i), [(1.0, v) for v in self.st[i]] + [(-1.0, self.s[i])], (), "=", 0.0)
        for j in range(n):
            m.add_con(vname("slot", j=j), [(1.0, self.st[i][j]) for i in range(ds.n_train)], (), "<=", 1.0)
        self.xa = [[self.var(vname("xa", j=j, c=c), lo[c], hi[c]) for c in range(d)] for j in range(n)]
        if ds.task == CLASSIFICATION:
            self.ya = [self.binvar(vname("ya", j=j)) for j in range(n)]
        else:
            self.ya = [self.var(vname("ya", j=j), *tm.label_domain) for j in range(n)]

    # -- parameters ----------------------------------------------------------
    def parameters(self):
        self.W, self.b = [], []
        for t, pb in enumerate(self.tab.params):
            Wt, bt = [], []
            for k in range(self.K):
                Wl, bl = pb.W[k], pb.b[k]
                rows, cols = Wl.lo.shape
                Wt.append([[self.var(vname("W", t=t, k=k + 1, r=r, c=c), Wl.lo[r, c], Wl.hi[r, c])
                            for c in range(cols)] for r in range(rows)])
                bt.append([self.var(vname("b", t=t, k=k + 1, r=r), bl.lo[r], bl.hi[r]) for r in range(rows)])
            self.W.append(Wt)
            self.b.append(bt)

    # -- one forward/backward pass -------------------------------------------
    def sample_pass(self, t, tag, sb, j, xin, yin, theta_t):
        """Emit the training pass of one sample.

        ``tag`` is ``{"i": i}`` or ``{"j": j}``; ``xin``/``yin`` are either
        variable indices (lists / int) or constants (arrays / float), flagged
        by ``isinstance``. Returns per-sample gradient variable indices.
        """
        m, K = self.m, self.K
        W, b = self.W[theta_t], self.b[theta_t]
        x_const = not isinstance(xin, list)
        y_const = not isinstance(yin, int)
        z_prev = xin
        zs_prev = []  # inputs per layer
        acts = []
        us = []
        for k in range(K):
            zs_prev.append(z_prev)
            rows = self.sizes[k + 1]
            uk = []
            for r in range(rows):
                u = self.var(vname("u", t=t, **tag, k=k + 1, r=r), sb.u[k].lo[j, r], sb.u[k].hi[j, r])
                lin = [(1.0, u), (-1.0, b[k][r])]
                quad = []
                for c in range(self.sizes[k]):
                    if k == 0 and x_const:
                        lin.append((-float(z_prev[c]), W[k][r][c]))
                    else:
                        quad.append((-1.0, W[k][r][c], z_prev[c]))
                m.add_con(vname("fwd", t=t, **tag, k=k + 1, r=r), lin, quad, "=", 0.0)
                uk.append(u)
            us.append(uk)
            if k < K - 1:
                zk, ak = [], []
                for r in range(rows):
                    lo, hi = sb.u[k].lo[j, r], sb.u[k].hi[j, r]
                    z, a = self.relu(vname("", t=t, **tag, k=k + 1, r=r)[1:], uk[r], lo, hi)
                    zk.append(z)
                    ak.append(a)
                acts.append(ak)
                z_prev = zk
        yhat = us[-1][0]
        key = vname("", t=t, **tag)[1:]
        if self.hinge:
            rv = self.var(f"r.{key}", sb.r.lo[j], sb.r.hi[j])
            # r = 1 - (2y - 1) yhat
            if y_const:
                m.add_con(f"margin.{key}", [(1, rv), (2 * yin - 1, yhat)], (), "=", 1.0)
            else:
                lt, qt = self.product(f"yy.{key}", yin, yhat, 2.0)
                m.add_con(f"margin.{key}", [(1, rv), (-1, yhat), *lt], qt, "=", 1.0)
            Lv, h = self.relu(key, rv, sb.r.lo[j], sb.r.hi[j], loss=True)
            g = self.var(f"g.{key}", sb.dloss.lo[j], sb.dloss.hi[j])
            # g = -(2y - 1) h
            if not isinstance(h, float):
                if y_const:
                    m.add_con(f"dloss.{key}", [(1, g), (2 * yin - 1, h)], (), "=", 0.0)
                else:
                    lt, qt = self.product(f"yh.{key}", yin, h, 2.0)
                    m.add_con(f"dloss.{key}", [(1, g), (-1, h), *lt], qt, "=", 0.0)
            else:
                hc = float(h)
                if y_const:
                    m.add_con(f"dloss.{key}", [(1, g)], (), "=", -(2 * yin - 1) * hc)
                else:
                    m.add_con(f"dloss.{key}", [(1, g), (2 * hc, yin)], (), "=", hc)
        else:
            Lv = self.var(f"L.{key}", sb.loss.lo[j], sb.loss.hi[j])
            g = self.var(f"g.{key}", sb.dloss.lo[j], sb.dloss.hi[j])
            if y_const:
                m.add_con(f"loss.{key}", [(1, Lv), (2 * yin, yhat)], [(-1, yhat, yhat)], "=", yin * yin)
                m.add_con(f"dloss.{key}", [(1, g), (-2, yhat)], (), "=", -2 * yin)
            else:
                m.add_con(f"loss.{key}", [(1, Lv)], [(-1, yhat, yhat), (2, yhat, yin), (-1, yin, yin)], "=", 0.0)
                m.add_con(f"dloss.{key}", [(1, g), (-2, yhat), (2, yin)], (), "=", 0.0)
        # backward
        dW = [None] * K
        gu = [None] * K
        gu[K - 1] = [g]
        for k in range(K - 1, -1, -1):
            zp = zs_prev[k]
            const_in = k == 0 and x_const
            dWk = []
            for r in range(self.sizes[k + 1]):
                row = []
                for c in range(self.sizes[k]):
                    v = self.var(vname("dW", t=t, **tag, k=k + 1, r=r, c=c),
                                 sb.grad_W[k].lo[j, r, c], sb.grad_W[k].hi[j, r, c])
                    if const_in:
                        m.add_con(vname("bwdW", t=t, **tag, k=k + 1, r=r, c=c), [(1, v), (-float(zp[c]), gu[k][r])])
                    else:
                        m.add_con(vname("bwdW", t=t, **tag, k=k + 1, r=r, c=c), [(1, v)], [(-1, gu[k][r], zp[c])])
                    row.append(v)
                dWk.append(row)
            dW[k] = dWk
            if k:
                guk = []
                for c in range(self.sizes[k]):
                    gz = self.var(vname("gz", t=t, **tag, k=k, r=c), sb.grad_z[k - 1].lo[j, c], sb.grad_z[k - 1].hi[j, c])
                    m.add_con(vname("bwdz", t=t, **tag, k=k, r=c), [(1, gz)],
                              [(-1, W[k][r][c], gu[k][r]) for r in range(self.sizes[k + 1])])
                    gv = self.var(vname("gu", t=t, **tag, k=k, r=c), sb.grad_u[k - 1].lo[j, c], sb.grad_u[k - 1].hi[j, c])
                    a = acts[k - 1][c]
                    name = vname("bwdu", t=t, **tag, k=k, r=c)
                    if isinstance(a, float):
                        m.add_con(name, [(1, gv), (-a, gz)])
                    else:
                        lt, qt = self.product(vname("ga", t=t, **tag, k=k, r=c), a, gz, -1.0)
                        m.add_con(name, [(1, gv), *lt], qt)
                    guk.append(gv)
                gu[k - 1] = guk
        return dW, gu, Lv

    def relu(self, key, u, lo, hi, loss=False):
        """Big-M ReLU; returns ``(z, a)`` with ``a`` a binary index or a 0/1 float."""
        m = self.m
        zfam, afam = ("L", "h") if loss else ("z", "a")
        if lo > 0:
            z = self.var(f"{zfam}.{key}", lo, hi)
            m.add_con(f"{zfam}_on.{key}", [(1, z), (-1, u)])
            return z, 1.0
        if hi <= 0:
            z = self.var(f"{zfam}.{key}", 0.0, 0.0)
            m.add_con(f"{zfam}_off.{key}", [(1, z)])
            return z, 0.0
        z = self.var(f"{zfam}.{key}", 0.0, hi)
        a = self.binvar(f"{afam}.{key}")
        m.add_con(f"{zfam}_ge.{key}", [(1, z), (-1, u)], (), ">=", 0.0)
        m.add_con(f"{zfam}_act.{key}", [(1, z), (-1, u), (-lo, a)], (), "<=", -lo)
        m.add_con(f"{zfam}_gate.{key}", [(1, z), (-hi, a)], (), "<=", 0.0)
        return z, a

    # -- training trajectory -------------------------------------------------
    def training(self):
        ds, m, K = self.ds, self.m, self.K
        self.losses = []
        for t in range(1, ds.n_iterations + 1):
            idx = ds.batch(t)
            sb = self.tab.train[t - 1] if self.aux else self.tab.direct[t - 1]
            step = self.cfg.lr_at(t) / len(idx)
            grads = []
            for j, i in enumerate(idx):
                i = int(i)
                if self.aux:
                    xin, yin = ds.X_train[i], float(ds.y_train[i])
                else:
                    xin, yin = self.xt[i], self.yt[i]
                dW, gu, Lv = self.sample_pass(t, {"i": i}, sb, j, xin, yin, t - 1)
                grads.append((i, dW, gu))
                self.losses.append((t, i, Lv))
            aux_grads = []
            if self.aux:
                asb = self.tab.aux[t - 1]
                if asb is None:
                    raise EncodeError(f"no auxiliary-sample bounds for iteration {t}")
                for jj in range(self.tm.n):
                    dW, gu, Lv = self.sample_pass(t, {"j": jj}, asb, 0, self.xa[jj], self.ya[jj], t - 1)
                    aux_grads.append((jj, dW, gu))
                    self.losses.append((t, ("aux", jj), Lv))
            for k in range(K):
                for r in range(self.sizes[k + 1]):
                    for c in range(self.sizes[k] + 1):
                        is_b = c == self.sizes[k]
                        new = self.b[t][k][r] if is_b else self.W[t][k][r][c]
                        old = self.b[t - 1][k][r] if is_b else self.W[t - 1][k][r][c]
                        lin, quad = [(1.0, new), (-1.0, old)], []
                        for i, dW, gu in grads:
                            v = gu[k][r] if is_b else dW[k][r][c]
                            lin.append((step, v))
                            if self.aux:
                                lt, qt = self.product(vname("sd", t=t, i=i, k=k + 1, r=r, c=None if is_b else c),
                                                      self.s[i], v, -step)
                                lin.extend(lt)
                                quad.extend(qt)
                                for jj, dWa, gua in aux_grads:
                                    va = gua[k][r] if is_b else dWa[k][r][c]
                                    lt, qt = self.product(
                                        vname("sa", t=t, i=i, j=jj, k=k + 1, r=r, c=None if is_b else c),
                                        self.st[i][jj], va, step)
                                    lin.extend(lt)
                                    quad.extend(qt)
                        name = vname("upd_b" if is_b else "upd_W", t=t, k=k + 1, r=r, c=None if is_b else c)
                        m.add_con(name, lin, quad, "=", 0.0)

    # -- evaluation ----------------------------------------------------------
    def evaluation(self):
        ds, m, K, obj = self.ds, self.m, self.K, self.obj
        T = ds.n_iterations
        if obj.kind == DOS:
            aux_loss = {}
            for t, who, Lv in self.losses:
                if isinstance(who, tuple):
                    aux_loss.setdefault(t, []).append((who[1], Lv))
            for t, who, Lv in self.losses:
                if not self.aux:
                    m.obj_lin.append((1.0, Lv))
                elif isinstance(who, tuple):
                    continue
                else:
                    i = who
                    m.obj_lin.append((1.0, Lv))
                    lt, qt = self.product(f"sL.t{t}.i{i}", self.s[i], Lv, -1.0)
                    m.obj_lin.extend(lt)
                    m.obj_quad.extend(qt)
                    for jj, La in aux_loss.get(t, ()):
                        lt, qt = self.product(f"sLa.t{t}.i{i}.j{jj}", self.st[i][jj], La, 1.0)
                        m.obj_lin.extend(lt)
                        m.obj_quad.extend(qt)
            return
        if ds.n_test == 0:
            raise EncodeError("test-set objective needs test samples")
        test, logits = self.tab.test, self.tab.test_logits
        targets = obj.target_array(ds.n_test) if obj.kind == TARGETED else None
        W, b = self.W[T], self.b[T]
        for i in range(ds.n_test):
            zp = ds.X_test[i]
            for k in range(K):
                zk = []
                for r in range(self.sizes[k + 1]):
                    if k == K - 1:
                        lo, hi = logits.lo[i], logits.hi[i]
                    else:
                        lo, hi = test.u[k].lo[i, r], test.u[k].hi[i, r]
                    u = self.var(vname("tu", i=i, k=k + 1, r=r), lo, hi)
                    lin = [(1.0, u), (-1.0, b[k][r])]
                    quad = []
                    for c in range(self.sizes[k]):
                        if k == 0:
                            lin.append((-float(zp[c]), W[k][r][c]))
                        else:
                            quad.append((-1.0, W[k][r][c], zp[c]))
                    m.add_con(vname("tfwd", i=i, k=k + 1, r=r), lin, quad)
                    if k < K - 1:
                        z, _ = self.relu(f"test.i{i}.k{k + 1}.r{r}", u, lo, hi)
                        zk.append(z)
                    else:
                        logit, L, U = u, lo, hi
                zp = zk
            p = self.binvar(vname("p", i=i))
            # L (1 - p) <= zK <= U p - eps (1 - p)
            m.add_con(vname("pred_lo", i=i), [(1, logit), (L, p)], (), ">=", L)
            m.add_con(vname("pred_hi", i=i), [(1, logit), (-(U + TIE_EPS), p)], (), "<=", -TIE_EPS)
            want = None
            if obj.kind == TEST_ERROR:
                want = 0 if ds.y_test[i] == 1 else 1
            elif targets[i] >= 0:
                want = int(targets[i])
            if want == 1:
                m.obj_lin.append((1.0, p))
            elif want == 0:
                m.obj_lin.append((-1.0, p))
                m.obj_const += 1.0


def build(config: TrainConfig, dataset: Dataset, tm: ThreatModel, objective: ObjectiveSpec, bounds: BigMTable,
          aux_mode: bool = False, linearize: bool = False) -> MiqcpModel:
    """Compile the full poisoning-training-evaluation problem.

    ``bounds`` must come from :func:`poisoncert.interval.big_m_tables` on the
    same inputs; with ``aux_mode`` it must be an auxiliary-mode table. Stable
    ReLUs and hinges are written as linear equalities; only unstable ones get
    a binary. ``linearize`` replaces every binary-times-continuous product by
    an exact McCormick block.
    """
    config.check_task(dataset)
    tm.check(dataset)
    if aux_mode:
        if tm.kind != SUBSTITUTION:
            raise EncodeError("the auxiliary formulation applies to substitution threat models")
        if bounds.mode != AUXILIARY:
            raise EncodeError("auxiliary formulation needs auxiliary-mode bounds")
        if bounds.partial is not None and np.any(bounds.partial.status == POISONED):
            raise EncodeError("auxiliary formulation needs bounds with no fixed poisoned samples")
    if len(bounds.params) != dataset.n_iterations + 1:
        raise EncodeError("bounds do not match the training schedule")
    try:
        bounds.check_finite()
    except BoundError as exc:
        raise EncodeError(str(exc)) from exc
    b = _Builder(config, dataset, tm, objective, bounds, aux_mode, linearize)
    b.perturbation()
    b.parameters()
    b.training()
    b.evaluation()
    m = b.m
    m.meta = {"tie_break_epsilon": TIE_EPS, "aux_mode": bool(aux_mode), "linearized": bool(linearize),
              "objective": objective.kind, "loss": config.loss, "products": b.products}
    return m


# ---------------------------------------------------------------------------
# closed-form census and witnesses
# ---------------------------------------------------------------------------

def expected_census(sizes, n_train: int, epochs: int, n_iterations: int, n_test: int, *, loss: str = HINGE,
                    unstable_relu: int = 0, unstable_hinge: int = 0, objective: str = TEST_ERROR) -> dict:
    """Variable and constraint counts of a direct, non-linearized model.

    ``unstable_relu`` counts unstable hidden neurons over all training and
    test passes, ``unstable_hinge`` unstable hinges over all training passes.
    """
    d = sizes[0]
    layers = list(zip(sizes[:-1], sizes[1:]))
    P = sum(m * n + n for m, n in layers)
    H = sum(sizes[1:-1])
    units = sum(sizes[1:])
    wts = sum(m * n for m, n in layers)
    S = n_train * epochs
    nt = n_test if objective != DOS else 0
    per_pass = units + H + wts + 2 * H + (3 if loss == HINGE else 2)
    variables = n_train * (d + 2) + (n_iterations + 1) * P + S * per_pass + nt * (units + H + 1)
    binaries = n_train * (2 if loss == HINGE else 1) + unstable_relu + unstable_hinge + nt
    per_con = units + H + wts + 2 * H + (3 if loss == HINGE else 2)
    constraints = (1 + n_train * (2 * d + 2) + S * per_con + 2 * unstable_relu + 2 * unstable_hinge
                   + n_iterations * P + nt * (units + H + 2))
    return {"variables": variables + unstable_relu + unstable_hinge, "binaries": binaries, "constraints": constraints}


def _pass_values(params, x, y, loss):
    Ws = [w[None] for w in params.weights]
    bs = [b[None] for b in params.biases]
    us, zs = _forward(Ws, bs, np.asarray(x, float)[None, None, :])
    yhat = us[-1][:, :, 0]
    L, g, r, h = _loss(yhat, np.array([[float(y)]]), loss)
    dWs, _, gus, gzs = _backward(Ws, us, zs, g)
    return {
        "u": [u[0, 0] for u in us], "z": [z[0, 0] for z in zs[1:]], "yhat": float(yhat[0, 0]),
        "r": None if r is None else float(r[0, 0]), "h": None if h is None else float(h[0, 0]),
        "L": float(L[0, 0]), "g": float(g[0, 0]), "dW": [v[0, 0] for v in dWs], "gu": [v[0, 0] for v in gus],
        "gz": [None if v is None else v[0, 0] for v in gzs],
    }


def witness(model: MiqcpModel, config: TrainConfig, dataset: Dataset, tm: ThreatModel,
            assignment: PoisonAssignment, trace=None) -> np.ndarray:
    """Variable valuation induced by replaying a complete assignment.

    Product variables of a linearized model take the value of the product.
    Auxiliary slots are filled by poisoned samples in index order; unused
    slots hold the lower corner of the attacker domain with the lowest label.
    """
    from .train import replay

    if not assignment.is_complete:
        raise EncodeError("witness needs a complete assignment")
    trace = replay(config, dataset, assignment) if trace is None else trace
    vals = {}
    X, Y = assignment.materialize(dataset)
    aux = model.meta.get("aux_mode", False)
    K = len(config.init.sizes) - 1
    for i in range(dataset.n_train):
        vals[vname("s", i=i)] = float(assignment.status[i] == POISONED)
        if not aux:
            for c in range(dataset.d):
                vals[vname("xt", i=i, c=c)] = float(X[i, c])
            vals[vname("yt", i=i)] = float(Y[i])
    slot_x, slot_y = [], []
    if aux:
        pois = list(assignment.poisoned_indices)
        lo, _ = tm.domain(dataset.d)
        for jj in range(tm.n):
            if jj < len(pois):
                i = pois[jj]
                slot_x.append(X[i])
                slot_y.append(float(Y[i]))
            else:
                slot_x.append(lo.copy())
                slot_y.append(float(tm.label_domain[0]) if dataset.task != CLASSIFICATION else 0.0)
            for c in range(dataset.d):
                vals[vname("xa", j=jj, c=c)] = float(slot_x[jj][c])
            vals[vname("ya", j=jj)] = slot_y[jj]
        for i in range(dataset.n_train):
            for jj in range(tm.n):
                vals[vname("st", i=i, j=jj)] = float(jj < len(pois) and pois[jj] == i)
    for t, p in enumerate(trace.params):
        for k in range(K):
            for r in range(p.weights[k].shape[0]):
                vals[vname("b", t=t, k=k + 1, r=r)] = float(p.biases[k][r])
                for c in range(p.weights[k].shape[1]):
                    vals[vname("W", t=t, k=k + 1, r=r, c=c)] = float(p.weights[k][r, c])

    def put(tag, pv, t=None):
        base = {"t": t, **tag}
        for k in range(K):
            for r, v in enumerate(pv["u"][k]):
                vals[vname("u" if t else "tu", **base, k=k + 1, r=r)] = float(v)
            if k < K - 1:
                for r, v in enumerate(pv["z"][k]):
                    key = vname("", **base, k=k + 1, r=r)[1:] if t else f"test.{vname('', **tag)[1:]}.k{k + 1}.r{r}"
                    vals[f"z.{key}"] = float(v)
                    vals[f"a.{key}"] = float(pv["u"][k][r] > 0)
        if t is None:
            return
        key = vname("", **base)[1:]
        vals[f"L.{key}"] = pv["L"]
        vals[f"g.{key}"] = pv["g"]
        if pv["r"] is not None:
            vals[f"r.{key}"] = pv["r"]
            vals[f"h.{key}"] = pv["h"]
        for k in range(K):
            for r in range(pv["dW"][k].shape[0]):
                for c in range(pv["dW"][k].shape[1]):
                    vals[vname("dW", **base, k=k + 1, r=r, c=c)] = float(pv["dW"][k][r, c])
            if k:
                for c, v in enumerate(pv["gz"][k - 1]):
                    vals[vname("gz", **base, k=k, r=c)] = float(v)
                for c, v in enumerate(pv["gu"][k - 1]):
                    vals[vname("gu", **base, k=k, r=c)] = float(v)

    for t in range(1, dataset.n_iterations + 1):
        theta = trace.params[t - 1]
        for i in dataset.batch(t):
            i = int(i)
            if aux:
                put({"i": i}, _pass_values(theta, dataset.X_train[i], dataset.y_train[i], config.loss), t)
            else:
                put({"i": i}, _pass_values(theta, X[i], Y[i], config.loss), t)
        if aux:
            for jj in range(tm.n):
                put({"j": jj}, _pass_values(theta, slot_x[jj], slot_y[jj], config.loss), t)
    if dataset.n_test and any(v.name.startswith("p.") for v in model.variables):
        final = trace.params[-1]
        for i in range(dataset.n_test):
            pv = _pass_values(final, dataset.X_test[i], 0.0, config.loss if config.loss != HINGE else HINGE)
            put({"i": i}, pv)
            vals[vname("p", i=i)] = float(pv["yhat"] >= 0)
    out = np.full(len(model.variables), np.nan)
    for k, v in enumerate(model.variables):
        if v.name in vals:
            out[k] = vals[v.name]
    _fill_products(model, out)
    missing = [model.variables[k].name for k in np.flatnonzero(np.isnan(out))]
    if missing:
        raise EncodeError(f"witness does not cover {missing[:3]}")
    return out


def _fill_products(model: MiqcpModel, out: np.ndarray) -> None:
    """Set McCormick product variables from their defining constraints."""
    for w, b, v in model.meta.get("products", ()):
        out[w] = out[b] * out[v]


def check_feasible(model: MiqcpModel, values, tol: float = FEAS_TOL) -> list[dict]:
    """Every violated bound or constraint with its slack (absolute tolerance)."""
    values = np.asarray(values, dtype=float)
    if values.shape != (len(model.variables),) or np.any(np.isnan(values)):
        raise EncodeError("witness must assign every variable")
    bad = []
    for v, x in zip(model.variables, values):
        if x < v.lo - tol or x > v.hi + tol:
            bad.append({"name": v.name, "kind": "bound", "value": float(x), "lo": v.lo, "hi": v.hi})
        if v.kind == BINARY and abs(x - round(x)) > tol:
            bad.append({"name": v.name, "kind": "integrality", "value": float(x)})
    for con in model.constraints:
        lhs = 0.0
        for c, a in con.lin:
            lhs += c * values[a]
        for c, a, b in con.quad:
            lhs += c * values[a] * values[b]
        diff = lhs - con.rhs
        if (con.sense == "=" and abs(diff) > tol) or (con.sense == "<=" and diff > tol) or (
                con.sense == ">=" and diff < -tol):
            bad.append({"name": con.name, "kind": "constraint", "slack": float(diff)})
    return bad


def decode(model: MiqcpModel, values, dataset: Dataset, tm: ThreatModel) -> PoisonAssignment:
    """Poisoning assignment encoded by a feasible valuation."""
    values = np.asarray(values, dtype=float)
    a = PoisonAssignment.clean(dataset)
    aux = model.meta.get("aux_mode", False)
    for i in range(dataset.n_train):
        if values[model.index[vname("s", i=i)]] < 0.5:
            continue
        if aux:
            jj = next(j for j in range(tm.n) if values[model.index[vname("st", i=i, j=j)]] > 0.5)
            x = [values[model.index[vname("xa", j=jj, c=c)]] for c in range(dataset.d)]
            y = values[model.index[vname("ya", j=jj)]]
        else:
            x = [values[model.index[vname("xt", i=i, c=c)]] for c in range(dataset.d)]
            y = values[model.index[vname("yt", i=i)]]
        a = a.with_poison(i, np.asarray(x), round(y) if dataset.task == CLASSIFICATION else y)
    if validate(tm, a, dataset):
        raise EncodeError("decoded assignment violates the threat model")
    return a
