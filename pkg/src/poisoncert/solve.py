"""Certification engine: local-search attacks and branch-and-bound certificates."""

from __future__ import annotations

import hashlib
import heapq
import itertools
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .data import REGRESSION, Dataset
from .interval import AUXILIARY, dual_bound, obbt_test_hull, propagate
from .objectives import DOS, ObjectiveSpec
from .threat import (
    UNDECIDED, ActionTable, PoisonAssignment, ThreatModel, UnsupportedNeighborhood, shell, validate,
)
from .train import SQUARED, TrainConfig, evaluate_trace, replay, replay_arrays

OPTIMAL = "optimal"
BOUNDED = "bounded"
TIMEOUT = "timeout"


def evaluate_objective(trace, objective: ObjectiveSpec, dataset: Dataset) -> float:
    """Attack objective of a finished run (misclassifications, target hits or cumulative loss)."""
    return evaluate_trace(trace, objective, dataset)


def action_space_exact(config: TrainConfig, dataset: Dataset, tm: ThreatModel, objective: ObjectiveSpec) -> bool:
    """True when the per-sample action table contains an optimal attack.

    Label flips enumerate every poisoned value. For a linear model trained
    with squared error, the parameters are affine in the labels and the
    cumulative loss is convex in them, so label-only DoS attacks are
    maximized at the label vertices ``y ± nu``.
    """
    if tm.discrete_exact(dataset):
        return True
    return (dataset.task == REGRESSION and not tm.continuous_features and config.loss == SQUARED
            and len(config.init.weights) == 1 and objective.kind == DOS)


def _is_improvement(new: float, old: float) -> bool:
    return new > old


def _gap_closed(primal: float, dual: float, objective: ObjectiveSpec) -> bool:
    if objective.integral:
        return dual - primal < 1.0
    return dual - primal <= 1e-6 * max(1.0, abs(primal))


# ---------------------------------------------------------------------------
# local search
# ---------------------------------------------------------------------------

@dataclass
class HeuristicResult:
    """Outcome of one heuristic call.

    ``improved`` means ``assignment`` strictly beats the starting incumbent.
    Otherwise ``exhausted`` holds and ``optimal`` tells whether every feasible
    assignment was evaluated.
    """

    assignment: PoisonAssignment
    value: float
    improved: bool
    exhausted: bool
    optimal: bool
    evaluations: int
    radius: int


def _eval_codes(config, dataset, table, objective, codes, threads=1, chunk=2048):
    X, Y = table.arrays(dataset, codes)
    parts = replay_arrays(config, dataset, X, Y, objective, chunk=chunk, threads=threads)
    return np.concatenate([p[2] for p in parts])


def heuristic_search(config: TrainConfig, dataset: Dataset, tm: ThreatModel, objective: ObjectiveSpec,
                     incumbent: PoisonAssignment, budget: int = 100_000, *, value: float | None = None,
                     table: ActionTable | None = None, batch: int = 2048, threads: int = 1) -> HeuristicResult:
    """First-improvement search over Hamming shells of increasing radius.

    Candidates are scored with batched replay in a fixed order and the first
    strict improvement is returned. If every shell up to the largest
    possible distance is exhausted without improvement, ``optimal`` is true
    when the action table is exact for this problem. Reaching ``budget``
    evaluations ends the search with ``optimal=False``.
    """
    config.check_task(dataset)
    if validate(tm, incumbent, dataset):
        raise ValueError("incumbent violates the threat model")
    table = table or ActionTable.build(tm, dataset)
    codes = table.codes_of(incumbent)
    if value is None:
        value = float(_eval_codes(config, dataset, table, objective, codes[None], threads)[0])
    sizes = [table.n_actions(i) for i in range(dataset.n_train)]
    used = int(np.count_nonzero(codes))
    max_radius = min(dataset.n_train, used + tm.n)
    exact = action_space_exact(config, dataset, tm, objective)
    evals = 0
    if not tm.has_effect(dataset):
        return HeuristicResult(incumbent, value, False, True, True, 0, 0)
    for radius in range(1, max_radius + 1):
        gen = shell(codes, sizes, radius, tm.n)
        while True:
            room = budget - evals
            if room <= 0:
                return HeuristicResult(incumbent, value, False, True, False, evals, radius)
            moves = list(itertools.islice(gen, min(batch, room)))
            if not moves:
                break
            cand = np.repeat(codes[None], len(moves), axis=0)
            for r, (pos, new) in enumerate(moves):
                cand[r, list(pos)] = new
            vals = _eval_codes(config, dataset, table, objective, cand, threads, chunk=batch)
            evals += len(moves)
            better = np.flatnonzero(vals > value)
            if better.size:
                k = int(better[0])
                return HeuristicResult(table.assignment(dataset, cand[k]), float(vals[k]), True, False, False,
                                       evals, radius)
    return HeuristicResult(incumbent, value, False, True, exact, evals, max_radius)


def local_search(config, dataset, tm, objective, start: PoisonAssignment | None = None, budget: int = 100_000,
                 *, table=None, threads: int = 1, on_improve=None) -> HeuristicResult:
    """Repeat :func:`heuristic_search` from each new incumbent until it stalls."""
    table = table or ActionTable.build(tm, dataset)
    current = start if start is not None else PoisonAssignment.clean(dataset)
    value = None
    total = 0
    while True:
        res = heuristic_search(config, dataset, tm, objective, current, budget - total, value=value, table=table,
                               threads=threads)
        total += res.evaluations
        if not res.improved:
            res.evaluations = total
            return res
        current, value = res.assignment, res.value
        if on_improve is not None:
            on_improve(current, value)


# ---------------------------------------------------------------------------
# branch and bound
# ---------------------------------------------------------------------------

@dataclass
class SolverOptions:
    mode: str = AUXILIARY
    obbt: bool = True
    obbt_groups: int | None = None
    time_limit: float | None = None
    node_limit: int | None = None
    enum_limit: int = 200_000
    heuristic_budget: int = 20_000
    threads: int = 1
    deterministic: bool = True
    seed: int = 0

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(order=False)
class SearchNode:
    """Partial assignment as action codes (-1 undecided) with its dual bound."""

    codes: np.ndarray
    dual: float
    depth: int

    def remaining(self, n: int) -> int:
        return n - int(np.count_nonzero(self.codes > 0))


@dataclass
class Certificate:
    incumbent: PoisonAssignment
    primal: float
    bound: float
    status: str
    nodes: int = 0
    evaluations: int = 0
    wall_time: float = 0.0
    provenance: dict = field(default_factory=dict)

    @property
    def gap(self) -> float:
        return self.bound - self.primal

    def to_dict(self, timing: bool = False) -> dict:
        out = {
            "status": self.status, "primal": self.primal, "bound": self.bound, "gap": self.gap,
            "nodes": self.nodes, "evaluations": self.evaluations,
            "poisoned": [int(i) for i in self.incumbent.poisoned_indices],
            "attack": self.incumbent.to_json_list(), "incumbent_hash": self.incumbent.digest(),
            "provenance": self.provenance,
        }
        if timing:
            out["wall_time"] = self.wall_time
        return out


def config_hash(*parts) -> str:
    blob = json.dumps([p.to_dict() if hasattr(p, "to_dict") else p for p in parts], sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _count_completions(sizes_open: list[int], r: int, cap: int) -> int:
    """Number of completions with at most ``r`` poisoned samples, saturating at ``cap + 1``."""
    if r <= 0 or not sizes_open:
        return 1
    # polynomial prod(1 + m_i z) truncated at degree r
    poly = [1]
    for m in sizes_open:
        nxt = poly + [0]
        for k in range(len(poly) - 1, -1, -1):
            nxt[k + 1] += poly[k] * m
        poly = [min(c, cap + 1) for c in nxt[: r + 1]]
    return min(sum(poly), cap + 1)


def _completions(codes: np.ndarray, sizes, r: int, chunk: int = 4096):
    """Yield blocks of code vectors extending ``codes`` (-1 = undecided) with at most ``r`` more poisoned."""
    base = np.where(codes < 0, 0, codes)
    open_ = [int(i) for i in np.flatnonzero(codes < 0) if sizes[i] > 0]

    def moves():
        yield (), ()
        for k in range(1, min(r, len(open_)) + 1):
            for pos in itertools.combinations(open_, k):
                for new in itertools.product(*[range(1, sizes[i] + 1) for i in pos]):
                    yield pos, new

    gen = moves()
    while True:
        block = list(itertools.islice(gen, chunk))
        if not block:
            return
        rows = np.repeat(base[None], len(block), axis=0)
        for k, (pos, new) in enumerate(block):
            if pos:
                rows[k, list(pos)] = new
        yield rows


class _Solver:
    def __init__(self, config, dataset, tm, objective, options, on_progress):
        self.cfg, self.ds, self.tm, self.obj, self.opt = config, dataset, tm, objective, options
        self.on_progress = on_progress
        self.table = ActionTable.build(tm, dataset)
        self.sizes = [self.table.n_actions(i) for i in range(dataset.n_train)]
        self.exact = action_space_exact(config, dataset, tm, objective)
        self.t0 = time.perf_counter()
        self.nodes = 0
        self.evals = 0
        self.best = PoisonAssignment.clean(dataset)
        self.best_codes = np.zeros(dataset.n_train, dtype=np.int64)
        self.primal = evaluate_objective(replay(config, dataset), objective, dataset)
        self.evals += 1
        self.dual = math.inf
        self.stopped = False
        self.threads = 1 if options.deterministic else max(1, options.threads)

    # -- bookkeeping ----------------------------------------------------------
    def elapsed(self) -> float:
        return time.perf_counter() - self.t0

    def out_of_time(self) -> bool:
        o = self.opt
        return (o.time_limit is not None and self.elapsed() >= o.time_limit) or (
            o.node_limit is not None and self.nodes >= o.node_limit)

    def event(self, kind: str) -> None:
        ev = {"event": kind, "time": round(self.elapsed(), 6), "primal": self.primal, "dual": self.dual,
              "nodes": self.nodes, "evaluations": self.evals, "incumbent": self.best.digest()}
        if self.on_progress is not None and self.on_progress(ev):
            self.stopped = True

    def offer(self, codes: np.ndarray, value: float) -> bool:
        if _is_improvement(value, self.primal):
            self.primal = float(value)
            self.best_codes = codes.copy()
            self.best = self.table.assignment(self.ds, codes)
            return True
        return False

    # -- node evaluation --------------------------------------------------------
    def partial_of(self, codes: np.ndarray) -> PoisonAssignment:
        a = self.table.assignment(self.ds, np.where(codes < 0, 0, codes))
        status = np.where(codes < 0, UNDECIDED, a.status).astype(np.int8)
        return PoisonAssignment(status, a.x, a.y)

    def bound(self, codes: np.ndarray):
        bs = propagate(self.cfg, self.ds, self.tm, self.partial_of(codes), self.opt.mode)
        tl = None
        if self.opt.obbt and self.obj.kind != DOS and self.ds.n_test:
            groups = self.opt.obbt_groups or self.ds.n_test
            tl = obbt_test_hull(bs, self.cfg, self.ds, groups, self.opt.seed)
        return dual_bound(bs, self.obj, self.ds, tl), bs

    def enumerate_node(self, node: SearchNode) -> float:
        best = -math.inf
        improved = False
        for rows in _completions(node.codes, self.sizes, node.remaining(self.tm.n)):
            vals = _eval_codes(self.cfg, self.ds, self.table, self.obj, rows, self.threads)
            self.evals += len(rows)
            k = int(np.argmax(vals))
            best = max(best, float(vals[k]))
            improved |= self.offer(rows[k], float(vals[k]))
        if improved:
            self.improve_locally()
        return best

    def improve_locally(self) -> None:
        budget = self.opt.heuristic_budget
        if budget <= 0:
            return
        res = local_search(self.cfg, self.ds, self.tm, self.obj, self.best, budget, table=self.table,
                           threads=self.threads)
        self.evals += res.evaluations
        if res.value > self.primal:
            self.offer(self.table.codes_of(res.assignment), res.value)

    def branch_score(self, bs, codes) -> np.ndarray:
        """Summed width of (poisoned - clean) gradient deviations per undecided sample."""
        score = np.zeros(self.ds.n_train)
        for ib in bs.iterations:
            if not ib.open_idx.size:
                continue
            for k in range(len(ib.clean.grad_W)):
                for fam in ("grad_W", "grad_u"):
                    c, p = getattr(ib.clean, fam)[k], getattr(ib.poison, fam)[k]
                    dev = np.maximum(np.abs(p.hi - c.lo), np.abs(c.hi - p.lo))
                    score[ib.open_idx] += ib.step * dev.reshape(len(ib.open_idx), -1).sum(axis=1)
        score[codes >= 0] = -np.inf
        return score

    # -- main loop ----------------------------------------------------------------
    def run(self) -> Certificate:
        tm, ds, obj = self.tm, self.ds, self.obj
        root_codes = np.full(ds.n_train, -1, dtype=np.int64)
        if not tm.has_effect(ds):
            self.dual = self.primal
            self.event("root")
            return self.certificate(OPTIMAL)
        # primal: local search from the clean run
        if self.opt.heuristic_budget > 0:
            res = local_search(self.cfg, ds, tm, obj, None, self.opt.heuristic_budget, table=self.table,
                               threads=self.threads)
            self.evals += res.evaluations
            self.offer(self.table.codes_of(res.assignment), res.value)
            if res.optimal:
                self.dual = self.primal
                self.event("heuristic")
                return self.certificate(OPTIMAL)
        root_dual, bs = self.bound(root_codes)
        self.dual = max(root_dual, self.primal)
        self.nodes = 1
        self.event("root")
        if _gap_closed(self.primal, self.dual, obj):
            return self.certificate(OPTIMAL)
        if not self.exact:
            return self.certificate(BOUNDED)
        heap, seq = [], itertools.count()
        heapq.heappush(heap, (-self.dual, 0, next(seq), SearchNode(root_codes, self.dual, 0), bs))
        while heap:
            if self.stopped or self.out_of_time():
                self.dual = max(self.primal, min(self.dual, -heap[0][0]))
                return self.certificate(TIMEOUT)
            neg, _, _, node, bs = heapq.heappop(heap)
            if node.dual <= self.primal or _gap_closed(self.primal, node.dual, obj):
                continue
            r = node.remaining(tm.n)
            open_sizes = [self.sizes[i] for i in np.flatnonzero(node.codes < 0)]
            if _count_completions(open_sizes, r, self.opt.enum_limit) <= self.opt.enum_limit:
                self.enumerate_node(node)
                self.nodes += 1
            else:
                if bs is None:
                    d, bs = self.bound(node.codes)
                    self.nodes += 1
                    d = min(d, node.dual)
                    if d <= self.primal or _gap_closed(self.primal, d, obj):
                        self.update_dual(heap)
                        self.event("prune")
                        continue
                    node = SearchNode(node.codes, d, node.depth)
                score = self.branch_score(bs, node.codes)
                i = int(np.argmax(score))
                if not np.isfinite(score[i]):
                    i = int(np.flatnonzero(node.codes < 0)[0])
                for action in range(0, self.sizes[i] + 1):
                    if action > 0 and r <= 0:
                        break
                    child = node.codes.copy()
                    child[i] = action
                    heapq.heappush(heap, (-node.dual, -(node.depth + 1), next(seq),
                                          SearchNode(child, node.dual, node.depth + 1), None))
            self.update_dual(heap)
            self.event("node")
        self.dual = self.primal
        self.event("done")
        return self.certificate(OPTIMAL)

    def update_dual(self, heap) -> None:
        open_best = max((-h[0] for h in heap), default=-math.inf)
        self.dual = max(self.primal, min(self.dual, open_best))

    def certificate(self, status: str) -> Certificate:
        if status != OPTIMAL and _gap_closed(self.primal, self.dual, self.obj) and self.exact:
            status = OPTIMAL
        prov = {"config_hash": config_hash(self.cfg, self.tm, self.obj, self.opt, self.ds.fingerprint()),
                "seed": self.cfg.seed, "exact_action_space": self.exact}
        return Certificate(self.best, self.primal, max(self.dual, self.primal), status, self.nodes, self.evals,
                           self.elapsed(), prov)


def branch_and_bound(config: TrainConfig, dataset: Dataset, tm: ThreatModel, objective: ObjectiveSpec,
                     options: SolverOptions | None = None, on_progress=None) -> Certificate:
    """Certify the worst-case poisoning attack.

    Best-first search over per-sample actions (clean or one of the threat
    model's discrete poisoned values) with interval dual bounds. A subtree
    with at most ``options.enum_limit`` completions is closed by batched
    replay of all of them, so on exact action spaces the search is complete.
    For continuous threat models the result is ``bounded``: the primal comes
    from the candidate grid and the dual from the root bound.

    ``on_progress`` receives one dict per solver event; returning a true
    value stops the search with status ``timeout`` and a valid
    certificate.
    """
    options = options or SolverOptions()
    config.check_task(dataset)
    tm.check(dataset)
    try:
        solver = _Solver(config, dataset, tm, objective, options, on_progress)
    except UnsupportedNeighborhood as exc:
        raise ValueError(str(exc)) from exc
    return solver.run()
