import itertools
import json

import numpy as np
import pytest

from poisoncert.data import Dataset
from poisoncert.objectives import DOS, ObjectiveSpec
from poisoncert.solve import (
    BOUNDED, OPTIMAL, TIMEOUT, SolverOptions, branch_and_bound, evaluate_objective, heuristic_search, local_search,
)
from poisoncert.threat import ActionTable, PoisonAssignment, ThreatModel, validate
from poisoncert.train import HINGE, SQUARED, Params, TrainConfig, init_params, replay

from conftest import brute_force, diabetes, halfmoons, halfmoons_config


def test_evaluate_objective_tie_goes_to_class_one():
    ds = Dataset([[1.0]], [1.0], [[1.0], [2.0], [3.0]], [0.0, 1.0, 0.0], batch_size=1)
    cfg = TrainConfig(0.0, HINGE, Params([np.zeros((1, 1))], [np.zeros(1)]))
    assert evaluate_objective(replay(cfg, ds), ObjectiveSpec(), ds) == 2.0


def test_heuristic_zero_budget_is_optimal(hm_small):
    res = heuristic_search(halfmoons_config(), hm_small, ThreatModel(n=0, label_flip=True), ObjectiveSpec(),
                           PoisonAssignment.clean(hm_small))
    assert res.exhausted and res.optimal and not res.improved


def test_heuristic_returns_first_improvement(hm_small):
    cfg, tm = halfmoons_config(), ThreatModel(n=1, label_flip=True)
    start = PoisonAssignment.clean(hm_small)
    base = evaluate_objective(replay(cfg, hm_small), ObjectiveSpec(), hm_small)
    res = heuristic_search(cfg, hm_small, tm, ObjectiveSpec(), start)
    if res.improved:
        assert res.value > base
        first = next(i for i in range(hm_small.n_train)
                     if evaluate_objective(replay(cfg, hm_small, PoisonAssignment.from_flips(hm_small, [i])),
                                           ObjectiveSpec(), hm_small) > base)
        assert list(res.assignment.poisoned_indices) == [first]


def test_heuristic_cap_gives_non_optimal_exhaustion(hm_small):
    res = heuristic_search(halfmoons_config(), hm_small, ThreatModel(n=2, label_flip=True), ObjectiveSpec(),
                           PoisonAssignment.from_flips(hm_small, [0, 1]), budget=3)
    assert res.evaluations <= 3
    assert res.improved or (res.exhausted and not res.optimal)


def test_local_search_reaches_oracle(hm_small):
    cfg = halfmoons_config()
    for n in (1, 2):
        res = local_search(cfg, hm_small, ThreatModel(n=n, label_flip=True), ObjectiveSpec(), budget=10**6)
        assert res.optimal and res.value == brute_force(cfg, hm_small, n)


def test_invalid_incumbent_rejected(hm_small):
    with pytest.raises(ValueError):
        heuristic_search(halfmoons_config(), hm_small, ThreatModel(n=1, label_flip=True), ObjectiveSpec(),
                         PoisonAssignment.from_flips(hm_small, [0, 1]))


@pytest.mark.parametrize("opts", [
    SolverOptions(),
    SolverOptions(heuristic_budget=0, enum_limit=20),
    SolverOptions(heuristic_budget=0, enum_limit=5, mode="direct", obbt=False),
])
def test_branch_and_bound_matches_brute_force(opts):
    ds = halfmoons(12, 8, seed=5, batch_size=4, epochs=2)
    cfg = halfmoons_config()
    for n in (1, 2):
        cert = branch_and_bound(cfg, ds, ThreatModel(n=n, label_flip=True), ObjectiveSpec(), opts)
        assert cert.status == OPTIMAL
        assert cert.primal == cert.bound == brute_force(cfg, ds, n)


def test_targeted_objective_matches_brute_force():
    ds = halfmoons(12, 8, seed=6, batch_size=4, epochs=2)
    cfg = halfmoons_config()
    obj = ObjectiveSpec("targeted", [1 - int(v) for v in ds.y_test])
    cert = branch_and_bound(cfg, ds, ThreatModel(n=2, label_flip=True), obj, SolverOptions(heuristic_budget=0))
    assert cert.status == OPTIMAL and cert.primal == brute_force(cfg, ds, 2, obj)


def test_dos_label_vertices_are_exact():
    ds = diabetes().subset(8, 2).with_training(batch_size=4, epochs=2)
    cfg = TrainConfig(0.3, SQUARED, init_params([10, 1], scale=0.0))
    tm = ThreatModel(n=2, nu=0.5)
    obj = ObjectiveSpec(kind=DOS)
    cert = branch_and_bound(cfg, ds, tm, obj, SolverOptions(heuristic_budget=0, enum_limit=4))
    table = ActionTable.build(tm, ds)
    best = max(evaluate_objective(replay(cfg, ds, table.assignment(ds, c)), obj, ds)
               for c in itertools.product(range(3), repeat=8) if np.count_nonzero(c) <= 2)
    assert cert.status == OPTIMAL and cert.primal == pytest.approx(best, rel=1e-12)
    # interior labels never beat the vertices (convexity in the labels)
    rng = np.random.default_rng(0)
    for _ in range(30):
        a = PoisonAssignment.clean(ds)
        for i in rng.choice(8, 2, replace=False):
            a = a.with_poison(int(i), ds.X_train[i], ds.y_train[i] + rng.uniform(-0.5, 0.5))
        assert evaluate_objective(replay(cfg, ds, a), obj, ds) <= best + 1e-12


def test_root_certificate_without_branching():
    X = np.array([[-1.0], [1.0], [-1.0], [1.0]])
    ds = Dataset(X, [0, 1, 0, 1], X, [0, 1, 0, 1], batch_size=2, epochs=1)
    cfg = TrainConfig(0.001, HINGE, Params([np.array([[5.0]])], [np.zeros(1)]))
    cert = branch_and_bound(cfg, ds, ThreatModel(n=2, label_flip=True), ObjectiveSpec(),
                            SolverOptions(heuristic_budget=0))
    assert cert.status == OPTIMAL and cert.primal == cert.bound == 0 and cert.nodes == 1


def test_continuous_threat_is_bounded(hm_small):
    tm = ThreatModel(n=1, epsilon=0.05, label_flip=True, grid="vertices", max_corners=4)
    cert = branch_and_bound(halfmoons_config(), hm_small, tm, ObjectiveSpec(), SolverOptions(heuristic_budget=500))
    assert cert.status in (BOUNDED, OPTIMAL)
    assert cert.primal <= cert.bound
    assert validate(tm, cert.incumbent, hm_small) == []


def test_events_are_monotone_and_interruptible(hm_small):
    cfg, tm = halfmoons_config(), ThreatModel(n=3, label_flip=True)
    events = []
    cert = branch_and_bound(cfg, hm_small, tm, ObjectiveSpec(), SolverOptions(heuristic_budget=0, enum_limit=3),
                            on_progress=lambda e: events.append(e) or len(events) >= 15)
    assert cert.status in (TIMEOUT, OPTIMAL)
    prim = [e["primal"] for e in events]
    dual = [e["dual"] for e in events]
    assert prim == sorted(prim) and dual == sorted(dual, reverse=True)
    assert all(json.loads(json.dumps(e)) == e for e in events)
    assert cert.primal <= cert.bound
    assert evaluate_objective(replay(cfg, hm_small, cert.incumbent), ObjectiveSpec(), hm_small) == cert.primal


def test_node_limit_gives_timeout(hm_small):
    cert = branch_and_bound(halfmoons_config(), hm_small, ThreatModel(n=3, label_flip=True), ObjectiveSpec(),
                            SolverOptions(heuristic_budget=0, enum_limit=2, node_limit=3))
    assert cert.status in (TIMEOUT, OPTIMAL) and cert.primal <= cert.bound


def test_deterministic_certificates(hm_small):
    args = (halfmoons_config(), hm_small, ThreatModel(n=2, label_flip=True), ObjectiveSpec(),
            SolverOptions(heuristic_budget=50, enum_limit=10))
    a, b = branch_and_bound(*args), branch_and_bound(*args)
    assert json.dumps(a.to_dict(), sort_keys=True) == json.dumps(b.to_dict(), sort_keys=True)
