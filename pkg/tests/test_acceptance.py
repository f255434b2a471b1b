"""Acceptance suite: one check per headline criterion, each printing a PASS/FAIL line."""

import time

import numpy as np
import pytest

from poisoncert.cli import _lstsq_init
from poisoncert.encode import build, check_feasible, witness
from poisoncert.interval import AUXILIARY, DIRECT, big_m_tables, obbt_test_hull, propagate
from poisoncert.lpformat import dumps, loads
from poisoncert.objectives import DOS, ObjectiveSpec
from poisoncert.solve import OPTIMAL, SolverOptions, branch_and_bound, evaluate_objective, local_search
from poisoncert.threat import ActionTable, PoisonAssignment, ThreatModel, validate
from poisoncert.train import HINGE, SQUARED, TrainConfig, init_params, loss_and_grad, replay, replay_arrays

from _tiny import tiny_model
from conftest import (
    IRIS_SUBSTITUTION, diabetes, finite_difference, halfmoons, halfmoons_config, iris, iris_config,
    random_assignment, random_codes, random_gradient_case, random_partial, soundness_cases,
)

pytestmark = pytest.mark.slow


@pytest.fixture
def report(capsys):
    def emit(number, title, ok, detail, seconds, limit):
        ok = bool(ok) and seconds < limit
        with capsys.disabled():
            print(f"\nACCEPTANCE {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail} "
                  f"[{seconds:.1f}s / limit {limit:g}s]")
        assert ok, f"criterion {number} failed: {detail}"
    return emit


def _flip_oracle(cfg, ds, n, objective=None):
    """Exhaustive maximum over all label-flip sets of size <= n via batched replay."""
    objective = objective or ObjectiveSpec()
    tm = ThreatModel(n=n, label_flip=True)
    table = ActionTable.build(tm, ds)
    import itertools

    rows = [np.zeros(ds.n_train, dtype=np.int64)]
    for k in range(1, n + 1):
        for S in itertools.combinations(range(ds.n_train), k):
            c = np.zeros(ds.n_train, dtype=np.int64)
            c[list(S)] = 1
            rows.append(c)
    X, Y = table.arrays(ds, np.stack(rows))
    vals = np.concatenate([p[2] for p in replay_arrays(cfg, ds, X, Y, objective)])
    return float(vals.max())


def test_gradient_oracle(report):
    t0 = time.perf_counter()
    worst = 0.0
    for loss, seed in ((HINGE, 100), (SQUARED, 200)):
        rng = np.random.default_rng(seed)
        for _ in range(100):
            params, x, y = random_gradient_case(rng, loss)
            an = loss_and_grad(params, (x, y), loss)[1].flat()
            fd = finite_difference(params, x, y, loss)
            scale = max(np.linalg.norm(fd), np.linalg.norm(an))
            worst = max(worst, np.linalg.norm(an - fd) / scale if scale > 0 else 0.0)
    report(1, "gradient oracle", worst <= 1e-5, f"max relative error {worst:.2e} over 200 pairs",
           time.perf_counter() - t0, 10)


def test_encoding_exactness(report):
    t0 = time.perf_counter()
    ds, cfg = halfmoons(), halfmoons_config()
    tm, obj = ThreatModel(n=3, label_flip=True), ObjectiveSpec()
    model = build(cfg, ds, tm, obj, big_m_tables(propagate(cfg, ds, tm, None, AUXILIARY)))
    table = ActionTable.build(tm, ds)
    rng = np.random.default_rng(7)
    violations, worst = 0, 0.0
    for _ in range(50):
        a = table.assignment(ds, random_codes(table, ds.n_train, tm.n, rng))
        tr = replay(cfg, ds, a)
        w = witness(model, cfg, ds, tm, a, tr)
        violations += len(check_feasible(model, w, tol=1e-7))
        want = evaluate_objective(tr, obj, ds)
        worst = max(worst, abs(model.objective_value(w) - want) / max(1.0, abs(want)))
    report(2, "encoding exactness", violations == 0 and worst <= 1e-9,
           f"{violations} violated constraints, objective rel. error {worst:.1e} over 50 witnesses",
           time.perf_counter() - t0, 60)


def test_interval_soundness_fuzz(report):
    t0 = time.perf_counter()
    cases = soundness_cases()
    weights = np.array([3, 2, 2, 3, 3, 2, 1], dtype=float)
    rng = np.random.default_rng(2024)
    failures, checked = [], 0
    picks = rng.choice(len(cases), 1000, p=weights / weights.sum())
    for c in picks:
        name, ds, cfg, tm = cases[c]
        full = random_assignment(tm, ds, rng)
        part = random_partial(full, ds, rng, p=float(rng.uniform(0.2, 0.9)))
        tr = replay(cfg, ds, full)
        for mode in (DIRECT, AUXILIARY):
            bad = propagate(cfg, ds, tm, part, mode).contains(tr, full)
            if bad:
                failures.append((name, mode, bad[:2]))
        checked += 1
    names = sorted({cases[c][0] for c in picks})
    report(3, "interval soundness fuzz", not failures and checked == 1000,
           f"{checked} pairs x 2 modes over {len(names)} settings, {len(failures)} containment failures",
           time.perf_counter() - t0, 300)


def test_branch_and_bound_vs_brute_force(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(99)
    mismatches, count = [], 0
    for k in range(24):
        N = int(rng.integers(10, 21))
        n = int(rng.integers(1, 4))
        ds = halfmoons(N, 10, seed=int(rng.integers(1000)), batch_size=int(rng.integers(3, 8)),
                       epochs=int(rng.integers(1, 4)))
        if k % 3 == 2:
            cfg = TrainConfig(float(rng.uniform(0.05, 0.3)), HINGE, init_params([9, 3, 1], seed=k))
        else:
            cfg = halfmoons_config(float(rng.uniform(0.1, 1.0)))
        opts = SolverOptions(heuristic_budget=int(rng.choice([0, 200])), enum_limit=int(rng.choice([10, 100, 5000])))
        cert = branch_and_bound(cfg, ds, ThreatModel(n=n, label_flip=True), ObjectiveSpec(), opts)
        oracle = _flip_oracle(cfg, ds, n)
        count += 1
        if cert.status != OPTIMAL or cert.primal != oracle or cert.bound != oracle:
            mismatches.append((k, N, n, cert.status, cert.primal, cert.bound, oracle))
    report(4, "complete certification vs brute force", not mismatches,
           f"{count - len(mismatches)}/{count} random instances optimal and equal to enumeration {mismatches[:2]}",
           time.perf_counter() - t0, 600)


def test_halfmoons_frontier(report):
    t0 = time.perf_counter()
    ds, cfg = halfmoons(), halfmoons_config()
    rows, ok = [], True
    for n in (1, 2, 3, 4, 5):
        tm = ThreatModel(n=n, label_flip=True)
        limit = 600 if n <= 3 else 60
        cert = branch_and_bound(cfg, ds, tm, ObjectiveSpec(), SolverOptions(time_limit=limit))
        replayed = evaluate_objective(replay(cfg, ds, cert.incumbent), ObjectiveSpec(), ds)
        valid = not validate(tm, cert.incumbent, ds) and replayed == cert.primal and cert.primal <= cert.bound
        ok &= valid and (cert.status == OPTIMAL if n <= 3 else True)
        rows.append(f"n={n}:{cert.status} {cert.primal:g}/{cert.bound:g}")
    report(5, "halfmoons optimality frontier", ok, "; ".join(rows), time.perf_counter() - t0, 900)


def test_tightening_ordering(report):
    t0 = time.perf_counter()
    ds, cfg, tm = iris(), iris_config(), ThreatModel(**IRIS_SUBSTITUTION)
    direct = propagate(cfg, ds, tm, None, DIRECT)
    aux = propagate(cfg, ds, tm, None, AUXILIARY)
    standard = direct.test_logits.width.mean()
    obbt = obbt_test_hull(direct, cfg, ds, ds.n_test).width.mean()
    obbt_aux = obbt_test_hull(aux, cfg, ds, ds.n_test).width.mean()
    ok = standard >= obbt >= obbt_aux and standard > obbt_aux
    report(6, "tightening ordering", ok,
           f"mean test-logit width standard {standard:.4f} >= OBBT {obbt:.4f} >= OBBT+aux {obbt_aux:.4f}",
           time.perf_counter() - t0, 300)


def test_dos_attack_effect(report):
    t0 = time.perf_counter()
    ds = diabetes()
    cfg = TrainConfig(0.3, SQUARED, _lstsq_init(ds))
    tm, obj = ThreatModel(n=50, epsilon=0.0, nu=0.5), ObjectiveSpec(kind=DOS)
    res = local_search(cfg, ds, tm, obj, budget=400_000)
    clean = replay(cfg, ds)
    pois = replay(cfg, ds, res.assignment)
    ratio = pois.total_loss() / clean.total_loss()
    curve = pois.epoch_losses(ds)
    ok = ratio >= 1.2 and curve[-1] >= curve[0] and not validate(tm, res.assignment, ds)
    report(7, "DoS attack effect", ok,
           f"poisoned/clean cumulative loss {ratio:.2f}, poisoned epoch losses {np.round(curve, 1).tolist()}",
           time.perf_counter() - t0, 300)


def test_heuristic_exhaustive_optimality(report):
    t0 = time.perf_counter()
    ds, cfg = halfmoons(40, 20, seed=0), halfmoons_config()
    rows, ok = [], True
    for n in (1, 2):
        res = local_search(cfg, ds, ThreatModel(n=n, label_flip=True), ObjectiveSpec(), budget=10**6)
        oracle = _flip_oracle(cfg, ds, n)
        ok &= res.exhausted and res.optimal and res.value == oracle
        rows.append(f"n={n}: heuristic {res.value:g} oracle {oracle:g} optimal={res.optimal}")
    report(8, "heuristic exhaustive optimality", ok, "; ".join(rows), time.perf_counter() - t0, 600)


def test_anytime_certificate_validity(report):
    t0 = time.perf_counter()
    ds, cfg = halfmoons(), halfmoons_config()
    tm, obj = ThreatModel(n=4, label_flip=True), ObjectiveSpec()
    rng = np.random.default_rng(5)
    bad = []
    stops = sorted(int(v) for v in rng.integers(1, 60, size=10))
    for stop in stops:
        seen = []
        opts = SolverOptions(heuristic_budget=int(rng.choice([0, 300])), enum_limit=int(rng.choice([50, 2000])))
        cert = branch_and_bound(cfg, ds, tm, obj, opts, on_progress=lambda e: seen.append(e) or len(seen) >= stop)
        replayed = evaluate_objective(replay(cfg, ds, cert.incumbent), obj, ds)
        if not (cert.primal <= cert.bound and not validate(tm, cert.incumbent, ds) and replayed == cert.primal):
            bad.append((stop, cert.primal, cert.bound, replayed))
    report(9, "anytime certificate validity", not bad,
           f"{10 - len(bad)}/10 interruptions (after events {stops}) gave valid certificates",
           time.perf_counter() - t0, 300)


def test_export_round_trip_and_golden(report):
    from pathlib import Path

    t0 = time.perf_counter()
    golden = (Path(__file__).parent / "data" / "tiny_label_flip.lp").read_text(encoding="utf-8")
    model, _ = tiny_model()
    golden_ok = dumps(model) == golden
    ds, cfg = halfmoons(30, 10, batch_size=10, epochs=2), halfmoons_config()
    tm = ThreatModel(n=2, label_flip=True)
    m = build(cfg, ds, tm, ObjectiveSpec(), big_m_tables(propagate(cfg, ds, tm)))
    text = dumps(m)
    back = loads(text)
    lossless = dumps(back) == text and back.census() == m.census() and \
        [(c.lin, c.quad, c.rhs) for c in back.constraints] == [(c.lin, c.quad, c.rhs) for c in m.constraints]
    report(10, "export round-trip and golden", golden_ok and lossless,
           f"golden byte-identical={golden_ok}, round-trip lossless={lossless}", time.perf_counter() - t0, 5)
