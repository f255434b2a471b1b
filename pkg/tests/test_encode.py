import numpy as np
import pytest

from poisoncert.encode import (
    BINARY, EncodeError, MiqcpModel, build, check_feasible, decode, expected_census, witness,
)
from poisoncert.interval import AUXILIARY, DIRECT, big_m_tables, propagate
from poisoncert.objectives import DOS, TARGETED, ObjectiveSpec
from poisoncert.solve import evaluate_objective
from poisoncert.threat import ActionTable, ThreatModel
from poisoncert.train import HINGE, SQUARED, TrainConfig, init_params, replay

from _tiny import tiny_model
from conftest import (
    IRIS_SUBSTITUTION, diabetes, halfmoons_config, iris, iris_config, random_assignment, random_codes,
)


def _check(ds, cfg, tm, obj, mode=AUXILIARY, aux=False, lin=False, trials=4, seed=0, continuous=False):
    bs = propagate(cfg, ds, tm, None, mode)
    m = build(cfg, ds, tm, obj, big_m_tables(bs), aux_mode=aux, linearize=lin)
    rng = np.random.default_rng(seed)
    table = None if continuous else ActionTable.build(tm, ds)
    for _ in range(trials):
        if continuous:
            a = random_assignment(tm, ds, rng)
        else:
            a = table.assignment(ds, random_codes(table, ds.n_train, tm.n, rng))
        tr = replay(cfg, ds, a)
        w = witness(m, cfg, ds, tm, a, tr)
        assert check_feasible(m, w) == []
        want = evaluate_objective(tr, obj, ds)
        assert m.objective_value(w) == pytest.approx(want, rel=1e-9, abs=1e-9)
        back = decode(m, w, ds, tm)
        assert np.array_equal(back.poisoned_indices, a.poisoned_indices)
    return m


def test_tiny_model_values():
    m, (ds, cfg, tm) = tiny_model()
    clean = ActionTable.build(tm, ds).assignment(ds, [0])
    flip = ActionTable.build(tm, ds).assignment(ds, [1])
    assert m.objective_value(witness(m, cfg, ds, tm, clean)) == 0.0
    assert m.objective_value(witness(m, cfg, ds, tm, flip)) == 1.0


def test_linear_label_flip_witness(hm_small):
    _check(hm_small, halfmoons_config(), ThreatModel(n=3, label_flip=True), ObjectiveSpec())


def test_mlp_box_attack_witness(hm_small):
    cfg = TrainConfig(0.1, HINGE, init_params([9, 3, 1], seed=1))
    tm = ThreatModel(n=2, epsilon=0.05, label_flip=True)
    _check(hm_small, cfg, tm, ObjectiveSpec(), mode=DIRECT, continuous=True)
    _check(hm_small, cfg, tm, ObjectiveSpec(), mode=DIRECT, lin=True, continuous=True, seed=1)


def test_targeted_objective_witness(hm_small):
    targets = [1 - int(v) if k % 2 else -1 for k, v in enumerate(hm_small.y_test)]
    _check(hm_small, halfmoons_config(), ThreatModel(n=2, label_flip=True), ObjectiveSpec(TARGETED, targets))


@pytest.mark.parametrize("lin", [False, True])
def test_substitution_auxiliary_witness(lin):
    _check(iris().subset(20, 6), iris_config(), ThreatModel(**IRIS_SUBSTITUTION), ObjectiveSpec(),
           aux=True, lin=lin, continuous=True)


def test_dos_witness():
    ds = diabetes().subset(40, 5)
    cfg = TrainConfig(0.3, SQUARED, init_params([10, 1], scale=0.0))
    _check(ds, cfg, ThreatModel(n=5, nu=0.5), ObjectiveSpec(kind=DOS), continuous=True)
    mlp = TrainConfig(0.05, SQUARED, init_params([10, 2, 1], seed=1))
    _check(ds, mlp, ThreatModel(kind="substitution", n=2, domain_lo=0.0, domain_hi=1.0), ObjectiveSpec(kind=DOS),
           aux=True, continuous=True)


def test_auxiliary_needs_substitution(hm_small):
    cfg, tm = halfmoons_config(), ThreatModel(n=1, label_flip=True)
    with pytest.raises(EncodeError):
        build(cfg, hm_small, tm, ObjectiveSpec(), big_m_tables(propagate(cfg, hm_small, tm)), aux_mode=True)


def test_census_formula_matches_built_model(hm_small):
    for cfg in (halfmoons_config(), TrainConfig(0.1, HINGE, init_params([9, 3, 1], seed=1))):
        tm = ThreatModel(n=2, label_flip=True)
        tab = big_m_tables(propagate(cfg, hm_small, tm))
        m = build(cfg, hm_small, tm, ObjectiveSpec(), tab)
        passes = list(tab.direct) + [tab.test]
        unstable_relu = sum(int(np.sum((sb.u[k].lo <= 0) & (sb.u[k].hi > 0)))
                            for sb in passes for k in range(len(sb.u) - 1))
        unstable_hinge = sum(int(np.sum((sb.r.lo <= 0) & (sb.r.hi > 0))) for sb in tab.direct)
        want = expected_census(cfg.init.sizes, hm_small.n_train, hm_small.epochs, hm_small.n_iterations,
                               hm_small.n_test, loss=HINGE, unstable_relu=unstable_relu,
                               unstable_hinge=unstable_hinge)
        got = m.census()
        assert {k: got[k] for k in want} == want


def test_stable_units_have_no_binaries(hm_small):
    cfg, tm = halfmoons_config(), ThreatModel(n=0, label_flip=True)
    m = build(cfg, hm_small, tm, ObjectiveSpec(), big_m_tables(propagate(cfg, hm_small, tm)))
    binaries = [v.name for v in m.variables if v.kind == BINARY]
    assert all(name.startswith(("s.", "yt.", "p.")) for name in binaries)
