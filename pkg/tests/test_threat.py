import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from poisoncert.threat import (
    ActionTable, PoisonAssignment, ThreatModel, count_feasible, neighborhood, shell, validate,
)

from conftest import diabetes, halfmoons


def test_label_flip_validation(hm_small):
    tm = ThreatModel(n=2, label_flip=True)
    assert validate(tm, PoisonAssignment.from_flips(hm_small, [1, 2]), hm_small) == []
    assert validate(tm, PoisonAssignment.from_flips(hm_small, [1, 2, 3]), hm_small)


def test_feature_move_outside_ball_rejected(hm_small):
    tm = ThreatModel(n=1, epsilon=0.1)
    x = hm_small.X_train[0] + 0.2
    a = PoisonAssignment.clean(hm_small).with_poison(0, x, hm_small.y_train[0])
    assert validate(tm, a, hm_small)


def test_count_feasible_formula():
    assert count_feasible(100, 3) == sum(math.comb(100, k) for k in range(4))


def test_action_table_codes_round_trip(hm_small):
    tm = ThreatModel(n=3, label_flip=True)
    table = ActionTable.build(tm, hm_small)
    a = PoisonAssignment.from_flips(hm_small, [0, 4, 9])
    codes = table.codes_of(a)
    back = table.assignment(hm_small, codes)
    assert np.array_equal(back.y, a.y) and np.array_equal(back.status, a.status)


def test_regression_label_vertices():
    ds = diabetes()
    tm = ThreatModel(n=2, nu=0.5)
    xs, ys = tm.actions(ds, 0)
    assert sorted(ys) == pytest.approx(sorted([ds.y_train[0] - 0.5, ds.y_train[0] + 0.5]))


@settings(max_examples=40, deadline=None)
@given(st.integers(4, 9), st.integers(0, 3), st.integers(1, 5), st.integers(0, 10_000))
def test_shells_partition_the_feasible_set(N, n, radius_cap, seed):
    """Shells around any feasible center cover every other feasible assignment once."""
    rng = np.random.default_rng(seed)
    sizes = [1] * N
    center = np.zeros(N, dtype=np.int64)
    center[rng.choice(N, rng.integers(0, n + 1), replace=False)] = 1
    seen = set()
    for radius in range(1, N + 1):
        for pos, new in shell(center, sizes, radius, n):
            c = center.copy()
            c[list(pos)] = new
            key = tuple(c)
            assert key not in seen and int(np.count_nonzero(c)) <= n
            assert int(np.count_nonzero(c != center)) == radius
            seen.add(key)
    assert len(seen) == count_feasible(N, n) - 1


def test_neighborhood_excludes_center(hm_small):
    tm = ThreatModel(n=1, label_flip=True)
    c = PoisonAssignment.clean(hm_small)
    nb = list(neighborhood(c, 1, tm, hm_small))
    assert len(nb) == hm_small.n_train
    assert all(a.budget_used == 1 for a in nb)
