import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from levy_fbsde.noise import TimeGrid, make_grid
from levy_fbsde.paths import (
    LipschitzProfile,
    PathFunctional,
    PathSkeleton,
    evaluate_functional,
    j1_upper_bound,
    random_path_pairs,
    running_functional,
    shift_path,
    stopped_path,
    sup_distance,
    sup_norm,
    value_at,
    verify_lipschitz_profile,
)

CATALOG = [
    PathFunctional("terminal_point"),
    PathFunctional("sup_norm"),
    PathFunctional("first_jump"),
    PathFunctional("max_jump"),
    PathFunctional("jump_at", {"s": 0.5}),
    PathFunctional("point_eval", {"t": 0.25}),
    PathFunctional("integral", {"m": {"lebesgue": 1.0, "atoms": [[0.5, 2.0]]}}),
    PathFunctional("linear", {"m": {"lebesgue": 0.5}, "M": [[0.5, 1.5]]}),
    PathFunctional("composite", {"outer": "sin", "inner": "tanh", "m": {"lebesgue": 1.0}}),
    PathFunctional("composite", {"inner": "signed_power", "inner_power": 0.25, "m": {"lebesgue": 1.0}}),
]


def step_path():
    # 0 on [0, .5), 1 on [.5, 1), 2 at 1
    return PathSkeleton.from_values([0.0, 0.5, 1.0], [0.0, 1.0, 2.0], jump_times=[0.5, 1.0])


def test_stopped_path_freezes_after_t():
    p = stopped_path(step_path(), 0.5)
    assert p.values[0].tolist() == [0.0, 1.0, 1.0]
    assert p.jumps[0].tolist() == [0.0, 1.0, 0.0]


def test_stopping_at_T_is_identity():
    p = step_path()
    q = stopped_path(p, 1.0)
    assert np.array_equal(p.values, q.values) and np.array_equal(p.jumps, q.jumps)


@given(st.floats(0, 1), st.floats(0, 1))
@settings(max_examples=30, deadline=None)
def test_stopping_composes(s, t):
    grid = make_grid(1.0, 8)
    s, t = grid.times[int(s * 8)], grid.times[int(t * 8)]
    x, _ = random_path_pairs(3, 1, N=8)
    a = stopped_path(stopped_path(x, t), s)
    b = stopped_path(x, min(s, t))
    assert np.array_equal(a.values, b.values)


def test_sup_norm_examples():
    g = make_grid(1.0, 4)
    assert sup_norm(PathSkeleton.constant(g, 3.0))[0] == 3.0
    assert sup_norm(PathSkeleton.constant(g, 0.0))[0] == 0.0
    x, _ = random_path_pairs(200, 2)
    assert np.all(sup_norm(x) >= np.abs(x.terminal))


def test_sup_of_stopped_path_is_monotone():
    x, _ = random_path_pairs(50, 3, N=8)
    sups = np.stack([sup_norm(stopped_path(x, t)) for t in x.grid.times], axis=1)
    assert np.all(np.diff(sups, axis=1) >= 0)
    assert np.array_equal(sups[:, -1], sup_norm(x))


def test_sup_distance_merges_grids():
    a = PathSkeleton.from_values([0.0, 0.5, 1.0], [0.0, 1.0, 1.0], jump_times=[0.5])
    b = PathSkeleton.from_values([0.0, 0.25, 1.0], [0.0, 3.0, 3.0], jump_times=[0.25])
    # on [.25, .5) a = 0 and b = 3
    assert sup_distance(a, b)[0] == 3.0


def test_j1_identity_and_sup_bound():
    x, y = random_path_pairs(6, 4, N=8)
    for k in range(6):
        assert j1_upper_bound(x.row(k), x.row(k)) == 0.0
        assert j1_upper_bound(x.row(k), y.row(k)) <= sup_distance(x.row(k), y.row(k))[0] + 1e-12


def indicator(start):
    times = sorted({0.0, start, 0.5, 1.0})
    vals = [1.0 if t >= start else 0.0 for t in times]
    return PathSkeleton.from_values(times, vals, jump_times=[start])


def test_j1_shrinking_time_shift():
    x = indicator(0.5)
    bounds = [j1_upper_bound(indicator(0.5 - 1.0 / n), x) for n in (4, 16, 64, 256)]
    assert all(b2 < b1 for b1, b2 in zip(bounds, bounds[1:]))
    assert bounds[-1] < 0.02
    # the uniform distance stays 1
    assert sup_distance(indicator(0.5 - 1 / 256), x)[0] == 1.0


def test_max_jump_is_magnitude():
    p = PathSkeleton.from_values([0.0, 0.25, 0.5, 1.0], [0.0, 1.0, -2.0, -2.0], jump_times=[0.25, 0.5])
    assert evaluate_functional(PathFunctional("max_jump"), p)[0] == 3.0
    assert evaluate_functional(PathFunctional("first_jump"), p)[0] == 1.0


def test_functional_examples():
    g = make_grid(1.0, 4)
    const2 = PathSkeleton.constant(g, 2.0)
    assert evaluate_functional(PathFunctional("integral", {"m": {"lebesgue": 1.0}}), const2)[0] == pytest.approx(2.0)
    assert evaluate_functional(PathFunctional("first_jump"), const2)[0] == 0.0
    p = step_path()
    assert evaluate_functional(PathFunctional("jump_at", {"s": 0.5}), p)[0] == 1.0
    assert evaluate_functional(PathFunctional("point_eval", {"t": 0.5}), p)[0] == 1.0
    assert value_at(p, 0.49)[0] == 0.0


@pytest.mark.parametrize("g", CATALOG, ids=lambda g: g.kind + str(sorted(g.params)))
def test_declared_profiles_hold(g):
    rep = verify_lipschitz_profile(g, 3000, seed=5)
    assert rep.passed, rep


def test_wrong_profile_is_caught():
    g = PathFunctional("max_jump", lipschitz=LipschitzProfile(1.0, 0.0, 0.0))
    assert not verify_lipschitz_profile(g, 3000, seed=5).passed


@pytest.mark.parametrize("g", CATALOG, ids=lambda g: g.kind + str(sorted(g.params)))
def test_refinement_invariance(g):
    x, _ = random_path_pairs(20, 6, N=8)
    # insert a column at t = 0.3 carrying the previous value
    grid = TimeGrid(np.unique(np.append(x.grid.times, 0.3)))
    k = int(np.searchsorted(x.times[0], 0.3))
    times = np.insert(x.times, k, 0.3, axis=1)
    values = np.insert(x.values, k, x.values[:, k - 1], axis=1)
    jumps = np.insert(x.jumps, k, 0.0, axis=1)
    base = np.broadcast_to(np.arange(times.shape[1]), times.shape).copy()
    y = PathSkeleton(times, values, jumps, grid, base)
    assert np.allclose(evaluate_functional(g, x), evaluate_functional(g, y), rtol=1e-12, atol=1e-12)


def test_linear_functional_is_additive():
    g = PathFunctional("linear", {"m": {"lebesgue": 0.7, "atoms": [[0.25, 1.0]]}})
    x, y = random_path_pairs(100, 7)
    s = x.with_values(x.values + y.values, x.jumps + y.jumps)
    assert np.allclose(evaluate_functional(g, s), evaluate_functional(g, x) + evaluate_functional(g, y), atol=1e-10)


@pytest.mark.parametrize("g", CATALOG, ids=lambda g: g.kind + str(sorted(g.params)))
def test_running_functional_matches_stopped_paths(g):
    x, _ = random_path_pairs(15, 8, N=8)
    run = running_functional(g, x)
    for i, t in enumerate(x.grid.times):
        assert np.allclose(run[:, i], evaluate_functional(g, stopped_path(x, t)), atol=1e-12)


def test_shift_inserts_jump_between_columns():
    p = step_path()
    q = shift_path(p, 0.25, 2.0) if 0.25 in p.grid.times else None
    g = make_grid(1.0, 4)
    p = PathSkeleton.constant(g, 0.0)
    q = shift_path(p, 0.5, 2.0)
    assert evaluate_functional(PathFunctional("sup_norm"), q)[0] == 2.0
    assert evaluate_functional(PathFunctional("jump_at", {"s": 0.5}), q)[0] == 2.0
    assert value_at(q, 0.25)[0] == 0.0
    assert value_at(q, 0.5)[0] == 2.0


def test_shift_at_zero_moves_whole_path():
    g = make_grid(1.0, 4)
    q = shift_path(PathSkeleton.constant(g, 1.0), 0.0, 0.5)
    assert np.all(q.values == 1.5)
    assert np.all(q.jumps == 0.0)
