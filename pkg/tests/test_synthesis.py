import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nnabs.grid import GridAbstraction, GridSpec
from nnabs.policy import TrajectoryDataset, nn_init
from nnabs.specification import SpecKind, Specification
from nnabs.stochastic import Box, GaussianKernel, box_mass
from nnabs.synthesis import (
    NONE,
    ControllerTable,
    TransitionBuffer,
    _select,
    derive_seed,
    full_value_iteration,
    local_action_matrix,
    local_actions,
    local_offsets,
    nnsynth_loop,
    value_iteration,
)

from conftest import make_plane_reach, plane_system, shift_system

PLANE = make_plane_reach()


def dense_value_iteration(sys, grid, spec):
    """Independent oracle: dense transition tensor from box masses, no cut-off."""
    n, m = grid.n_states, grid.n_inputs
    t = np.zeros((n, m, n))
    goal = np.zeros((n, m))
    for j in np.flatnonzero(grid.free_mask):
        for a in range(m):
            mean, var = sys.kernel_params(grid.centers[j], grid.inputs[a])
            k = GaussianKernel(mean, var)
            for c in range(n):
                if not grid.goal_mask[c]:
                    t[j, a, c] = box_mass(k, grid.cell_box(c))
            if spec.is_reach_avoid:
                goal[j, a] = box_mass(k, spec.goal)
    v = np.zeros((n, spec.horizon + 1))
    v[grid.goal_mask] = 1.0
    if not spec.is_reach_avoid:
        v[grid.free_mask, spec.horizon] = 1.0
    for k in range(spec.horizon - 1, -1, -1):
        q = t @ np.where(grid.goal_mask, 0.0, v[:, k + 1]) + goal
        v[grid.free_mask, k] = q[grid.free_mask].max(axis=1)
    return v


# -- local action sets -------------------------------------------------------


def test_offsets():
    np.testing.assert_array_equal(local_offsets(1), [0])
    np.testing.assert_array_equal(local_offsets(4), [-2, -1, 0, 1])
    np.testing.assert_array_equal(local_offsets(7), [-3, -2, -1, 0, 1, 2, 3])
    with pytest.raises(ValueError):
        local_offsets(0)


@settings(max_examples=50, deadline=None)
@given(a=st.integers(1, 30), b=st.integers(1, 30))
def test_offsets_nested(a, b):
    small, large = sorted((a, b))
    assert set(local_offsets(small)) <= set(local_offsets(large))


def test_singleton_and_corner(robot_grid):
    g = robot_grid
    center = g.snap_indices(np.array([[0.3, -0.2]]))
    one = local_action_matrix(g, center, 0.1, 1)
    assert one.tolist() == [[int(g.ravel_input(center[0]))]]
    corner = local_action_matrix(g, g.snap_indices(np.array([[-1.0, -1.0]])), 0.1, 10)
    row = corner[0][corner[0] != NONE]
    assert 0 < len(row) < 100
    pts = g.inputs[row]
    assert np.all(pts >= -1) and np.all(pts <= 1)
    assert np.all(np.diff(row) > 0)


def test_full_cover(robot_grid):
    g = robot_grid
    centers = g.snap_indices(np.random.default_rng(0).uniform(-1, 1, (20, 2)))
    full = local_action_matrix(g, centers, 0.1, 41)
    for row in full:
        np.testing.assert_array_equal(row, np.arange(441))


def test_eta_stride(robot_grid):
    g = robot_grid
    center = g.snap_indices(np.array([[0.0, 0.0]]))
    row = local_action_matrix(g, center, 0.2, 3)[0]
    np.testing.assert_allclose(sorted(set(np.round(g.inputs[row][:, 0], 9))), [-0.2, 0.0, 0.2])
    with pytest.raises(ValueError):
        local_action_matrix(g, center, 0.15, 3)


def test_local_actions_contains_center(robot_grid):
    net = nn_init(0, robot_grid.state_box, robot_grid.input_box, 16)
    s = local_actions(net, robot_grid, 123, 4, 0.1, 10)
    assert s.center in s.indices.tolist()
    assert len(s) <= 100
    np.testing.assert_array_equal(s.points, robot_grid.inputs[s.indices])


# -- buffer -------------------------------------------------------------------


def test_buffer_insert_once_and_bitwise_recompute():
    sys, _, g = PLANE
    buf = TransitionBuffer(g, sys, 1e-4)
    keys = buf.key([3, 5, 3], [2, 7, 2])
    assert buf.ensure(keys) == 2
    assert buf.ensure(buf.key([5, 9], [7, 1])) == 1
    assert buf.computed == 3 and len(buf) == 3
    ids = buf.lookup(buf.key([3, 5, 9], [2, 7, 1]))
    assert sorted(ids.tolist()) == [0, 1, 2]
    assert buf.lookup(buf.key([0], [0]))[0] == NONE
    fresh = g.factored_rows(sys, [9], [1], 1e-4, buf.widths)
    got = buf.rows.take(ids[2:3])
    np.testing.assert_array_equal(got.starts, fresh.starts)
    for a, b in zip(got.masses, fresh.masses):
        np.testing.assert_array_equal(a, b)


# -- value iteration ------------------------------------------------------------


def test_matches_dense_oracle():
    sys, spec, g = PLANE
    ctrl = full_value_iteration(sys, g, spec, 1e-12)
    np.testing.assert_allclose(ctrl.values, dense_value_iteration(sys, g, spec), atol=1e-9)


def test_safety_matches_dense_oracle():
    sys = plane_system(0.1)
    spec = Specification(SpecKind.SAFETY, 4, obstacle=Box([2, 2], [3, 3]))
    g = GridAbstraction(sys.state_box, sys.input_box, GridSpec((1.0, 1.0), (0.5, 0.5)), spec)
    ctrl = full_value_iteration(sys, g, spec, 1e-12)
    np.testing.assert_allclose(ctrl.values, dense_value_iteration(sys, g, spec), atol=1e-9)
    # more steps to stay safe cannot raise the probability
    assert np.all(np.diff(ctrl.values[g.free_mask], axis=1) >= -1e-15)
    assert np.all(ctrl.values[g.obstacle_mask] == 0)


def test_closed_invariant_set_is_safe():
    sys = shift_system(0.0)
    spec = Specification(SpecKind.SAFETY, 6)
    g = GridAbstraction(sys.state_box, sys.input_box, GridSpec((1.0,), (0.5,)), spec)
    net = nn_init(0, sys.state_box, sys.input_box, 6)
    ctrl = value_iteration(net, sys, g, spec, 1e-4, 0.5, 5)
    assert np.all(ctrl.values == 1.0) and ctrl.v_avg == 1.0


def test_one_step_to_goal():
    sys = shift_system(0.0)
    spec = Specification(SpecKind.REACH_AVOID, 3, goal=Box([8], [10]))
    g = GridAbstraction(sys.state_box, sys.input_box, GridSpec((1.0,), (0.5,)), spec)
    net = nn_init(0, sys.state_box, sys.input_box, 3)
    ctrl = value_iteration(net, sys, g, spec, 1e-4, 0.5, 5)
    # cell [7,8) reaches the goal under every input of +0.5 or +1
    assert ctrl.values[7, 2] == 1.0
    assert ctrl.values[0, 2] == 0.0 and ctrl.actions[0, 2] == NONE
    assert np.all(ctrl.values[g.goal_mask] == 1) and np.all(ctrl.values[g.free_mask, 3] == 0)


def test_guided_full_cover_equals_full():
    sys, spec, g = PLANE
    net = nn_init(4, sys.state_box, sys.input_box, spec.horizon)
    full = full_value_iteration(sys, g, spec, 1e-4)
    guided = value_iteration(net, sys, g, spec, 1e-4, 0.5, 9)
    np.testing.assert_array_equal(guided.values, full.values)
    np.testing.assert_array_equal(guided.actions, full.actions)


def test_monotone_in_local_steps():
    sys, spec, g = PLANE
    net = nn_init(1, sys.state_box, sys.input_box, spec.horizon)
    prev = None
    for i in (1, 2, 3, 5, 9):
        ctrl = value_iteration(net, sys, g, spec, 1e-4, 0.5, i)
        if prev is not None:
            assert np.all(ctrl.values >= prev.values)
        prev = ctrl


def test_worker_independence():
    sys, spec, g = PLANE
    net = nn_init(2, sys.state_box, sys.input_box, spec.horizon)
    a = value_iteration(net, sys, g, spec, 1e-4, 0.5, 3, workers=1)
    b = value_iteration(net, sys, g, spec, 1e-4, 0.5, 3, workers=4)
    np.testing.assert_array_equal(a.values, b.values)
    np.testing.assert_array_equal(a.actions, b.actions)
    c = full_value_iteration(sys, g, spec, 1e-4, workers=3)
    d = full_value_iteration(sys, g, spec, 1e-4, workers=1)
    np.testing.assert_array_equal(c.values, d.values)


def test_select_tie_breaks():
    q = np.array([[0.2, 0.5, 0.5, 0.5, 0.1], [0.0, 0.0, -np.inf, 0.0, 0.0]])
    cand = np.array([[10, 11, 12, 13, 14], [1, 2, NONE, 3, 4]])
    act, v = _select(q, cand, "first")
    assert act.tolist() == [11, NONE] and v.tolist() == [0.5, 0.0]
    act, _ = _select(q, cand, "median")
    assert act.tolist() == [12, NONE]
    with pytest.raises(ValueError):
        _select(q, cand, "random")


def test_median_keeps_values_and_equivalence():
    sys, spec, g = PLANE
    first = full_value_iteration(sys, g, spec, 1e-4)
    median = full_value_iteration(sys, g, spec, 1e-4, tie_break="median")
    np.testing.assert_allclose(median.values, first.values, atol=1e-10)
    net = nn_init(4, sys.state_box, sys.input_box, spec.horizon)
    guided = value_iteration(net, sys, g, spec, 1e-4, 0.5, 9, tie_break="median")
    np.testing.assert_array_equal(guided.actions, median.actions)


def test_dimension_mismatch():
    sys, spec, _ = PLANE
    g = GridAbstraction(Box([0], [4]), Box([-1], [1]), GridSpec((1.0,), (0.5,)))
    with pytest.raises(ValueError):
        full_value_iteration(sys, g, spec, 1e-4)


def test_controller_roundtrip(tmp_path):
    sys, spec, g = PLANE
    ctrl = full_value_iteration(sys, g, spec, 1e-4)
    path = tmp_path / "c.bin"
    ctrl.save(path)
    back = ControllerTable.load(path)
    np.testing.assert_array_equal(back.actions, ctrl.actions)
    np.testing.assert_array_equal(back.values, ctrl.values)
    assert back.grid_digest == g.digest() and back.kind is spec.kind
    assert path.read_bytes()[:4] == b"CTL1"
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"XXXX")
    with pytest.raises(ValueError):
        ControllerTable.load(bad)


# -- outer loop ----------------------------------------------------------------


def _expert(g, rng):
    x = g.centers[g.free_cells]
    k = rng.integers(0, 5, len(x))
    u = np.tile([0.5, 0.5], (len(x), 1))
    return TrajectoryDataset(np.arange(len(x)), k, x, u)


def test_loop_threshold_zero_single_iteration():
    sys, spec, g = PLANE
    expert = _expert(g, np.random.default_rng(0))
    ctrl, hist, _ = nnsynth_loop(expert, sys, g, spec, 0.0, 1e-4, 0.5, 2, epochs=5, seed=1)
    assert len(hist) == 1 and hist[0].iteration == 1 and hist[0].epochs == 5


def test_loop_runs_to_max_iter_and_is_deterministic():
    sys, spec, g = PLANE
    expert = _expert(g, np.random.default_rng(0))
    args = (expert, sys, g, spec, 1.0, 1e-4, 0.5, 2)
    a, ha, _ = nnsynth_loop(*args, epochs=5, max_iter=3, seed=2, lift_epochs=2)
    b, hb, _ = nnsynth_loop(*args, epochs=5, max_iter=3, seed=2, lift_epochs=2)
    assert [r.iteration for r in ha] == [1, 2, 3]
    assert [r.epochs for r in ha] == [5, 10, 15] and ha[-1].lifted_epochs == 4
    np.testing.assert_array_equal(a.values, b.values)
    np.testing.assert_array_equal(a.actions, b.actions)


def test_loop_validation():
    sys, spec, g = PLANE
    empty = TrajectoryDataset(np.zeros(0), np.zeros(0), np.zeros((0, 2)), np.zeros((0, 2)))
    with pytest.raises(ValueError):
        nnsynth_loop(empty, sys, g, spec, 0.5, 1e-4, 0.5, 2, epochs=1)
    expert = _expert(g, np.random.default_rng(0))
    with pytest.raises(ValueError):
        nnsynth_loop(expert, sys, g, spec, 1.5, 1e-4, 0.5, 2, epochs=1)
    with pytest.raises(ValueError):
        nnsynth_loop(expert, sys, g, spec, 0.5, 1e-4, 0.5, 2, epochs=1, max_iter=0)


def test_derive_seed():
    assert derive_seed(3, 1, 2) == derive_seed(3, 1, 2)
    assert len({derive_seed(3, 1, 2), derive_seed(3, 2, 1), derive_seed(4, 1, 2)}) == 3
