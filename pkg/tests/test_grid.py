import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nnabs.grid import (
    OUTSIDE,
    GridAbstraction,
    GridSpec,
    expand_row,
    reachable_cells,
    transition_row,
)
from nnabs.specification import SpecKind, Specification
from nnabs.stochastic import Box, GaussianKernel, StochasticSystem, box_mass

from conftest import make_plane_reach, plane_system, shift_system

PLANE = make_plane_reach()


def test_quantizer_examples(robot_grid):
    g = robot_grid
    assert g.quantize_states(g.centers[0]) == 0
    assert g.quantize_states([-10, -10]) == 0
    assert g.quantize_states([10, 10]) == 1599
    assert g.quantize_states([11, 0]) == OUTSIDE
    assert g.quantize_states([-9.5, -10]) == 40  # boundary goes to the upper cell


def test_representatives_are_fixed_points(robot_grid):
    g = robot_grid
    np.testing.assert_array_equal(g.quantize_states(g.centers), np.arange(g.n_states))


def test_input_lattice_includes_limits(robot_grid):
    g = robot_grid
    np.testing.assert_allclose(g.input_values[0], np.linspace(-1, 1, 21), atol=1e-12)
    assert g.n_inputs == 441
    np.testing.assert_allclose(g.inputs[g.snap_input([0.04, -0.06])], [0.0, -0.1], atol=1e-12)
    np.testing.assert_allclose(g.inputs[g.snap_input([5.0, -5.0])], [1.0, -1.0])


def test_grid_must_tile_box():
    with pytest.raises(ValueError):
        GridAbstraction(Box([0], [1]), Box([0], [1]), GridSpec((0.3,), (0.5,)))
    with pytest.raises(ValueError):
        GridSpec((0.0,), (0.5,))


def test_classification(robot_grid):
    g = robot_grid
    assert g.goal_mask.sum() == 16
    assert g.obstacle_mask.sum() == 64
    assert g.free_mask.sum() == 1600 - 80


coord = st.floats(-10, 10, allow_nan=False)


@settings(max_examples=300, deadline=None)
@given(x=coord, y=coord)
def test_quantizer_partition(robot_grid, x, y):
    g = robot_grid
    j = int(g.quantize_states([x, y]))
    assert 0 <= j < g.n_states
    box = g.cell_box(j)
    assert box.contains(np.array([x, y]))
    # half-open membership: the point is in exactly one cell unless on the closed top edge
    i = np.unravel_index(j, g.counts)
    for d, v in enumerate((x, y)):
        e = g.edges[d]
        assert e[i[d]] <= v
        assert v < e[i[d] + 1] or i[d] == g.counts[d] - 1


def test_reachable_dirac():
    sys = shift_system()
    g = GridAbstraction(sys.state_box, sys.input_box, GridSpec((1.0,), (0.5,)))
    k = GaussianKernel(np.array([3.5]), np.array([0.0]))
    assert reachable_cells(g, k, 1e-4) == [3]


def test_reachable_window_tail_mass():
    sys = shift_system(lower=-20, upper=20)
    g = GridAbstraction(sys.state_box, sys.input_box, GridSpec((0.5,), (0.5,)))
    k = GaussianKernel(np.array([0.1]), np.array([1.0]))
    cells = reachable_cells(g, k, 1e-4)
    lo, hi = g.edges[0][cells[0]], g.edges[0][cells[-1] + 1]
    assert lo <= 0.1 - 3.89 and hi >= 0.1 + 3.89
    omitted = 1 - box_mass(k, Box([lo], [hi]))
    assert omitted < 1e-4


def test_reachable_cutoff_one_is_mean_cell():
    sys = shift_system()
    g = GridAbstraction(sys.state_box, sys.input_box, GridSpec((1.0,), (0.5,)))
    k = GaussianKernel(np.array([4.2]), np.array([1.0]))
    assert reachable_cells(g, k, 1.0) == [4]


def test_deterministic_row_free_and_goal():
    sys = plane_system(0.0)
    spec = Specification(SpecKind.REACH_AVOID, 3, goal=Box([3, 3], [4, 4]))
    g = GridAbstraction(sys.state_box, sys.input_box, GridSpec((1.0, 1.0), (0.5, 0.5)), spec)
    row, goal = transition_row(g, sys, int(g.quantize_states([0.5, 0.5])), [1.0, 0.0], 1e-4)
    assert row == {int(g.quantize_states([1.5, 0.5])): 1.0} and goal == 0.0
    row, goal = transition_row(g, sys, int(g.quantize_states([2.5, 2.5])), [1.0, 1.0], 1e-4)
    assert row == {} and goal == 1.0


def test_robot_row_matches_monte_carlo(robot, robot_grid):
    g, sys = robot_grid, robot.system
    j = int(g.quantize_states([0.25, 0.25]))
    row, goal = transition_row(g, sys, j, [1.0, 0.0], 1e-4)
    rng = np.random.default_rng(5)
    n = 1_000_000
    mean, var = sys.kernel_params(g.centers[j][None], np.array([[1.0, 0.0]]))
    s = mean + np.sqrt(var) * rng.standard_normal((n, 2))
    cells = g.quantize_states(s)
    counts = np.bincount(cells[cells != OUTSIDE], minlength=g.n_states) / n
    for cell, p in row.items():
        se = np.sqrt(p * (1 - p) / n)
        assert abs(counts[cell] - p) <= 3 * se + 1e-6


def _brute_row(g, sys, j, ui):
    mean, var = sys.kernel_params(g.centers[j][None], g.inputs[ui][None])
    k = GaussianKernel(mean[0], var[0])
    probs = np.array([box_mass(k, g.cell_box(c)) for c in range(g.n_states)])
    probs[g.goal_mask] = 0.0
    return probs, k


@settings(max_examples=40, deadline=None)
@given(cell=st.integers(0, 63), ui=st.integers(0, 24))
def test_row_mass_conservation(cell, ui):
    sys, spec, g = PLANE
    if not g.free_mask[cell]:
        return
    rows = g.factored_rows(sys, [cell], [ui], 1e-4)
    row = expand_row(g, rows)
    brute, k = _brute_row(g, sys, cell, ui)
    goal = rows.goal_mass[0]
    outside = 1 - box_mass(k, sys.state_box)
    omitted = brute.sum() - sum(row.values())
    assert -1e-12 <= omitted <= 1e-4
    assert abs(sum(row.values()) + goal + outside + omitted - 1) <= 1e-9
    for c, p in row.items():
        assert p == pytest.approx(brute[c], abs=1e-15)
    assert goal == pytest.approx(box_mass(k, spec.goal), abs=1e-15)


@settings(max_examples=40, deadline=None)
@given(cell=st.integers(0, 63), ui=st.integers(0, 24),
       cuts=st.tuples(st.floats(1e-8, 0.5), st.floats(1e-8, 0.5)))
def test_cutoff_monotone(cell, ui, cuts):
    sys, _, g = PLANE
    small, large = sorted(cuts)
    s_small = sum(transition_row(g, sys, cell, g.inputs[ui], small)[0].values())
    s_large = sum(transition_row(g, sys, cell, g.inputs[ui], large)[0].values())
    assert s_small >= s_large - 1e-15


def test_row_sums_bounded(plane_reach):
    sys, _, g = plane_reach
    cells = np.repeat(g.free_cells, g.n_inputs)
    inputs = np.tile(np.arange(g.n_inputs), len(g.free_cells))
    rows = g.factored_rows(sys, cells, inputs, 1e-4)
    # factored sums still include goal cells; they are zeroed at contraction
    assert np.all(rows.row_sums() <= 1 + 1e-12) and np.all(rows.row_sums() >= 0)
    free_sums = [sum(p for c, p in expand_row(g, rows, i).items()) for i in range(0, len(rows), 97)]
    assert np.all(np.array(free_sums) + rows.goal_mass[::97] <= 1 + 1e-12)


def test_digest_tracks_grid_and_spec(plane_reach):
    sys, spec, g = plane_reach
    same = GridAbstraction(sys.state_box, sys.input_box, GridSpec((0.5, 0.5), (0.5, 0.5)), spec)
    other = GridAbstraction(sys.state_box, sys.input_box, GridSpec((1.0, 1.0), (0.5, 0.5)), spec)
    assert g.digest() == same.digest() != other.digest()


def test_interior_input_lattice():
    g = GridAbstraction(Box([0], [1]), Box([0], [1]), GridSpec((0.5,), (0.25,), False))
    np.testing.assert_allclose(g.input_values[0], [0.25, 0.5, 0.75])
