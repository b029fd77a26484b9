import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nnabs.benchmarks import BenchmarkId, make_benchmark, robot_step, room_step, step_nominal
from nnabs.grid import GridAbstraction
from nnabs.specification import SpecKind


@pytest.mark.parametrize("bid, pairs", [("Robot2D", 705_600), ("RoomTemp5D", 3_429_216),
                                        ("Traffic5D", 125_000_000)])
def test_problem_complexity(bid, pairs):
    b = make_benchmark(bid)
    g = GridAbstraction(b.system.state_box, b.system.input_box, b.grid)
    assert g.n_states * g.n_inputs == pairs


def test_robot_setup():
    b = make_benchmark(BenchmarkId.ROBOT2D)
    g = GridAbstraction(b.system.state_box, b.system.input_box, b.grid, b.spec)
    assert (g.n_states, g.n_inputs) == (1600, 441)
    assert b.spec.kind is SpecKind.REACH_AVOID and b.spec.horizon == 16
    np.testing.assert_array_equal(b.system.noise_cov, [0.75, 0.75])
    assert b.guidance.local_steps ** 2 == 100


def test_room_setup():
    b = make_benchmark("roomtemp5d")
    g = GridAbstraction(b.system.state_box, b.system.input_box, b.grid, b.spec)
    assert (g.n_states, g.n_inputs) == (7776, 441)
    assert b.spec.kind is SpecKind.SAFETY and b.spec.horizon == 8
    assert b.guidance.local_steps ** 2 == 49


def test_traffic_setup():
    b = make_benchmark("Traffic5D")
    g = GridAbstraction(b.system.state_box, b.system.input_box, b.grid, b.spec)
    assert (g.n_states, g.n_inputs) == (12_500, 10_000)
    assert b.spec.horizon == 7 and b.guidance.cutoff == 1e-4


def test_unknown_benchmark():
    with pytest.raises(ValueError):
        make_benchmark("Quadrotor")
    with pytest.raises(ValueError):
        make_benchmark("Robot2D", {"mass": 3})


def test_robot_fixed_point():
    np.testing.assert_array_equal(step_nominal("Robot2D", [0.0, 0.0], [0.0, 0.0]), [0.0, 0.0])


def test_robot_variants():
    u = np.array([0.5, 0.8])
    uni = robot_step([0.0, 0.0], u, 1.0, "unicycle")
    lit = robot_step([0.0, 0.0], u, 1.0, "literal")
    np.testing.assert_allclose(uni, [0.5 * np.cos(0.8), 0.5 * np.sin(0.8)])
    np.testing.assert_allclose(lit, [0.5 * np.cos(0.8), 0.8 * np.sin(0.8)])
    with pytest.raises(ValueError):
        make_benchmark("Robot2D", {"variant": "bicycle"})


def test_room_heaterless_update():
    out = step_nominal("RoomTemp5D", np.full(5, 20.0), np.array([0.7, 0.1]))
    b22 = 1 - 2 * 0.3 - 0.022
    assert out[1] == pytest.approx(b22 * 20 + 0.3 * 40 + 0.022 * -1, abs=1e-12)


def test_traffic_inflow():
    out = step_nominal("Traffic5D", np.zeros(5), np.array([1.0, 0.0]))
    np.testing.assert_allclose(out, [6, 0, 0, 0, 0], atol=1e-15)


def test_traffic_wraparound():
    x = np.array([0, 0, 0, 0, 1.0])
    out = step_nominal("Traffic5D", x, np.zeros(2))
    assert out[0] == pytest.approx(0.3) and out[4] == pytest.approx(0.7)


def test_room_parameter_range():
    with pytest.raises(ValueError):
        make_benchmark("RoomTemp5D", {"eta": 0.6})
    with pytest.raises(ValueError):
        make_benchmark("Traffic5D", {"q": 0.9})


vec5 = st.lists(st.floats(0, 30), min_size=5, max_size=5).map(np.array)
u2 = st.lists(st.floats(0, 1), min_size=2, max_size=2).map(np.array)


@settings(max_examples=100, deadline=None)
@given(x=vec5, y=vec5, u=u2, a=st.floats(0, 1), bid=st.sampled_from(["RoomTemp5D", "Traffic5D"]))
def test_affine_in_state(x, y, u, a, bid):
    lhs = step_nominal(bid, a * x + (1 - a) * y, u)
    rhs = a * step_nominal(bid, x, u) + (1 - a) * step_nominal(bid, y, u)
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(x=vec5, u=u2)
def test_room_rotation_symmetry(x, u):
    # moving every room one place along the ring, heaters included
    rolled = room_step(np.roll(x, 1), u, heaters=(1, 3))
    np.testing.assert_allclose(rolled, np.roll(room_step(x, u), 1), atol=1e-12)


def test_batched_dynamics_match_pointwise():
    rng = np.random.default_rng(0)
    x = rng.uniform(18, 22, (7, 5))
    u = rng.uniform(0, 1, (7, 2))
    batch = room_step(x, u)
    for i in range(7):
        np.testing.assert_allclose(batch[i], room_step(x[i], u[i]))
