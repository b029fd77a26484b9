"""Closed-loop Monte Carlo simulation and expert-data generation.

Random streams: a single run uses ``default_rng(seed)``. Batched estimates
give cell ``j`` the stream ``default_rng(SeedSequence([seed, j]))`` and draw
all of that cell's noise up front, so results do not depend on batching or
worker count.
"""

from __future__ import annotations

import enum
import logging
import time
from dataclasses import dataclass

import numpy as np

from .grid import OUTSIDE, GridAbstraction, GridSpec
from .policy import PolicyNetwork, TrajectoryDataset
from .specification import Specification
from .stochastic import StochasticSystem
from .synthesis import NONE, ControllerTable, full_value_iteration

log = logging.getLogger(__name__)


class NoExpertFound(RuntimeError):
    """The coarse controller cannot satisfy the specification anywhere."""


class Outcome(enum.IntEnum):
    RUNNING = 0
    SATISFIED_GOAL = 1
    STAYED_SAFE = 2
    HIT_OBSTACLE = 3
    LEFT_DOMAIN = 4
    HORIZON_EXPIRED = 5
    NO_ACTION = 6

    @property
    def satisfied(self) -> bool:
        return self in (Outcome.SATISFIED_GOAL, Outcome.STAYED_SAFE)


@dataclass
class ClosedLoopRun:
    x0: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    outcome: Outcome
    seed: int

    @property
    def satisfied(self) -> bool:
        return self.outcome.satisfied


def _policy_inputs(controller, grid: GridAbstraction, x: np.ndarray, k: int) -> np.ndarray:
    """Flat input indices chosen at states ``x`` (``NONE`` where undefined)."""
    if isinstance(controller, ControllerTable):
        cells = grid.quantize_states(x)
        out = np.full(len(x), NONE, dtype=np.int64)
        ok = cells != OUTSIDE
        out[ok] = controller.actions[cells[ok], k]
        return out
    if isinstance(controller, PolicyNetwork):
        return grid.snap_input(controller(x, np.full(len(x), k)))
    raise TypeError(f"unsupported controller {type(controller).__name__}")


def rollout(sys: StochasticSystem, controller, grid: GridAbstraction, spec: Specification,
            x0: np.ndarray, noise: np.ndarray, record: bool = False):
    """Vectorized closed-loop runs from ``x0[R, n]`` with standard-normal ``noise[R, T, n]``.

    Returns outcomes ``[R]`` and, when ``record``, states ``[R, T+1, n]``,
    input indices ``[R, T]`` and the number of states visited per run.
    """
    t_d = spec.horizon
    r, n = x0.shape
    x = np.array(x0, dtype=float)
    outcome = np.zeros(r, dtype=np.int64)
    length = np.ones(r, dtype=np.int64)
    states = np.full((r, t_d + 1, n), np.nan) if record else None
    inputs = np.full((r, t_d), NONE, dtype=np.int64) if record else None
    if record:
        states[:, 0] = x
    domain = sys.state_box
    for k in range(t_d + 1):
        live = outcome == Outcome.RUNNING
        if spec.is_reach_avoid:
            hit = live & spec.goal.contains(x)
            outcome[hit] = Outcome.SATISFIED_GOAL
            live &= ~hit
        if spec.obstacle is not None:
            hit = live & spec.obstacle.contains(x)
            outcome[hit] = Outcome.HIT_OBSTACLE
            live &= ~hit
        out = live & ~domain.contains(x)
        outcome[out] = Outcome.LEFT_DOMAIN
        live &= ~out
        if k == t_d:
            outcome[live] = Outcome.HORIZON_EXPIRED if spec.is_reach_avoid else Outcome.STAYED_SAFE
            break
        idx = np.flatnonzero(live)
        if len(idx) == 0:
            break
        act = _policy_inputs(controller, grid, x[idx], k)
        none = act == NONE
        outcome[idx[none]] = Outcome.NO_ACTION
        idx, act = idx[~none], act[~none]
        if len(idx) == 0:
            break
        mean, var = sys.kernel_params(x[idx], grid.inputs[act])
        x[idx] = mean + np.sqrt(var) * noise[idx, k]
        length[idx] += 1
        if record:
            inputs[idx, k] = act
            states[idx, k + 1] = x[idx]
    if record:
        return outcome, states, inputs, length
    return outcome


def simulate(sys: StochasticSystem, controller, grid: GridAbstraction, spec: Specification,
             x0, seed: int) -> ClosedLoopRun:
    """One closed-loop run from ``x0`` under a table or network controller."""
    x0 = np.asarray(x0, dtype=float).reshape(1, -1)
    noise = np.random.default_rng(seed).standard_normal((1, spec.horizon, sys.state_dim))
    outcome, states, inputs, length = rollout(sys, controller, grid, spec, x0, noise, record=True)
    steps = int(length[0])
    return ClosedLoopRun(x0[0], states[0, :steps], grid.inputs[inputs[0, :steps - 1]],
                         Outcome(int(outcome[0])), seed)


@dataclass
class SatisfactionEstimate:
    """Empirical satisfaction frequency per cell (from its representative point)."""

    probability: np.ndarray
    stderr: np.ndarray
    runs_per_cell: int
    free_mask: np.ndarray

    @property
    def average(self) -> float:
        return float(self.probability.mean())

    @property
    def free_average(self) -> float:
        return float(self.probability[self.free_mask].mean())


def estimate_satisfaction(sys: StochasticSystem, controller, grid: GridAbstraction,
                          spec: Specification, runs_per_cell: int, seed: int,
                          cells=None, chunk_cells: int = 200) -> SatisfactionEstimate:
    """Monte Carlo satisfaction estimate from every cell's representative point.

    The overall average covers all cells; goal cells count as satisfied and
    obstacle cells as failed, matching how ``v_avg`` is defined.
    """
    if runs_per_cell < 1:
        raise ValueError("runs_per_cell must be >= 1")
    if grid.spec is not spec:
        grid.classify(spec)
    cells = np.arange(grid.n_states) if cells is None else np.asarray(cells)
    prob = np.zeros(len(cells))
    t_d, n = spec.horizon, sys.state_dim
    for s in range(0, len(cells), chunk_cells):
        part = cells[s:s + chunk_cells]
        noise = np.concatenate([
            np.random.default_rng(np.random.SeedSequence([int(seed), int(j)]))
            .standard_normal((runs_per_cell, t_d, n)) for j in part])
        x0 = np.repeat(grid.centers[part], runs_per_cell, axis=0)
        outcome = rollout(sys, controller, grid, spec, x0, noise)
        ok = (outcome == Outcome.SATISFIED_GOAL) | (outcome == Outcome.STAYED_SAFE)
        prob[s:s + len(part)] = ok.reshape(len(part), runs_per_cell).mean(axis=1)
    stderr = np.sqrt(prob * (1 - prob) / runs_per_cell)
    return SatisfactionEstimate(prob, stderr, runs_per_cell, grid.free_mask[cells])


def default_coarse_grid(sys: StochasticSystem, fine: GridSpec) -> GridSpec:
    """A quarter of the fine cell count per axis (at least one) and half the input lattice."""
    widths = []
    for span, w in zip(sys.state_box.widths, fine.state_widths):
        cells = max(1, int(round(span / w)) // 4)
        widths.append(float(span) / cells)
    steps = []
    for span, h in zip(sys.input_box.widths, fine.input_steps):
        n = max(1, int(round(span / h)) // 2)
        steps.append(float(span) / n)
    return GridSpec(tuple(widths), tuple(steps), fine.include_input_limits)


@dataclass
class ExpertReport:
    coarse_v_avg: float
    attempts: int
    collected: int
    seconds: float


def generate_expert_data(sys: StochasticSystem, spec: Specification, coarse_grid: GridSpec,
                         n_traj: int, seed: int, cutoff: float = 1e-4,
                         fine_grid: GridSpec | None = None, workers: int = 1,
                         report: dict | None = None, tie_break: str = "first") -> TrajectoryDataset:
    """Expert trajectories from a coarse-grid controller.

    Synthesizes a controller on ``coarse_grid`` by full-enumeration value
    iteration, then simulates runs from initial states drawn uniformly from
    the free part of the state box, keeping only runs that satisfy ``spec``.
    Up to ``100 * n_traj`` runs are attempted.
    """
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    started = time.perf_counter()
    coarse = GridAbstraction(sys.state_box, sys.input_box, coarse_grid, spec)
    if fine_grid is not None:
        fine = GridAbstraction(sys.state_box, sys.input_box, fine_grid)
        if any(c >= f for c, f in zip(coarse.counts, fine.counts)):
            raise ValueError("coarse grid must have fewer cells per axis than the synthesis grid")
    ctrl = full_value_iteration(sys, coarse, spec, cutoff, workers, tie_break)
    if ctrl.v_avg <= 0:
        raise NoExpertFound("coarse controller satisfies the specification nowhere")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xE]))
    lo, hi = sys.state_box.lower, sys.state_box.upper
    kept: list[tuple[np.ndarray, np.ndarray]] = []
    attempts = 0
    budget = 100 * n_traj
    while len(kept) < n_traj and attempts < budget:
        want = min(budget - attempts, max(2 * (n_traj - len(kept)), 16))
        x0 = lo + (hi - lo) * rng.random((want, sys.state_dim))
        bad = np.zeros(want, dtype=bool)
        if spec.goal is not None:
            bad |= spec.goal.contains(x0)
        if spec.obstacle is not None:
            bad |= spec.obstacle.contains(x0)
        noise = rng.standard_normal((want, spec.horizon, sys.state_dim))
        attempts += want
        x0, noise = x0[~bad], noise[~bad]
        outcome, states, inputs, length = rollout(sys, ctrl, coarse, spec, x0, noise, record=True)
        for i in range(len(x0)):
            if Outcome(int(outcome[i])).satisfied and len(kept) < n_traj:
                steps = int(length[i]) - 1
                kept.append((states[i, :steps], coarse.inputs[inputs[i, :steps]]))
    if not kept:
        raise NoExpertFound(f"no satisfying run in {attempts} attempts")
    if len(kept) < n_traj:
        log.warning("collected %d of %d expert trajectories", len(kept), n_traj)
    ids = np.concatenate([np.full(len(s), i) for i, (s, _) in enumerate(kept)])
    ks = np.concatenate([np.arange(len(s)) for s, _ in kept])
    xs = np.concatenate([s for s, _ in kept])
    us = np.concatenate([u for _, u in kept])
    if report is not None:
        report.update(ExpertReport(ctrl.v_avg, attempts, len(kept),
                                   time.perf_counter() - started).__dict__)
    return TrajectoryDataset(ids, ks, xs, us, provenance="expert")


def sample_domain_states(ctrl: ControllerTable, grid: GridAbstraction, n: int, seed: int,
                         distinct: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Initial states drawn uniformly inside cells where the controller acts at ``k = 0``.

    Cells are drawn without replacement while enough exist. Returns the
    states ``[n, dim]`` and their cells.
    """
    domain = np.flatnonzero(ctrl.actions[:, 0] != NONE)
    if len(domain) == 0:
        raise NoExpertFound("controller acts nowhere at k = 0")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5A]))
    cells = rng.choice(domain, size=n, replace=not distinct or n > len(domain))
    idx = np.unravel_index(cells, grid.counts)
    lo = np.stack([grid.edges[d][i] for d, i in enumerate(idx)], axis=1)
    x0 = lo + grid.widths * rng.random((n, len(grid.counts)))
    return x0, cells
