"""Studies built on the synthesis loop: local-set size sweep and lifting."""

from __future__ import annotations

import time
from dataclasses import dataclass

from .grid import GridAbstraction
from .policy import TrajectoryDataset, imitation_learn, nn_init
from .specification import Specification
from .stochastic import StochasticSystem
from .synthesis import derive_seed, nnsynth_loop, value_iteration

SWEEP_STEPS = (2, 4, 7, 10)


@dataclass
class SweepPoint:
    local_steps: int
    pairs: int
    v_avg: float
    rows_computed: int
    seconds: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def action_sweep(expert: TrajectoryDataset, sys: StochasticSystem, grid: GridAbstraction,
                 spec: Specification, cutoff: float, eta: float, steps=SWEEP_STEPS,
                 epochs: int = 1000, seed: int = 0, batch: int = 32, lr: float = 1e-3,
                 workers: int = 1, tie_break: str = "first") -> list[SweepPoint]:
    """Synthesize with one trained network for each local-set size in ``steps``.

    Offsets are centred windows, so sets for increasing sizes are nested and
    ``v_avg`` can only grow along the sweep.
    """
    net = nn_init(derive_seed(seed, 0, 0), sys.state_box, sys.input_box, spec.horizon)
    net, _ = imitation_learn(net, expert, epochs, batch, lr, derive_seed(seed, 0, 1))
    out = []
    for i in sorted(steps):
        t0 = time.perf_counter()
        ctrl = value_iteration(net, sys, grid, spec, cutoff, eta, i, workers, tie_break)
        out.append(SweepPoint(i, i ** sys.input_dim, ctrl.v_avg, ctrl.stats["rows_computed"],
                              time.perf_counter() - t0))
    return out


@dataclass
class LiftingStudy:
    baseline_v_avg: float
    iteration_v_avg: list[float]

    @property
    def gain(self) -> float:
        return self.iteration_v_avg[-1] - self.baseline_v_avg

    def to_dict(self) -> dict:
        return {"baseline_v_avg": self.baseline_v_avg, "iteration_v_avg": self.iteration_v_avg,
                "gain": self.gain}


def lifting_study(expert: TrajectoryDataset, sys: StochasticSystem, grid: GridAbstraction,
                  spec: Specification, cutoff: float, eta: float, local_steps: int,
                  epochs_per_iter: int = 50, iterations: int = 5, lift_epochs: int = 20,
                  seed: int = 0, workers: int = 1, tie_break: str = "first") -> LiftingStudy:
    """Compare ``iterations`` short lifted iterations with one run trained for
    the same total number of expert epochs."""
    base, _, _ = nnsynth_loop(expert, sys, grid, spec, 0.0, cutoff, eta, local_steps,
                              epochs_per_iter * iterations, max_iter=1, seed=seed,
                              workers=workers, tie_break=tie_break)
    # threshold 1 keeps the loop running for all iterations unless V_avg hits 1
    _, hist, _ = nnsynth_loop(expert, sys, grid, spec, 1.0, cutoff, eta, local_steps,
                              epochs_per_iter, max_iter=iterations, seed=seed,
                              lift_epochs=lift_epochs, workers=workers, tie_break=tie_break)
    return LiftingStudy(base.v_avg, [r.v_avg for r in hist])
