"""Command-line entry point.

Subcommands::

    nnabs expert      --config run.ini            -> expert.csv, expert_report.json
    nnabs synthesize  --config run.ini [--dataset expert.csv] [--sweep] [--lifting]
                      -> controller.bin, controller_summary.json, policy.weights(.json),
                         iterations.json (and sweep.json / lifting.json)
    nnabs evaluate    --config run.ini [--controller controller.bin]
                      -> evaluation.json, per_cell.csv, trajectories/run_XXX.csv
    nnabs benchmark   Robot2D|RoomTemp5D|Traffic5D  (expert, synthesize, evaluate)

Exit codes: 0 success, 2 invalid input, 3 numerical failure or no expert
data, 4 threshold not met after ``max_iter`` (the last controller is still written).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .experiments import SWEEP_STEPS, action_sweep, lifting_study
from .grid import GridAbstraction
from .policy import TrainingDivergence, TrajectoryDataset
from .simulation import (
    NoExpertFound,
    estimate_satisfaction,
    generate_expert_data,
    sample_domain_states,
    simulate,
)
from .stochastic import HyperparameterError, ModelEvaluationError
from .synthesis import ControllerTable, NumericalError, derive_seed, nnsynth_loop

log = logging.getLogger("nnabs")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL, EXIT_THRESHOLD = 0, 2, 3, 4


class CommandError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _grid(cfg: RunConfig, grid_spec=None) -> GridAbstraction:
    return GridAbstraction(cfg.system.state_box, cfg.system.input_box,
                           grid_spec or cfg.grid, cfg.spec)


# -- commands -----------------------------------------------------------------


def cmd_expert(cfg: RunConfig) -> int:
    cfg.out.mkdir(parents=True, exist_ok=True)
    report: dict = {}
    data = generate_expert_data(cfg.system, cfg.spec, cfg.coarse_grid, cfg.n_traj, cfg.seed,
                                cfg.cutoff, cfg.grid, cfg.workers, report, cfg.tie_break)
    data.to_csv(cfg.out / "expert.csv")
    report.update(requested=cfg.n_traj, pairs=len(data), seed=cfg.seed)
    _write_json(cfg.out / "expert_report.json", report)
    print(f"expert: {report['collected']} trajectories ({len(data)} pairs), "
          f"coarse v_avg={report['coarse_v_avg']:.4f}")
    return EXIT_OK


def cmd_synthesize(cfg: RunConfig, dataset: Path | None = None, sweep: bool = False,
                   lifting: bool = False) -> int:
    dataset = dataset or cfg.out / "expert.csv"
    try:
        expert = TrajectoryDataset.from_csv(dataset)
        expert.validate(cfg.system.input_box, cfg.spec.horizon)
    except (OSError, ValueError) as exc:
        raise CommandError(f"cannot use dataset {dataset}: {exc}", EXIT_INVALID) from None
    if expert.x.shape[1] != cfg.system.state_dim or expert.u.shape[1] != cfg.system.input_dim:
        raise CommandError("dataset dimensions do not match the system", EXIT_INVALID)
    cfg.out.mkdir(parents=True, exist_ok=True)
    grid = _grid(cfg)
    common = dict(cutoff=cfg.cutoff, eta=cfg.eta, workers=cfg.workers, tie_break=cfg.tie_break)
    if sweep:
        points = action_sweep(expert, cfg.system, grid, cfg.spec, steps=cfg.sweep or SWEEP_STEPS,
                              epochs=cfg.epochs, seed=cfg.seed, batch=cfg.batch, lr=cfg.lr,
                              **common)
        _write_json(cfg.out / "sweep.json", [p.to_dict() for p in points])
        for p in points:
            print(f"sweep I={p.local_steps} pairs={p.pairs} v_avg={p.v_avg:.4f}")
    if lifting:
        study = lifting_study(expert, cfg.system, grid, cfg.spec, local_steps=cfg.local_steps,
                              lift_epochs=cfg.lift_epochs if cfg.lift_epochs is not None else 20,
                              seed=cfg.seed, **common)
        _write_json(cfg.out / "lifting.json", study.to_dict())
        print(f"lifting: baseline={study.baseline_v_avg:.4f} "
              f"iterations={[round(v, 4) for v in study.iteration_v_avg]}")
    if sweep or lifting:
        return EXIT_OK
    ctrl, history, net = nnsynth_loop(
        expert, cfg.system, grid, cfg.spec, cfg.threshold, local_steps=cfg.local_steps,
        epochs=cfg.epochs, max_iter=cfg.max_iter, seed=cfg.seed, lift_epochs=cfg.lift_epochs,
        batch=cfg.batch, lr=cfg.lr, **common)
    ctrl.save(cfg.out / "controller.bin")
    net.save(cfg.out / "policy.weights")
    _write_json(cfg.out / "controller_summary.json", ctrl.summary())
    _write_json(cfg.out / "iterations.json", [r.to_dict() for r in history])
    for r in history:
        print(f"iteration {r.iteration}: v_avg={r.v_avg:.4f} rows={r.rows_computed} "
              f"seconds={r.seconds:.1f}")
    if ctrl.v_avg < cfg.threshold:
        print(f"threshold {cfg.threshold} not met after {len(history)} iteration(s)")
        return EXIT_THRESHOLD
    return EXIT_OK


def _write_trajectory(path: Path, run, n: int, m: int) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k"] + [f"x_{i + 1}" for i in range(n)] + [f"u_{j + 1}" for j in range(m)])
        for k, x in enumerate(run.states):
            u = [repr(float(v)) for v in run.inputs[k]] if k < len(run.inputs) else [""] * m
            w.writerow([k] + [repr(float(v)) for v in x] + u)


def cmd_evaluate(cfg: RunConfig, controller: Path | None = None) -> int:
    path = controller or cfg.out / "controller.bin"
    try:
        ctrl = ControllerTable.load(path)
    except (OSError, ValueError, KeyError) as exc:
        raise CommandError(f"cannot read controller {path}: {exc}", EXIT_INVALID) from None
    grid = _grid(cfg)
    if ctrl.grid_digest != grid.digest():
        raise CommandError("controller was synthesized for a different grid or specification",
                           EXIT_INVALID)
    cfg.out.mkdir(parents=True, exist_ok=True)
    est = estimate_satisfaction(cfg.system, ctrl, grid, cfg.spec, cfg.runs_per_cell,
                                derive_seed(cfg.seed, 1))
    v0 = ctrl.values[:, 0]
    free = grid.free_mask
    band = np.abs(est.probability - v0) <= 3 * np.sqrt(v0 * (1 - v0) / cfg.runs_per_cell)
    n, m = cfg.system.state_dim, cfg.system.input_dim
    with open(cfg.out / "per_cell.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell"] + [f"c_{i + 1}" for i in range(n)] + ["value", "empirical", "stderr"])
        for j in range(grid.n_states):
            w.writerow([j] + [repr(float(c)) for c in grid.centers[j]]
                       + [repr(float(v0[j])), repr(float(est.probability[j])),
                          repr(float(est.stderr[j]))])
    sampled = []
    if cfg.sample_trajectories:
        tdir = cfg.out / "trajectories"
        tdir.mkdir(exist_ok=True)
        x0, cells = sample_domain_states(ctrl, grid, cfg.sample_trajectories,
                                         derive_seed(cfg.seed, 2))
        for i, (x, cell) in enumerate(zip(x0, cells)):
            run = simulate(cfg.system, ctrl, grid, cfg.spec, x, derive_seed(cfg.seed, 3, i))
            _write_trajectory(tdir / f"run_{i:03d}.csv", run, n, m)
            sampled.append({"run": i, "cell": int(cell), "outcome": run.outcome.name,
                            "satisfied": run.satisfied, "steps": len(run.states) - 1})
    report = {
        "v_avg": ctrl.v_avg,
        "empirical_average": est.average,
        "empirical_free_average": est.free_average,
        "runs_per_cell": cfg.runs_per_cell,
        "free_cells_within_3se": float(band[free].mean()) if free.any() else 1.0,
        "sampled_runs": len(sampled),
        "sampled_satisfied": float(np.mean([s["satisfied"] for s in sampled])) if sampled else None,
        "sampled": sampled,
        "seed": cfg.seed,
    }
    _write_json(cfg.out / "evaluation.json", report)
    print(f"evaluate: v_avg={ctrl.v_avg:.4f} empirical={est.average:.4f} "
          f"sampled satisfied={report['sampled_satisfied']}")
    return EXIT_OK


def cmd_benchmark(cfg: RunConfig) -> int:
    for step in (cmd_expert, cmd_synthesize):
        code = step(cfg)
        if code not in (EXIT_OK, EXIT_THRESHOLD):
            return code
    return max(cmd_evaluate(cfg), code)


# -- argument handling --------------------------------------------------------


def _parse_set(items) -> dict:
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep or "." not in key:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI run configuration")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--workers", type=int, help="worker threads (results do not depend on it)")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override a configuration value (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="nnabs",
                                     description="Network-guided abstraction-based controller synthesis")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("expert", parents=[common], help="generate expert trajectories")
    p = sub.add_parser("synthesize", parents=[common], help="train and synthesize a controller")
    p.add_argument("--dataset", type=Path, help="expert CSV (default OUT/expert.csv)")
    p.add_argument("--sweep", action="store_true", help="run the local-set size sweep")
    p.add_argument("--lifting", action="store_true", help="run the lifting study")
    p = sub.add_parser("evaluate", parents=[common], help="Monte Carlo evaluation of a controller")
    p.add_argument("--controller", type=Path, help="controller file (default OUT/controller.bin)")
    p = sub.add_parser("benchmark", parents=[common], help="expert, synthesize and evaluate")
    p.add_argument("benchmark_id", nargs="?", help="Robot2D, RoomTemp5D or Traffic5D")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = _parse_set(args.set)
        for flag in ("seed", "workers", "out"):
            if getattr(args, flag) is not None:
                overrides[f"run.{flag}"] = str(getattr(args, flag))
        if getattr(args, "benchmark_id", None):
            overrides["run.benchmark"] = args.benchmark_id
        cfg = load_config(args.config, overrides)
        if args.command == "expert":
            return cmd_expert(cfg)
        if args.command == "synthesize":
            return cmd_synthesize(cfg, args.dataset, args.sweep, args.lifting)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.controller)
        return cmd_benchmark(cfg)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, HyperparameterError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (NumericalError, TrainingDivergence, ModelEvaluationError, NoExpertFound) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
