"""Run configuration read from an INI file.

Sections and keys (all optional unless noted)::

    [run]        benchmark, seed, workers, out
    [benchmark]  parameter overrides of a named benchmark (e.g. dt, variant)
    [system]     custom system: nominal = module:function, state_lower,
                 state_upper, input_lower, input_upper, noise_cov
    [spec]       kind, horizon, goal_lower, goal_upper, obstacle_lower, obstacle_upper
    [grid]       state_widths, input_steps, include_input_limits
    [synthesis]  cutoff, eta, local_steps, threshold, max_iter, sweep, tie_break
    [training]   epochs, lift_epochs, batch, lr
    [expert]     n_traj, state_widths, input_steps
    [evaluate]   runs_per_cell, sample_trajectories

Either ``[run] benchmark`` or a ``[system]`` section is required. Vectors are
comma-separated. Unknown sections or keys are rejected.
"""

from __future__ import annotations

import configparser
import importlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .benchmarks import BenchmarkId, Guidance, make_benchmark
from .grid import GridSpec
from .simulation import default_coarse_grid
from .specification import SpecKind, Specification
from .stochastic import Box, StochasticSystem
from .synthesis import TIE_BREAKS


class ConfigError(ValueError):
    pass


SCHEMA = {
    "run": {"benchmark", "seed", "workers", "out"},
    "benchmark": None,
    "system": {"nominal", "state_lower", "state_upper", "input_lower", "input_upper", "noise_cov"},
    "spec": {"kind", "horizon", "goal_lower", "goal_upper", "obstacle_lower", "obstacle_upper"},
    "grid": {"state_widths", "input_steps", "include_input_limits"},
    "synthesis": {"cutoff", "eta", "local_steps", "threshold", "max_iter", "sweep", "tie_break"},
    "training": {"epochs", "lift_epochs", "batch", "lr"},
    "expert": {"n_traj", "state_widths", "input_steps"},
    "evaluate": {"runs_per_cell", "sample_trajectories"},
}


@dataclass
class RunConfig:
    system: StochasticSystem
    spec: Specification
    grid: GridSpec
    coarse_grid: GridSpec
    benchmark: BenchmarkId | None = None
    cutoff: float = 1e-4
    eta: float = 0.1
    local_steps: int = 10
    threshold: float = 0.9
    max_iter: int = 10
    sweep: tuple[int, ...] = ()
    tie_break: str = "first"
    epochs: int = 1000
    lift_epochs: int | None = None
    batch: int = 32
    lr: float = 1e-3
    n_traj: int = 100
    runs_per_cell: int = 100
    sample_trajectories: int = 8
    seed: int = 0
    workers: int = 1
    out: Path = field(default_factory=lambda: Path("out"))

    def validate(self) -> None:
        checks = [
            (0 < self.cutoff <= 1, "cutoff must lie in (0, 1]"),
            (self.eta > 0, "eta must be > 0"),
            (self.local_steps >= 1, "local_steps must be >= 1"),
            (0 <= self.threshold <= 1, "threshold must lie in [0, 1]"),
            (self.max_iter >= 1, "max_iter must be >= 1"),
            (all(s >= 1 for s in self.sweep), "sweep entries must be >= 1"),
            (self.tie_break in TIE_BREAKS, f"tie_break must be one of {TIE_BREAKS}"),
            (self.epochs >= 1, "epochs must be >= 1"),
            (self.lift_epochs is None or self.lift_epochs >= 0, "lift_epochs must be >= 0"),
            (self.batch >= 1, "batch must be >= 1"),
            (self.lr > 0, "lr must be > 0"),
            (self.n_traj >= 1, "n_traj must be >= 1"),
            (self.runs_per_cell >= 1, "runs_per_cell must be >= 1"),
            (self.sample_trajectories >= 0, "sample_trajectories must be >= 0"),
            (self.workers >= 1, "workers must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        try:
            self.spec.validate_domain(self.system.state_box)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        for g in (self.grid, self.coarse_grid):
            if len(g.state_widths) != self.system.state_dim or len(g.input_steps) != self.system.input_dim:
                raise ConfigError("grid dimensions do not match the system")


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from None


def _scalar(text: str):
    text = text.strip()
    if "," in text:
        return _floats(text)
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def _num(section, key, cast, default):
    if key not in section:
        return default
    try:
        return cast(section[key])
    except ValueError:
        raise ConfigError(f"[{section.name}] {key}: cannot parse {section[key]!r}") from None


def _load_callable(spec: str):
    mod, _, name = spec.partition(":")
    if not name:
        raise ConfigError("system nominal must be given as module:function")
    try:
        return getattr(importlib.import_module(mod), name)
    except (ImportError, AttributeError) as exc:
        raise ConfigError(f"cannot load nominal dynamics {spec!r}: {exc}") from None


def _custom_system(sec) -> StochasticSystem:
    for key in ("nominal", "state_lower", "state_upper", "input_lower", "input_upper"):
        if key not in sec:
            raise ConfigError(f"[system] requires {key}")
    state_box = Box(_floats(sec["state_lower"]), _floats(sec["state_upper"]))
    input_box = Box(_floats(sec["input_lower"]), _floats(sec["input_upper"]))
    noise = _floats(sec["noise_cov"]) if "noise_cov" in sec else (0.0,) * state_box.dim
    try:
        return StochasticSystem(state_box, input_box, _load_callable(sec["nominal"]), np.array(noise))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _spec_from(sec, base: Specification | None) -> Specification:
    def box(prefix):
        lo, hi = f"{prefix}_lower", f"{prefix}_upper"
        if (lo in sec) != (hi in sec):
            raise ConfigError(f"[spec] {prefix} needs both lower and upper bounds")
        return Box(_floats(sec[lo]), _floats(sec[hi])) if lo in sec else None

    kind = SpecKind(sec["kind"]) if "kind" in sec else (base.kind if base else None)
    if kind is None:
        raise ConfigError("[spec] kind is required for a custom system")
    horizon = _num(sec, "horizon", int, base.horizon if base else None)
    if horizon is None:
        raise ConfigError("[spec] horizon is required for a custom system")
    goal = box("goal") if "goal_lower" in sec or "goal_upper" in sec else (base.goal if base else None)
    obstacle = box("obstacle") if "obstacle_lower" in sec or "obstacle_upper" in sec else \
        (base.obstacle if base else None)
    if kind is SpecKind.SAFETY:
        goal = None
    try:
        return Specification(kind, horizon, goal=goal, obstacle=obstacle, safe=base.safe if base else None)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Parse and validate a run configuration.

    ``overrides`` maps ``"section.key"`` to string values applied on top of
    the file (used for CLI flags and programmatic runs).
    """
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                cp.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
    for dotted, value in (overrides or {}).items():
        sec, _, key = dotted.partition(".")
        if not cp.has_section(sec):
            cp.add_section(sec)
        cp[sec][key] = str(value)
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}]")
        allowed = SCHEMA[sec]
        if allowed is not None:
            unknown = set(cp[sec]) - allowed
            if unknown:
                raise ConfigError(f"unknown key(s) in [{sec}]: {', '.join(sorted(unknown))}")

    def sec(name):
        return cp[name] if cp.has_section(name) else cp[configparser.DEFAULTSECT]

    run = sec("run")
    guidance: Guidance | None = None
    bench = None
    if "benchmark" in run:
        if cp.has_section("system"):
            raise ConfigError("give either [run] benchmark or a [system] section, not both")
        params = {k: _scalar(v) for k, v in sec("benchmark").items()}
        try:
            bench = BenchmarkId.parse(run["benchmark"])
            setup = make_benchmark(bench, params)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        system, base_spec, grid, guidance = setup.system, setup.spec, setup.grid, setup.guidance
        spec = _spec_from(sec("spec"), base_spec) if cp.has_section("spec") else base_spec
    elif cp.has_section("system"):
        if cp.has_section("benchmark"):
            raise ConfigError("[benchmark] overrides need [run] benchmark")
        system = _custom_system(cp["system"])
        spec = _spec_from(sec("spec"), None)
        grid = None
    else:
        raise ConfigError("config needs [run] benchmark or a [system] section")

    g = sec("grid")
    if grid is None and not {"state_widths", "input_steps"} <= set(g):
        raise ConfigError("[grid] state_widths and input_steps are required for a custom system")
    try:
        grid = GridSpec(
            _floats(g["state_widths"]) if "state_widths" in g else grid.state_widths,
            _floats(g["input_steps"]) if "input_steps" in g else grid.input_steps,
            g.getboolean("include_input_limits", True) if "include_input_limits" in g
            else (grid.include_input_limits if grid else True))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    e = sec("expert")
    coarse = guidance.coarse_grid if guidance and guidance.coarse_grid else default_coarse_grid(system, grid)
    if "state_widths" in e or "input_steps" in e:
        coarse = replace(coarse,
                         state_widths=_floats(e["state_widths"]) if "state_widths" in e else coarse.state_widths,
                         input_steps=_floats(e["input_steps"]) if "input_steps" in e else coarse.input_steps)

    s, t, ev = sec("synthesis"), sec("training"), sec("evaluate")
    sweep = tuple(int(v) for v in _floats(s["sweep"])) if "sweep" in s else ()
    lift = _num(t, "lift_epochs", int, None)
    cfg = RunConfig(
        system=system, spec=spec, grid=grid, coarse_grid=coarse, benchmark=bench,
        cutoff=_num(s, "cutoff", float, guidance.cutoff if guidance else 1e-4),
        eta=_num(s, "eta", float, guidance.eta if guidance else grid.input_steps[0]),
        local_steps=_num(s, "local_steps", int, guidance.local_steps if guidance else 10),
        threshold=_num(s, "threshold", float, guidance.threshold if guidance else 0.9),
        max_iter=_num(s, "max_iter", int, 10),
        sweep=sweep,
        tie_break=s.get("tie_break", guidance.tie_break if guidance else "first"),
        epochs=_num(t, "epochs", int, guidance.epochs if guidance else 1000),
        lift_epochs=lift if lift is not None else (guidance.lift_epochs if guidance else None),
        batch=_num(t, "batch", int, 32),
        lr=_num(t, "lr", float, 1e-3),
        n_traj=_num(e, "n_traj", int, guidance.n_expert if guidance else 100),
        runs_per_cell=_num(ev, "runs_per_cell", int, 100),
        sample_trajectories=_num(ev, "sample_trajectories", int,
                                 guidance.sample_trajectories if guidance else 8),
        seed=_num(run, "seed", int, 0),
        workers=_num(run, "workers", int, 1),
        out=Path(run.get("out", "out")),
    )
    cfg.validate()
    return cfg
