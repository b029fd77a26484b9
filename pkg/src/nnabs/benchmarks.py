"""Benchmark systems: 2-d robot, 5-d room temperature and 5-d road traffic.

Parameters that the benchmark descriptions leave open (robot time step,
traffic flow coefficients, traffic grid split) have documented defaults and
can be overridden through ``params``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .grid import GridSpec
from .specification import SpecKind, Specification
from .stochastic import Box, StochasticSystem


class BenchmarkId(str, enum.Enum):
    ROBOT2D = "Robot2D"
    ROOMTEMP5D = "RoomTemp5D"
    TRAFFIC5D = "Traffic5D"

    @classmethod
    def parse(cls, value) -> "BenchmarkId":
        if isinstance(value, cls):
            return value
        for member in cls:
            if member.value.lower() == str(value).lower():
                return member
        raise ValueError(f"unknown benchmark id {value!r}; expected one of "
                         f"{', '.join(m.value for m in cls)}")


@dataclass
class Guidance:
    """Defaults for the network-guided synthesis of one benchmark."""

    eta: float
    local_steps: int
    cutoff: float = 1e-4
    n_expert: int = 100
    coarse_grid: GridSpec | None = None
    epochs: int = 1000
    lift_epochs: int | None = 20
    threshold: float = 0.9
    sample_trajectories: int = 8
    tie_break: str = "first"


@dataclass
class BenchmarkSetup:
    id: BenchmarkId
    system: StochasticSystem
    spec: Specification
    grid: GridSpec
    guidance: Guidance
    params: dict = field(default_factory=dict)


ROBOT_DEFAULTS = {"dt": 2.0, "variant": "unicycle", "noise": 0.75}
ROOM_DEFAULTS = {"eta": 0.3, "beta": 0.022, "gamma": 0.05, "t_ambient": -1.0,
                 "t_heater": 50.0, "noise_std": 0.01, "heaters": (0, 2)}
TRAFFIC_DEFAULTS = {"flow": (0.3, 0.3, 0.3, 0.3, 0.3), "q": 0.2, "noise": 0.7,
                    "cells": (10, 10, 5, 5, 5), "inputs": (100, 100)}


def _merge(defaults: dict, overrides: dict | None) -> dict:
    params = dict(defaults)
    for key, value in (overrides or {}).items():
        if key not in params:
            raise ValueError(f"unknown benchmark parameter {key!r}")
        params[key] = value
    return params


# -- dynamics ---------------------------------------------------------------


def robot_step(x, u, dt=2.0, variant="unicycle"):
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    speed = u[..., 0]
    # the literal variant uses u2 as both speed and heading in the second row
    speed2 = speed if variant == "unicycle" else u[..., 1]
    out = np.empty(np.broadcast_shapes(x.shape, u.shape[:-1] + (2,)))
    out[..., 0] = x[..., 0] + dt * speed * np.cos(u[..., 1])
    out[..., 1] = x[..., 1] + dt * speed2 * np.sin(u[..., 1])
    return out


def room_step(x, u, eta=0.3, beta=0.022, gamma=0.05, t_ambient=-1.0, t_heater=50.0,
              heaters=(0, 2)):
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    neighbours = np.roll(x, 1, axis=-1) + np.roll(x, -1, axis=-1)
    out = (1 - 2 * eta - beta) * x + eta * neighbours + beta * t_ambient
    out = np.array(np.broadcast_to(out, np.broadcast_shapes(out.shape, u.shape[:-1] + (x.shape[-1],))))
    for j, room in enumerate(heaters):
        out[..., room] += -gamma * u[..., j] * x[..., room] + gamma * t_heater * u[..., j]
    return out


def traffic_step(x, u, flow=(0.3,) * 5, q=0.2):
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    a = np.asarray(flow, dtype=float)
    prev = np.roll(x, 1, axis=-1)
    keep = 1 - a - np.array([0.0, q, 0.0, q, 0.0])
    out = keep * x + np.roll(a, 1) * prev
    out = np.array(np.broadcast_to(out, np.broadcast_shapes(out.shape, u.shape[:-1] + (5,))))
    out[..., 0] += 6 * u[..., 0]
    out[..., 2] += 8 * u[..., 1]
    return out


def step_nominal(id, x, u, params: dict | None = None) -> np.ndarray:
    """Noise-free benchmark update."""
    id = BenchmarkId.parse(id)
    if id is BenchmarkId.ROBOT2D:
        p = _merge(ROBOT_DEFAULTS, params)
        return robot_step(x, u, p["dt"], p["variant"])
    if id is BenchmarkId.ROOMTEMP5D:
        p = _merge(ROOM_DEFAULTS, params)
        return room_step(x, u, p["eta"], p["beta"], p["gamma"], p["t_ambient"],
                         p["t_heater"], tuple(p["heaters"]))
    p = _merge(TRAFFIC_DEFAULTS, params)
    return traffic_step(x, u, p["flow"], p["q"])


# -- setups -----------------------------------------------------------------


def _robot(params):
    p = _merge(ROBOT_DEFAULTS, params)
    if p["variant"] not in ("unicycle", "literal"):
        raise ValueError("robot variant must be 'unicycle' or 'literal'")
    if p["dt"] <= 0:
        raise ValueError("robot dt must be > 0")
    dt, variant = float(p["dt"]), p["variant"]
    system = StochasticSystem(
        state_box=Box([-10, -10], [10, 10]),
        input_box=Box([-1, -1], [1, 1]),
        nominal=lambda x, u: robot_step(x, u, dt, variant),
        noise_cov=np.full(2, float(p["noise"])),
        name="Robot2D", params=p)
    spec = Specification(SpecKind.REACH_AVOID, 16, goal=Box([5, 5], [7, 7]),
                         obstacle=Box([-2, -2], [2, 2]))
    grid = GridSpec((0.5, 0.5), (0.1, 0.1))
    guidance = Guidance(eta=0.1, local_steps=10, n_expert=121,
                        coarse_grid=GridSpec((2.0, 2.0), (0.2, 0.2)))
    return system, spec, grid, guidance, p


def _room(params):
    p = _merge(ROOM_DEFAULTS, params)
    for val in (1 - 2 * p["eta"] - p["beta"], 1 - 2 * p["eta"] - p["beta"] - p["gamma"]):
        if not 0 <= val <= 1:
            raise ValueError("room parameters must keep diagonal coefficients in [0, 1]")
    kw = {k: p[k] for k in ("eta", "beta", "gamma", "t_ambient", "t_heater")}
    heaters = tuple(int(h) for h in p["heaters"])
    if len(heaters) != 2:
        raise ValueError("room model takes exactly two heated rooms")
    safe = Box([18.8] * 5, [21.2] * 5)
    system = StochasticSystem(
        state_box=safe,
        input_box=Box([0, 0], [1, 1]),
        nominal=lambda x, u: room_step(x, u, heaters=heaters, **kw),
        noise_cov=np.full(5, float(p["noise_std"]) ** 2),
        name="RoomTemp5D", params=p)
    spec = Specification(SpecKind.SAFETY, 8, safe=safe)
    grid = GridSpec((0.4,) * 5, (0.05, 0.05))
    guidance = Guidance(eta=0.05, local_steps=7, n_expert=935,
                        coarse_grid=GridSpec((0.8,) * 5, (0.1, 0.1)), sample_trajectories=100,
                        tie_break="median")
    return system, spec, grid, guidance, p


def _traffic(params):
    p = _merge(TRAFFIC_DEFAULTS, params)
    flow = tuple(float(a) for a in p["flow"])
    q = float(p["q"])
    if len(flow) != 5:
        raise ValueError("traffic flow needs five coefficients")
    keep = [1 - a - (q if i in (1, 3) else 0.0) for i, a in enumerate(flow)]
    if not all(0 <= k <= 1 for k in keep) or not all(0 <= a <= 1 for a in flow):
        raise ValueError("traffic parameters must keep diagonal coefficients in [0, 1]")
    system = StochasticSystem(
        state_box=Box([0] * 5, [10] * 5),
        input_box=Box([0, 0], [1, 1]),
        nominal=lambda x, u: traffic_step(x, u, flow, q),
        noise_cov=np.full(5, float(p["noise"])),
        name="Traffic5D", params=p)
    safe = Box([0] * 5, [10] * 5)
    spec = Specification(SpecKind.SAFETY, 7, safe=safe)
    cells = tuple(int(c) for c in p["cells"])
    inputs = tuple(int(c) for c in p["inputs"])
    grid = GridSpec(tuple(10.0 / c for c in cells), tuple(1.0 / (c - 1) for c in inputs))
    coarse_cells = tuple(max(1, c // 4) for c in cells)
    coarse_inputs = tuple(max(2, c // 4) for c in inputs)
    guidance = Guidance(eta=grid.input_steps[0], local_steps=10, n_expert=500,
                        coarse_grid=GridSpec(tuple(10.0 / c for c in coarse_cells),
                                             tuple(1.0 / (c - 1) for c in coarse_inputs)),
                        threshold=0.8)
    return system, spec, grid, guidance, p


def make_benchmark(id, params: dict | None = None) -> BenchmarkSetup:
    """Full experiment setup for a named benchmark."""
    id = BenchmarkId.parse(id)
    build = {BenchmarkId.ROBOT2D: _robot, BenchmarkId.ROOMTEMP5D: _room,
             BenchmarkId.TRAFFIC5D: _traffic}[id]
    system, spec, grid, guidance, p = build(params)
    return BenchmarkSetup(id, system, spec, grid, guidance, p)
