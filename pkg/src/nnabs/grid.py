"""Uniform grid abstraction of the state and input boxes.

State cells are half-open ``[l, l + w)`` per axis with the topmost cell
closed, so the cells partition the state box exactly. Representative points
are cell centers. Inputs are lattice points starting at the lower corner of
the input box.

Because kernels have diagonal covariance, a transition row is an outer
product of per-axis mass vectors over a window of cells. Rows are stored in
that factored form (``FactoredRows``); ``transition_row`` expands one row into
an explicit sparse map.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .specification import Specification
from .stochastic import Box, GaussianKernel, StochasticSystem, axis_masses, box_mass

OUTSIDE = -1


@dataclass(frozen=True)
class GridSpec:
    """Cell widths for the state box and lattice steps for the input box."""

    state_widths: tuple[float, ...]
    input_steps: tuple[float, ...]
    include_input_limits: bool = True

    def __post_init__(self):
        object.__setattr__(self, "state_widths", tuple(float(w) for w in self.state_widths))
        object.__setattr__(self, "input_steps", tuple(float(s) for s in self.input_steps))
        if any(w <= 0 for w in self.state_widths) or any(s <= 0 for s in self.input_steps):
            raise ValueError("grid widths and steps must be > 0")

    def to_dict(self) -> dict:
        return {"state_widths": list(self.state_widths), "input_steps": list(self.input_steps),
                "include_input_limits": self.include_input_limits}


def _count(span: float, width: float, what: str) -> int:
    n = int(round(span / width))
    if n < 1 or abs(n * width - span) > 1e-6 * span:
        raise ValueError(f"{what} width {width} does not tile a span of {span}")
    return n


@dataclass
class FactoredRows:
    """A batch of transition rows in per-axis factored form.

    Row ``p`` assigns cell ``(starts[p, 0] + i_0, ..., starts[p, n-1] + i_{n-1})``
    the probability ``prod_d masses[d][p, i_d]``; indices past the last cell
    of an axis always carry zero mass.
    """

    starts: np.ndarray
    masses: list[np.ndarray]
    goal_mass: np.ndarray

    def __len__(self):
        return self.starts.shape[0]

    def take(self, idx) -> "FactoredRows":
        return FactoredRows(self.starts[idx], [m[idx] for m in self.masses], self.goal_mass[idx])

    @classmethod
    def concat(cls, parts: list["FactoredRows"]) -> "FactoredRows":
        return cls(np.concatenate([p.starts for p in parts]),
                   [np.concatenate([p.masses[d] for p in parts]) for d in range(len(parts[0].masses))],
                   np.concatenate([p.goal_mass for p in parts]))

    def row_sums(self) -> np.ndarray:
        return np.prod(np.stack([m.sum(axis=1) for m in self.masses]), axis=0)


class GridAbstraction:
    """Finite abstraction of a system's state and input boxes.

    Args:
        state_box, input_box: the boxes being partitioned.
        grid: cell widths and lattice steps.
        spec: optional specification used to classify cells as goal/obstacle.
    """

    def __init__(self, state_box: Box, input_box: Box, grid: GridSpec, spec: Specification | None = None):
        if len(grid.state_widths) != state_box.dim or len(grid.input_steps) != input_box.dim:
            raise ValueError("grid spec dimension does not match the boxes")
        self.state_box = state_box
        self.input_box = input_box
        self.spec_grid = grid
        self.counts = tuple(_count(float(s), w, "state cell")
                            for s, w in zip(state_box.widths, grid.state_widths))
        self.widths = state_box.widths / np.array(self.counts)
        self.edges = [state_box.lower[d] + self.widths[d] * np.arange(c + 1)
                      for d, c in enumerate(self.counts)]
        for d, e in enumerate(self.edges):
            e[-1] = state_box.upper[d]

        self.input_values = []
        self.input_spacing = []
        for d in range(input_box.dim):
            lo, hi = input_box.lower[d], input_box.upper[d]
            n = _count(hi - lo, grid.input_steps[d], "input step")
            h = (hi - lo) / n
            if grid.include_input_limits:
                vals = lo + h * np.arange(n + 1)
                vals[-1] = hi
            else:
                vals = lo + h * np.arange(1, n)
                if vals.size == 0:
                    raise ValueError("input step leaves no interior lattice point")
            self.input_values.append(vals)
            self.input_spacing.append(h)
        self.input_counts = tuple(len(v) for v in self.input_values)

        self.n_states = int(np.prod(self.counts))
        self.n_inputs = int(np.prod(self.input_counts))
        self.state_dim = state_box.dim
        self.input_dim = input_box.dim

        mesh = np.meshgrid(*[(e[:-1] + e[1:]) / 2 for e in self.edges], indexing="ij")
        self.centers = np.stack([m.ravel() for m in mesh], axis=-1)
        imesh = np.meshgrid(*self.input_values, indexing="ij")
        self.inputs = np.stack([m.ravel() for m in imesh], axis=-1)

        self.spec = None
        self.goal_mask = np.zeros(self.n_states, dtype=bool)
        self.obstacle_mask = np.zeros(self.n_states, dtype=bool)
        if spec is not None:
            self.classify(spec)

    # -- bookkeeping --------------------------------------------------------

    def classify(self, spec: Specification) -> None:
        spec.validate_domain(self.state_box)
        self.spec = spec
        self.goal_mask = spec.goal.contains(self.centers) if spec.goal is not None else \
            np.zeros(self.n_states, dtype=bool)
        self.obstacle_mask = spec.obstacle.contains(self.centers) if spec.obstacle is not None else \
            np.zeros(self.n_states, dtype=bool)

    @property
    def free_mask(self) -> np.ndarray:
        return ~(self.goal_mask | self.obstacle_mask)

    @property
    def free_cells(self) -> np.ndarray:
        return np.flatnonzero(self.free_mask)

    def digest(self) -> str:
        payload = {
            "state_box": self.state_box.to_list(), "input_box": self.input_box.to_list(),
            "grid": self.spec_grid.to_dict(),
            "spec": None if self.spec is None else self.spec.to_dict(),
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]

    def cell_box(self, j: int) -> Box:
        mi = self.unravel_state(j)
        return Box([self.edges[d][i] for d, i in enumerate(mi)],
                   [self.edges[d][i + 1] for d, i in enumerate(mi)])

    def unravel_state(self, j):
        return tuple(int(i) for i in np.unravel_index(int(j), self.counts))

    def ravel_state(self, multi) -> np.ndarray:
        return np.ravel_multi_index(tuple(np.asarray(multi).T), self.counts)

    def representative_point(self, j) -> np.ndarray:
        return self.centers[j]

    # -- quantizers ---------------------------------------------------------

    def axis_cells(self, x, d: int) -> np.ndarray:
        """Cell index along axis ``d`` for coordinates ``x`` (``OUTSIDE`` when off-grid)."""
        x = np.asarray(x, dtype=float)
        e = self.edges[d]
        n = self.counts[d]
        i = np.floor((x - e[0]) / self.widths[d]).astype(np.int64)
        i = np.clip(i, 0, n - 1)
        i = np.where(x < e[i], i - 1, i)
        i = np.clip(i, 0, n - 1)
        i = np.where((x >= e[i + 1]) & (i < n - 1), i + 1, i)
        inside = (x >= e[0]) & (x <= e[-1])
        return np.where(inside, i, OUTSIDE)

    def quantize_states(self, x) -> np.ndarray:
        """Flat cell indices for ``x[..., n]``; ``OUTSIDE`` outside the state box."""
        x = np.asarray(x, dtype=float)
        cells = [self.axis_cells(x[..., d], d) for d in range(self.state_dim)]
        outside = np.any(np.stack([c == OUTSIDE for c in cells]), axis=0)
        safe = [np.where(c == OUTSIDE, 0, c) for c in cells]
        flat = np.ravel_multi_index(tuple(safe), self.counts)
        return np.where(outside, OUTSIDE, flat)

    def snap_indices(self, u) -> np.ndarray:
        """Per-axis lattice indices of the nearest input points (clamped, half-up)."""
        u = np.asarray(u, dtype=float)
        out = np.empty(u.shape, dtype=np.int64)
        for d in range(self.input_dim):
            vals = self.input_values[d]
            ud = np.clip(u[..., d], self.input_box.lower[d], self.input_box.upper[d])
            i = np.floor((ud - vals[0]) / self.input_spacing[d] + 0.5).astype(np.int64)
            out[..., d] = np.clip(i, 0, len(vals) - 1)
        return out

    def ravel_input(self, multi) -> np.ndarray:
        multi = np.asarray(multi)
        return np.ravel_multi_index(tuple(np.moveaxis(multi, -1, 0)), self.input_counts)

    def snap_input(self, u) -> np.ndarray:
        """Flat lattice index of the nearest input point."""
        return self.ravel_input(self.snap_indices(u))

    # -- transitions --------------------------------------------------------

    def window_widths(self, sys: StochasticSystem, cutoff: float) -> tuple[int, ...]:
        """Maximal number of window cells per axis over all kernels of ``sys``."""
        r = np.sqrt(sys.variance_bound()) * _tail_quantile(cutoff, self.state_dim)
        return tuple(int(np.floor(2 * r[d] / self.widths[d])) + 2 for d in range(self.state_dim))

    def factored_rows(self, sys: StochasticSystem, states, inputs, cutoff: float,
                      widths: tuple[int, ...] | None = None) -> FactoredRows:
        """Transition rows for paired flat state indices and flat input indices."""
        states = np.asarray(states, dtype=np.int64)
        inputs = np.asarray(inputs, dtype=np.int64)
        if widths is None:
            widths = self.window_widths(sys, cutoff)
        mean, var = sys.kernel_params(self.centers[states], self.inputs[inputs])
        return self._rows_from_kernels(mean, var, cutoff, widths)

    def _rows_from_kernels(self, mean, var, cutoff, widths) -> FactoredRows:
        p = mean.shape[0]
        n = self.state_dim
        std = np.sqrt(var)
        r = std * _tail_quantile(cutoff, n)
        starts = np.zeros((p, n), dtype=np.int64)
        masses = []
        for d in range(n):
            e = self.edges[d]
            nd = self.counts[d]
            w = self.widths[d]
            det = std[:, d] == 0
            lo = np.floor((mean[:, d] - r[:, d] - e[0]) / w).astype(np.int64)
            hi = np.floor((mean[:, d] + r[:, d] - e[0]) / w).astype(np.int64)
            q = self.axis_cells(mean[:, d], d)
            lo = np.where(det, q, lo)
            hi = np.where(det, q, hi)
            empty = (hi < 0) | (lo > nd - 1) | (det & (q == OUTSIDE))
            lo = np.clip(lo, 0, nd - 1)
            hi = np.clip(hi, 0, nd - 1)
            if np.any(hi - lo + 1 > widths[d]):
                raise ValueError("kernel window exceeds the precomputed row width")
            cells = lo[:, None] + np.arange(widths[d])
            valid = (cells <= hi[:, None]) & ~empty[:, None]
            cc = np.clip(cells, 0, nd - 1)
            m = axis_masses(mean[:, d, None], std[:, d, None], e[cc], e[cc + 1])
            if np.any(det):
                m = np.where(det[:, None], (cells == q[:, None]).astype(float), m)
            m = np.where(valid, m, 0.0)
            starts[:, d] = lo
            masses.append(m)
        goal = np.zeros(p)
        spec = self.spec
        if spec is not None and spec.is_reach_avoid:
            goal = np.prod(axis_masses(mean, std, spec.goal.lower, spec.goal.upper), axis=1)
        return FactoredRows(starts, masses, goal)


def _tail_quantile(cutoff: float, n: int) -> float:
    if not 0 < cutoff <= 1:
        raise ValueError("cutoff must lie in (0, 1]")
    return float(ndtri(1 - cutoff / (2 * n))) if cutoff < 1 else max(float(ndtri(1 - 1 / (2 * n))), 0.0)


def reachable_cells(grid: GridAbstraction, kernel: GaussianKernel, cutoff: float) -> list[int]:
    """Flat indices of all cells meeting the kernel's cut-off window."""
    per_axis = []
    std = kernel.std
    r = std * _tail_quantile(cutoff, grid.state_dim)
    for d in range(grid.state_dim):
        if std[d] == 0:
            q = int(grid.axis_cells(kernel.mean[d], d))
            if q == OUTSIDE:
                return []
            per_axis.append(np.array([q]))
            continue
        lo = int(np.floor((kernel.mean[d] - r[d] - grid.edges[d][0]) / grid.widths[d]))
        hi = int(np.floor((kernel.mean[d] + r[d] - grid.edges[d][0]) / grid.widths[d]))
        if hi < 0 or lo > grid.counts[d] - 1:
            return []
        per_axis.append(np.arange(max(lo, 0), min(hi, grid.counts[d] - 1) + 1))
    mesh = np.meshgrid(*per_axis, indexing="ij")
    return np.ravel_multi_index(tuple(m.ravel() for m in mesh), grid.counts).tolist()


def expand_row(grid: GridAbstraction, rows: FactoredRows, p: int = 0) -> dict[int, float]:
    """Sparse ``cell -> probability`` map of row ``p`` with goal cells zeroed."""
    out: dict[int, float] = {}
    axes = []
    for d in range(grid.state_dim):
        m = rows.masses[d][p]
        idx = np.flatnonzero(m > 0)
        axes.append((rows.starts[p, d] + idx, m[idx]))
    if any(len(a[0]) == 0 for a in axes):
        return out
    cells = np.meshgrid(*[a[0] for a in axes], indexing="ij")
    probs = np.ones(cells[0].shape)
    for d, (_, m) in enumerate(axes):
        shape = [1] * grid.state_dim
        shape[d] = -1
        probs = probs * m.reshape(shape)
    flat = np.ravel_multi_index(tuple(c.ravel() for c in cells), grid.counts)
    for j, pr in zip(flat.tolist(), probs.ravel().tolist()):
        if not grid.goal_mask[j]:
            out[j] = pr
    return out


def transition_row(grid: GridAbstraction, sys: StochasticSystem, state: int, u, cutoff: float,
                   spec: Specification | None = None) -> tuple[dict[int, float], float]:
    """One abstract transition row and its goal mass.

    ``u`` is an input point (snapped to the lattice). Cells inside the goal are
    zeroed in the row; their mass, and any goal mass outside the window, is
    reported as ``goal_mass`` for reach-avoid specifications.
    """
    if spec is not None and spec is not grid.spec:
        grid.classify(spec)
    ui = int(grid.snap_input(np.asarray(u, dtype=float)))
    rows = grid.factored_rows(sys, [state], [ui], cutoff)
    return expand_row(grid, rows), float(rows.goal_mass[0])


def kernel_box_mass_outside(kernel: GaussianKernel, domain: Box) -> float:
    """Kernel mass outside ``domain``."""
    return 1.0 - box_mass(kernel, domain)
