"""Network-guided bounded-horizon value iteration and the train/synthesize/lift loop.

Value iteration runs backwards over ``k = T-1 .. 0``. At each free cell only
the lattice inputs in a window around the snapped network proposal are
considered; their transition rows are computed on first use and kept in a
``TransitionBuffer`` for the rest of the run (rows do not depend on ``k``).

Ties in the Q maximization go to the lowest flat input index. A cell whose
every Q value is zero gets no action and value zero.
"""

from __future__ import annotations

import json
import logging
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grid import FactoredRows, GridAbstraction
from .policy import PolicyNetwork, TrajectoryDataset, controller_to_dataset, imitation_learn, nn_init
from .specification import SpecKind, Specification
from .stochastic import StochasticSystem

log = logging.getLogger(__name__)

NONE = -1
CTRL_MAGIC = b"CTL1"
# elements per gathered value block; bounds the memory of one contraction chunk
_GATHER_BUDGET = 2_000_000


class NumericalError(RuntimeError):
    """Value iteration produced a non-finite Q value."""


def derive_seed(seed: int, *tags: int) -> int:
    """Child seed of ``seed`` for the given integer tags (``SeedSequence`` based)."""
    return int(np.random.SeedSequence([int(seed), *map(int, tags)]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# controller table


@dataclass
class ControllerTable:
    """Time-indexed abstract controller with its value function.

    ``actions[j, k]`` is a flat input index (``NONE`` where undefined) and
    ``values[j, k]`` the satisfaction probability from cell ``j`` at step ``k``.
    """

    actions: np.ndarray
    values: np.ndarray
    v_avg: float
    kind: SpecKind
    horizon: int
    grid_digest: str
    stats: dict = field(default_factory=dict)

    def action_at(self, cell, k) -> np.ndarray:
        return self.actions[cell, k]

    def save(self, path) -> None:
        """Binary layout (little-endian): ``b"CTL1"``, ``uint32`` header length,
        UTF-8 JSON header, ``int32`` actions ``[n_states, T]`` row-major,
        ``float64`` values ``[n_states, T + 1]`` row-major."""
        header = json.dumps({
            "digest": self.grid_digest, "horizon": self.horizon, "kind": self.kind.value,
            "n_states": int(self.actions.shape[0]), "v_avg": self.v_avg,
        }, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(CTRL_MAGIC)
            fh.write(struct.pack("<I", len(header)))
            fh.write(header)
            fh.write(np.ascontiguousarray(self.actions, dtype="<i4").tobytes())
            fh.write(np.ascontiguousarray(self.values, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "ControllerTable":
        raw = Path(path).read_bytes()
        if raw[:4] != CTRL_MAGIC:
            raise ValueError(f"{path}: not a controller file")
        (hlen,) = struct.unpack_from("<I", raw, 4)
        header = json.loads(raw[8:8 + hlen].decode())
        n, t = header["n_states"], header["horizon"]
        off = 8 + hlen
        actions = np.frombuffer(raw, "<i4", n * t, off).reshape(n, t).astype(np.int64)
        off += 4 * n * t
        values = np.frombuffer(raw, "<f8", n * (t + 1), off).reshape(n, t + 1).astype(float)
        return cls(actions, values, header["v_avg"], SpecKind(header["kind"]), t, header["digest"])

    def summary(self) -> dict:
        return {"v_avg": self.v_avg, "kind": self.kind.value, "horizon": self.horizon,
                "grid_digest": self.grid_digest, **self.stats}


# ---------------------------------------------------------------------------
# local action sets


def local_offsets(local_steps: int) -> np.ndarray:
    """Centered window of ``local_steps`` integer offsets: ``-I//2 .. I-1-I//2``."""
    if local_steps < 1:
        raise ValueError("local_steps must be >= 1")
    return np.arange(local_steps) - local_steps // 2


def _lattice_stride(grid: GridAbstraction, eta: float) -> np.ndarray:
    stride = np.array([eta / h for h in grid.input_spacing])
    rounded = np.round(stride)
    if np.any(rounded < 1) or np.any(np.abs(stride - rounded) > 1e-6):
        raise ValueError("eta must be a positive integer multiple of the input lattice step")
    return rounded.astype(np.int64)


def local_action_matrix(grid: GridAbstraction, centers: np.ndarray, eta: float,
                        local_steps: int) -> np.ndarray:
    """Local action sets for many centers.

    Args:
        centers: per-axis lattice indices of the snapped proposals, ``[P, m]``.

    Returns:
        ``[P, L]`` flat input indices, ascending per row, padded with ``NONE``.
    """
    stride = _lattice_stride(grid, eta)
    offs = local_offsets(local_steps)
    m = grid.input_dim
    p = centers.shape[0]
    axes = []
    for d in range(m):
        idx = centers[:, d, None] + offs[None, :] * stride[d]
        ok = (idx >= 0) & (idx < grid.input_counts[d])
        axes.append((idx, ok))
    # cartesian product over axes, row-major in the input multi-index
    flat = np.zeros((p, 1), dtype=np.int64)
    valid = np.ones((p, 1), dtype=bool)
    for d in range(m):
        idx, ok = axes[d]
        flat = (flat[:, :, None] * grid.input_counts[d] + idx[:, None, :]).reshape(p, -1)
        valid = (valid[:, :, None] & ok[:, None, :]).reshape(p, -1)
    flat = np.where(valid, flat, np.iinfo(np.int64).max)
    flat.sort(axis=1)
    # offsets are distinct, so valid entries never repeat
    flat[flat == np.iinfo(np.int64).max] = NONE
    keep = int((flat != NONE).sum(axis=1).max())
    return flat[:, :keep]


@dataclass
class LocalActionSet:
    center: int
    indices: np.ndarray
    points: np.ndarray

    def __len__(self):
        return len(self.indices)


def local_actions(net: PolicyNetwork, grid: GridAbstraction, cell: int, k: int, eta: float,
                  local_steps: int) -> LocalActionSet:
    """Input lattice points within ``local_steps`` multiples of ``eta`` of the
    snapped network proposal at ``(cell, k)``."""
    u = net(grid.centers[cell][None], np.array([k]))
    center = grid.snap_indices(u)
    row = local_action_matrix(grid, center, eta, local_steps)[0]
    row = row[row != NONE]
    return LocalActionSet(int(grid.ravel_input(center[0])), row, grid.inputs[row])


# ---------------------------------------------------------------------------
# transition buffer and Q evaluation


class TransitionBuffer:
    """Cache of transition rows keyed by ``(cell, input)``.

    Keys are kept sorted for vectorized lookup; inserting a key that is
    already present is a no-op.
    """

    def __init__(self, grid: GridAbstraction, sys: StochasticSystem, cutoff: float):
        self.grid = grid
        self.sys = sys
        self.cutoff = cutoff
        self.widths = grid.window_widths(sys, cutoff)
        self.keys = np.zeros(0, dtype=np.int64)
        self.ids = np.zeros(0, dtype=np.int64)
        self._parts: list[FactoredRows] = []
        self._rows: FactoredRows | None = None
        self.computed = 0

    def __len__(self):
        return len(self.keys)

    def key(self, cells, inputs) -> np.ndarray:
        return np.asarray(cells, dtype=np.int64) * self.grid.n_inputs + np.asarray(inputs, dtype=np.int64)

    def lookup(self, keys) -> np.ndarray:
        keys = np.asarray(keys, dtype=np.int64)
        if len(self.keys) == 0:
            return np.full(keys.shape, NONE, dtype=np.int64)
        pos = np.searchsorted(self.keys, keys)
        pos = np.minimum(pos, len(self.keys) - 1)
        hit = self.keys[pos] == keys
        return np.where(hit, self.ids[pos], NONE)

    def compute(self, keys, workers: int = 1) -> FactoredRows:
        cells = keys // self.grid.n_inputs
        inputs = keys % self.grid.n_inputs
        chunk = max(1, -(-len(keys) // max(1, workers)))
        spans = [(s, min(s + chunk, len(keys))) for s in range(0, len(keys), chunk)]

        def work(span):
            a, b = span
            return self.grid.factored_rows(self.sys, cells[a:b], inputs[a:b], self.cutoff, self.widths)

        if workers > 1 and len(spans) > 1:
            with ThreadPoolExecutor(workers) as pool:
                parts = list(pool.map(work, spans))
        else:
            parts = [work(s) for s in spans]
        return FactoredRows.concat(parts)

    def ensure(self, keys, workers: int = 1) -> int:
        """Compute and insert rows for all absent ``keys``; returns the count added."""
        keys = np.unique(np.asarray(keys, dtype=np.int64))
        missing = keys[self.lookup(keys) == NONE]
        if len(missing) == 0:
            return 0
        rows = self.compute(missing, workers)
        start = self.computed
        self._parts.append(rows)
        self._rows = None
        self.computed += len(missing)
        merged = np.concatenate([self.keys, missing])
        ids = np.concatenate([self.ids, np.arange(start, start + len(missing))])
        order = np.argsort(merged, kind="stable")
        self.keys, self.ids = merged[order], ids[order]
        return len(missing)

    @property
    def rows(self) -> FactoredRows:
        if self._rows is None and not self._parts:
            n = self.grid.state_dim
            return FactoredRows(np.zeros((0, n), dtype=np.int64),
                                [np.zeros((0, w)) for w in self.widths], np.zeros(0))
        if self._rows is None:
            self._rows = FactoredRows.concat(self._parts) if len(self._parts) > 1 else self._parts[0]
            self._parts = [self._rows]
        return self._rows


def padded_values(grid: GridAbstraction, values: np.ndarray, widths) -> np.ndarray:
    """Next-step values on the cell grid, goal cells zeroed, zero padded past each axis."""
    v = np.where(grid.goal_mask, 0.0, values).reshape(grid.counts)
    return np.pad(v, [(0, w) for w in widths])


def contract(rows: FactoredRows, vpad: np.ndarray, ids: np.ndarray, widths) -> np.ndarray:
    """``sum_x' T(x'|row) V(x') + goal_mass`` for the rows selected by ``ids``."""
    n = len(widths)
    block = int(np.prod(widths))
    chunk = max(1, _GATHER_BUDGET // block)
    out = np.empty(len(ids))
    for s in range(0, len(ids), chunk):
        sel = ids[s:s + chunk]
        p = len(sel)
        index = []
        for d in range(n):
            shape = [p] + [1] * n
            shape[d + 1] = widths[d]
            index.append((rows.starts[sel, d][:, None] + np.arange(widths[d])).reshape(shape))
        t = vpad[tuple(index)]
        for d in range(n - 1, -1, -1):
            shape = [p] + [1] * d + [widths[d]]
            t = (t * rows.masses[d][sel].reshape(shape)).sum(axis=-1)
        out[s:s + chunk] = t + rows.goal_mass[sel]
    return out


# ---------------------------------------------------------------------------
# value iteration


def _initial_values(grid: GridAbstraction, spec: Specification) -> np.ndarray:
    t = spec.horizon
    values = np.zeros((grid.n_states, t + 1))
    if spec.kind is SpecKind.SAFETY:
        values[grid.free_mask, t] = 1.0
    values[grid.goal_mask, :] = 1.0
    values[grid.obstacle_mask, :] = 0.0
    return values


def _check_dims(sys: StochasticSystem, grid: GridAbstraction, spec: Specification):
    if sys.state_dim != grid.state_dim or sys.input_dim != grid.input_dim:
        raise ValueError("system and grid dimensions do not match")
    if grid.spec is not spec:
        grid.classify(spec)


TIE_BREAKS = ("first", "median")
TIE_TOL = 1e-12


def _select(q: np.ndarray, cand: np.ndarray, tie_break: str = "first"):
    """Maximizer per row among strictly positive Q values.

    ``"first"`` takes the lowest candidate index attaining the exact maximum.
    ``"median"`` takes the middle one (in candidate order) of those within
    ``TIE_TOL`` of the maximum.
    """
    rows = np.arange(len(q))
    if tie_break == "first":
        best = np.argmax(q, axis=1)
    elif tie_break == "median":
        tie = q >= q.max(axis=1, keepdims=True) - TIE_TOL
        rank = np.cumsum(tie, axis=1)
        target = (rank[:, -1:] + 1) // 2
        best = np.argmax(tie & (rank == target), axis=1)
    else:
        raise ValueError(f"tie_break must be one of {TIE_BREAKS}")
    vbest = q[rows, best]
    act = np.where(vbest > 0, cand[rows, best], NONE)
    return act, np.where(vbest > 0, vbest, 0.0)


def _q_matrix(buffer: TransitionBuffer, vpad, cells, cand, workers):
    ok = cand != NONE
    keys = buffer.key(np.broadcast_to(cells[:, None], cand.shape)[ok], cand[ok])
    ids = buffer.lookup(keys)
    rows = buffer.rows
    if workers > 1 and len(ids) > 1:
        chunk = -(-len(ids) // workers)
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda s: contract(rows, vpad, ids[s:s + chunk], buffer.widths),
                                  range(0, len(ids), chunk)))
        vals = np.concatenate(parts)
    else:
        vals = contract(rows, vpad, ids, buffer.widths)
    if not np.all(np.isfinite(vals)):
        raise NumericalError("non-finite Q value")
    q = np.full(cand.shape, -np.inf)
    q[ok] = vals
    return q


def _finish(grid, spec, actions, values, buffer, started, extra=None) -> ControllerTable:
    v_avg = float(values[:, 0].mean())
    stats = {"rows_computed": int(buffer.computed), "seconds": time.perf_counter() - started}
    stats.update(extra or {})
    return ControllerTable(actions, values, v_avg, spec.kind, spec.horizon, grid.digest(), stats)


def value_iteration(net: PolicyNetwork, sys: StochasticSystem, grid: GridAbstraction,
                    spec: Specification, cutoff: float, eta: float, local_steps: int,
                    workers: int = 1, tie_break: str = "first") -> ControllerTable:
    """Network-guided value iteration over local action sets."""
    _check_dims(sys, grid, spec)
    if tie_break not in TIE_BREAKS:
        raise ValueError(f"tie_break must be one of {TIE_BREAKS}")
    started = time.perf_counter()
    t_d = spec.horizon
    free = grid.free_cells
    values = _initial_values(grid, spec)
    actions = np.full((grid.n_states, t_d), NONE, dtype=np.int64)
    buffer = TransitionBuffer(grid, sys, cutoff)
    xs = grid.centers[free]
    for k in range(t_d - 1, -1, -1):
        centers = grid.snap_indices(net(xs, np.full(len(free), k)))
        cand = local_action_matrix(grid, centers, eta, local_steps)
        ok = cand != NONE
        buffer.ensure(buffer.key(np.broadcast_to(free[:, None], cand.shape)[ok], cand[ok]), workers)
        vpad = padded_values(grid, values[:, k + 1], buffer.widths)
        q = _q_matrix(buffer, vpad, free, cand, workers)
        act, v = _select(q, cand, tie_break)
        actions[free, k] = act
        values[free, k] = v
        log.debug("k=%d rows=%d", k, buffer.computed)
    return _finish(grid, spec, actions, values, buffer, started,
                   {"local_steps": local_steps, "eta": eta, "cutoff": cutoff,
                    "tie_break": tie_break})


def full_value_iteration(sys: StochasticSystem, grid: GridAbstraction, spec: Specification,
                         cutoff: float, workers: int = 1, tie_break: str = "first") -> ControllerTable:
    """Classical value iteration over the whole input lattice.

    The full transition structure is built once up front, then the backward
    recursion maximizes over every lattice input at every free cell.
    """
    _check_dims(sys, grid, spec)
    if tie_break not in TIE_BREAKS:
        raise ValueError(f"tie_break must be one of {TIE_BREAKS}")
    started = time.perf_counter()
    t_d = spec.horizon
    free = grid.free_cells
    values = _initial_values(grid, spec)
    actions = np.full((grid.n_states, t_d), NONE, dtype=np.int64)
    buffer = TransitionBuffer(grid, sys, cutoff)
    cand = np.broadcast_to(np.arange(grid.n_inputs), (len(free), grid.n_inputs))
    buffer.ensure(buffer.key(np.repeat(free, grid.n_inputs), cand.ravel()), workers)
    for k in range(t_d - 1, -1, -1):
        vpad = padded_values(grid, values[:, k + 1], buffer.widths)
        q = _q_matrix(buffer, vpad, free, cand, workers)
        act, v = _select(q, cand, tie_break)
        actions[free, k] = act
        values[free, k] = v
    return _finish(grid, spec, actions, values, buffer, started,
                   {"cutoff": cutoff, "tie_break": tie_break})


# ---------------------------------------------------------------------------
# outer loop


@dataclass
class IterationRecord:
    iteration: int
    v_avg: float
    epochs: int
    lifted_epochs: int
    rows_computed: int
    seconds: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def nnsynth_loop(expert: TrajectoryDataset, sys: StochasticSystem, grid: GridAbstraction,
                 spec: Specification, threshold: float, cutoff: float, eta: float,
                 local_steps: int, epochs: int, max_iter: int = 10, seed: int = 0,
                 lift_epochs: int | None = None, batch: int = 32, lr: float = 1e-3,
                 workers: int = 1, tie_break: str = "first"
                 ) -> tuple[ControllerTable, list[IterationRecord], PolicyNetwork]:
    """Train on expert data, synthesize, and while below ``threshold`` re-train
    a fresh network on the lifted controller then on the expert data.

    ``epochs`` is the expert-data training length per iteration; the logged
    ``epochs`` is its running total. ``lift_epochs`` (default ``epochs``) is the
    training length on lifted controller data.
    """
    if len(expert) == 0:
        raise ValueError("expert dataset is empty")
    if not 0 <= threshold <= 1:
        raise ValueError("threshold must lie in [0, 1]")
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    lift_epochs = epochs if lift_epochs is None else lift_epochs
    history: list[IterationRecord] = []

    def synth(net, it, total, lifted, t0):
        ctrl = value_iteration(net, sys, grid, spec, cutoff, eta, local_steps, workers, tie_break)
        history.append(IterationRecord(it, ctrl.v_avg, total, lifted, ctrl.stats["rows_computed"],
                                       time.perf_counter() - t0))
        log.info("iteration %d: v_avg=%.4f epochs=%d rows=%d", it, ctrl.v_avg, total,
                 ctrl.stats["rows_computed"])
        return ctrl

    t0 = time.perf_counter()
    net = nn_init(derive_seed(seed, 0, 0), sys.state_box, sys.input_box, spec.horizon)
    net, _ = imitation_learn(net, expert, epochs, batch, lr, derive_seed(seed, 0, 1))
    total, lifted = epochs, 0
    ctrl = synth(net, 1, total, lifted, t0)
    for it in range(1, max_iter):
        if ctrl.v_avg >= threshold:
            break
        t0 = time.perf_counter()
        net = nn_init(derive_seed(seed, it, 0), sys.state_box, sys.input_box, spec.horizon)
        data = controller_to_dataset(ctrl, grid)
        net, _ = imitation_learn(net, data, lift_epochs, batch, lr, derive_seed(seed, it, 1))
        net, _ = imitation_learn(net, expert, epochs, batch, lr, derive_seed(seed, it, 2))
        total += epochs
        lifted += lift_epochs
        ctrl = synth(net, it + 1, total, lifted, t0)
    ctrl.stats["iterations"] = len(history)
    return ctrl, history, net
