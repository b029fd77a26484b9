"""Small MLP policy trained by imitation learning with Adam.

The network maps ``(state, k / horizon)`` to an input vector. States are
normalized to ``[-1, 1]`` from the state box and the output is a ``tanh``
squashed onto the input box, so every prediction is feasible.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .stochastic import Box

HIDDEN = (10, 10)
MAGIC = b"NNW1"


class TrainingDivergence(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"training loss became non-finite at epoch {epoch}")
        self.epoch = epoch


# ---------------------------------------------------------------------------
# datasets


@dataclass
class TrajectoryDataset:
    """Labeled ``(state, step, input)`` samples grouped by trajectory id."""

    traj_id: np.ndarray
    k: np.ndarray
    x: np.ndarray
    u: np.ndarray
    provenance: str = "expert"

    def __post_init__(self):
        self.traj_id = np.asarray(self.traj_id, dtype=np.int64).reshape(-1)
        self.k = np.asarray(self.k, dtype=np.int64).reshape(-1)
        self.x = np.asarray(self.x, dtype=float)
        self.u = np.asarray(self.u, dtype=float)
        if self.x.ndim != 2:
            self.x = self.x.reshape(len(self.k), -1)
        if self.u.ndim != 2:
            self.u = self.u.reshape(len(self.k), -1)
        if not (len(self.traj_id) == len(self.k) == len(self.x) == len(self.u)):
            raise ValueError("dataset columns have different lengths")

    def __len__(self):
        return len(self.k)

    @property
    def n_trajectories(self) -> int:
        return len(np.unique(self.traj_id))

    def trajectories(self) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
        for t in np.unique(self.traj_id):
            sel = self.traj_id == t
            yield self.k[sel], self.x[sel], self.u[sel]

    def validate(self, input_box: Box, horizon: int) -> None:
        tol = 1e-9
        if np.any(self.u < input_box.lower - tol) or np.any(self.u > input_box.upper + tol):
            raise ValueError("dataset inputs must lie inside the input box")
        if np.any(self.k < 0) or np.any(self.k >= horizon):
            raise ValueError("dataset steps must lie in [0, horizon)")

    @classmethod
    def concat(cls, parts: list["TrajectoryDataset"], provenance: str | None = None) -> "TrajectoryDataset":
        offset = 0
        ids = []
        for p in parts:
            ids.append(p.traj_id + offset)
            offset += int(p.traj_id.max()) + 1 if len(p) else 0
        return cls(np.concatenate(ids), np.concatenate([p.k for p in parts]),
                   np.concatenate([p.x for p in parts]), np.concatenate([p.u for p in parts]),
                   provenance or parts[0].provenance)

    def to_csv(self, path) -> None:
        n, m = self.x.shape[1], self.u.shape[1]
        header = ["traj_id", "k"] + [f"x_{i + 1}" for i in range(n)] + [f"u_{i + 1}" for i in range(m)]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for t, k, x, u in zip(self.traj_id, self.k, self.x, self.u):
                w.writerow([int(t), int(k)] + [repr(float(v)) for v in x] + [repr(float(v)) for v in u])

    @classmethod
    def from_csv(cls, path, provenance: str = "expert") -> "TrajectoryDataset":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise ValueError(f"{path}: empty dataset file") from None
            xcols = [i for i, h in enumerate(header) if h.startswith("x_")]
            ucols = [i for i, h in enumerate(header) if h.startswith("u_")]
            if header[:2] != ["traj_id", "k"] or not xcols or not ucols:
                raise ValueError(f"{path}: header must be traj_id,k,x_1..x_n,u_1..u_m")
            rows = [r for r in reader if r]
        if not rows:
            raise ValueError(f"{path}: dataset has no rows")
        try:
            data = np.array([[float(v) for v in r] for r in rows])
        except ValueError as exc:
            raise ValueError(f"{path}: {exc}") from None
        if data.shape[1] != len(header):
            raise ValueError(f"{path}: ragged rows")
        return cls(data[:, 0].astype(np.int64), data[:, 1].astype(np.int64),
                   data[:, xcols], data[:, ucols], provenance)


# ---------------------------------------------------------------------------
# network


@dataclass
class PolicyNetwork:
    state_box: Box
    input_box: Box
    horizon: int
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    seed: int = 0
    epochs: int = 0
    activation: str = "relu"
    meta: dict = field(default_factory=dict)

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def copy(self) -> "PolicyNetwork":
        return PolicyNetwork(self.state_box, self.input_box, self.horizon,
                             [w.copy() for w in self.weights], [b.copy() for b in self.biases],
                             self.seed, self.epochs, self.activation, dict(self.meta))

    def features(self, x, k) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        k = np.asarray(k, dtype=float)
        lo, hi = self.state_box.lower, self.state_box.upper
        xs = 2 * (x - lo) / (hi - lo) - 1
        ks = np.broadcast_to(k / self.horizon, xs.shape[:-1])[..., None]
        return np.concatenate([xs, ks], axis=-1)

    def _forward(self, z):
        acts = [z]
        pre = []
        h = z
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            a = h @ w + b
            pre.append(a)
            h = np.maximum(a, 0.0) if i < len(self.weights) - 1 else np.tanh(a)
            acts.append(h)
        return pre, acts

    def _squash(self, t):
        c = (self.input_box.lower + self.input_box.upper) / 2
        r = (self.input_box.upper - self.input_box.lower) / 2
        return np.clip(c + r * t, self.input_box.lower, self.input_box.upper)

    def __call__(self, x, k) -> np.ndarray:
        """Continuous input for states ``x[..., n]`` at steps ``k``."""
        _, acts = self._forward(self.features(x, k))
        return self._squash(acts[-1])

    def loss_and_grads(self, z, target):
        """Mean squared error and its gradients w.r.t. all weights and biases."""
        pre, acts = self._forward(z)
        r = (self.input_box.upper - self.input_box.lower) / 2
        c = (self.input_box.lower + self.input_box.upper) / 2
        out = c + r * acts[-1]
        diff = out - target
        loss = float(np.mean(diff * diff))
        delta = (2.0 / diff.size) * diff * r * (1 - acts[-1] ** 2)
        gw = [None] * len(self.weights)
        gb = [None] * len(self.weights)
        for i in range(len(self.weights) - 1, -1, -1):
            gw[i] = acts[i].T @ delta
            gb[i] = delta.sum(axis=0)
            if i:
                delta = (delta @ self.weights[i].T) * (pre[i - 1] > 0)
        return loss, gw, gb

    def mse(self, data: TrajectoryDataset) -> float:
        out = self(data.x, data.k)
        return float(np.mean((out - data.u) ** 2))

    # -- persistence --------------------------------------------------------

    def save(self, path) -> None:
        """Write weights (little-endian binary) and a JSON metadata sidecar.

        Layout: ``b"NNW1"``, ``uint32`` layer count L, ``L`` ``uint32`` sizes,
        then per layer the ``float64`` weight matrix (``in x out``, row-major)
        followed by its bias vector.
        """
        path = Path(path)
        sizes = self.sizes
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack(f"<I{len(sizes)}I", len(sizes), *sizes))
            for w, b in zip(self.weights, self.biases):
                fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
                fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
        meta = {
            "sizes": sizes, "activation": self.activation, "output": "tanh-box",
            "state_box": self.state_box.to_list(), "input_box": self.input_box.to_list(),
            "horizon": self.horizon, "seed": self.seed, "epochs": self.epochs, **self.meta,
        }
        Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "PolicyNetwork":
        path = Path(path)
        meta = json.loads(Path(str(path) + ".json").read_text())
        raw = path.read_bytes()
        if raw[:4] != MAGIC:
            raise ValueError(f"{path}: not a weights file")
        (count,) = struct.unpack_from("<I", raw, 4)
        sizes = struct.unpack_from(f"<{count}I", raw, 8)
        off = 8 + 4 * count
        weights, biases = [], []
        for a, b in zip(sizes[:-1], sizes[1:]):
            w = np.frombuffer(raw, "<f8", a * b, off).reshape(a, b).astype(float)
            off += 8 * a * b
            bias = np.frombuffer(raw, "<f8", b, off).astype(float)
            off += 8 * b
            weights.append(w)
            biases.append(bias)
        extra = {k: v for k, v in meta.items() if k not in
                 ("sizes", "activation", "output", "state_box", "input_box", "horizon", "seed", "epochs")}
        return cls(Box(*meta["state_box"]), Box(*meta["input_box"]), meta["horizon"],
                   weights, biases, meta["seed"], meta["epochs"], meta["activation"], extra)


def nn_init(seed: int, state_box: Box, input_box: Box, horizon: int,
            hidden: tuple[int, ...] = HIDDEN) -> PolicyNetwork:
    """Glorot-uniform weights and zero biases drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    sizes = [state_box.dim + 1, *hidden, input_box.dim]
    weights = []
    for a, b in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (a + b))
        weights.append(rng.uniform(-limit, limit, size=(a, b)))
    biases = [np.zeros(b) for b in sizes[1:]]
    return PolicyNetwork(state_box, input_box, horizon, weights, biases, seed=seed)


class _Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def imitation_learn(net: PolicyNetwork, data: TrajectoryDataset, epochs: int = 300,
                    batch: int = 32, lr: float = 1e-3, seed: int = 0,
                    history: list | None = None) -> tuple[PolicyNetwork, float]:
    """Mini-batch Adam on the mean squared imitation error.

    Returns a trained copy of ``net`` and its final training MSE. Per-epoch
    mean batch losses are appended to ``history`` when given.
    """
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    net = net.copy()
    rng = np.random.default_rng(seed)
    z = net.features(data.x, data.k)
    y = data.u
    params = net.weights + net.biases
    opt = _Adam(params, lr=lr)
    nl = len(net.weights)
    with np.errstate(over="ignore", invalid="ignore"):
        _train(net, z, y, params, opt, epochs, batch, rng, history)
    net.weights, net.biases = params[:nl], params[nl:]
    net.epochs += epochs
    with np.errstate(over="ignore", invalid="ignore"):
        final = net.mse(data)
    if not np.isfinite(final):
        raise TrainingDivergence(epochs)
    return net, final


def _train(net, z, y, params, opt, epochs, batch, rng, history):
    for epoch in range(epochs):
        order = rng.permutation(len(z))
        total = 0.0
        for s in range(0, len(z), batch):
            idx = order[s:s + batch]
            loss, gw, gb = net.loss_and_grads(z[idx], y[idx])
            if not np.isfinite(loss):
                raise TrainingDivergence(epoch)
            opt.step(params, gw + gb)
            total += loss * len(idx)
        if history is not None:
            history.append(total / len(z))


def gradient_check(net: PolicyNetwork, sample, h: float = 1e-5) -> float:
    """Max relative error between backprop and central finite differences.

    ``sample`` is ``(x, k, u)`` for one point or a batch. The relative error of
    each parameter is ``|a - b| / max(|a|, |b|, 1e-6)``.
    """
    x, k, u = sample
    x = np.atleast_2d(np.asarray(x, dtype=float))
    u = np.atleast_2d(np.asarray(u, dtype=float))
    k = np.broadcast_to(np.asarray(k, dtype=float), (x.shape[0],))
    z = net.features(x, k)
    net = net.copy()
    _, gw, gb = net.loss_and_grads(z, u)
    worst = 0.0
    for params, grads in ((net.weights, gw), (net.biases, gb)):
        for p, g in zip(params, grads):
            it = np.nditer(p, flags=["multi_index"])
            for _ in it:
                i = it.multi_index
                old = p[i]
                p[i] = old + h
                lp = net.loss_and_grads(z, u)[0]
                p[i] = old - h
                lm = net.loss_and_grads(z, u)[0]
                p[i] = old
                fd = (lp - lm) / (2 * h)
                err = abs(fd - g[i]) / max(abs(fd), abs(g[i]), 1e-6)
                worst = max(worst, err)
    return worst


def controller_to_dataset(ctrl, grid) -> TrajectoryDataset:
    """One labeled pair per free cell and step where the controller acts."""
    actions = ctrl.actions
    cells, ks = np.nonzero(actions >= 0)
    if len(cells) == 0:
        raise ValueError("controller has no actions to lift")
    order = np.lexsort((ks, cells))
    cells, ks = cells[order], ks[order]
    return TrajectoryDataset(cells, ks, grid.centers[cells], grid.inputs[actions[cells, ks]],
                             provenance="lifted")
