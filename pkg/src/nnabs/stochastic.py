"""Stochastic system model, GP model-error and Gaussian box integrals.

The one-step kernel of a system is Gaussian with diagonal covariance, so the
mass it assigns to an axis-aligned box is an exact product of univariate
normal CDF differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError
from scipy.special import ndtr


class ModelEvaluationError(ValueError):
    """The nominal map or model-error produced a non-finite value."""


class HyperparameterError(ValueError):
    """GP hyperparameters are invalid or the Gram matrix cannot be factored."""


class Box:
    """Axis-aligned hyper-rectangle ``[lower, upper]`` (bounds may be infinite)."""

    __slots__ = ("lower", "upper")

    def __init__(self, lower, upper):
        lower = np.atleast_1d(np.asarray(lower, dtype=float))
        upper = np.atleast_1d(np.asarray(upper, dtype=float))
        if lower.shape != upper.shape or lower.ndim != 1:
            raise ValueError("box bounds must be 1-d arrays of equal length")
        self.lower = lower
        self.upper = upper

    @classmethod
    def everything(cls, dim: int) -> "Box":
        return cls(np.full(dim, -np.inf), np.full(dim, np.inf))

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    @property
    def widths(self) -> np.ndarray:
        return self.upper - self.lower

    def is_degenerate(self) -> bool:
        return bool(np.any(self.upper <= self.lower))

    def contains(self, x) -> np.ndarray:
        """Closed-box membership, vectorized over leading axes of ``x``."""
        x = np.asarray(x, dtype=float)
        return np.all((x >= self.lower) & (x <= self.upper), axis=-1)

    def contains_box(self, other: "Box") -> bool:
        return bool(np.all(other.lower >= self.lower) and np.all(other.upper <= self.upper))

    def intersects(self, other: "Box") -> bool:
        return bool(np.all(np.maximum(self.lower, other.lower) < np.minimum(self.upper, other.upper)))

    def shifted(self, offset) -> "Box":
        offset = np.asarray(offset, dtype=float)
        return Box(self.lower + offset, self.upper + offset)

    def to_list(self) -> list[list[float]]:
        return [self.lower.tolist(), self.upper.tolist()]

    def __eq__(self, other):
        return (isinstance(other, Box) and np.array_equal(self.lower, other.lower)
                and np.array_equal(self.upper, other.upper))

    def __repr__(self):
        return f"Box({self.lower.tolist()}, {self.upper.tolist()})"


def interval_mass(lo_z, hi_z) -> np.ndarray:
    """Standard-normal mass of ``[lo_z, hi_z]``, accurate in both tails."""
    lo_z = np.asarray(lo_z, dtype=float)
    hi_z = np.asarray(hi_z, dtype=float)
    upper_tail = lo_z > 0
    return np.where(upper_tail, ndtr(-lo_z) - ndtr(-hi_z), ndtr(hi_z) - ndtr(lo_z))


def axis_masses(mean, std, lower, upper) -> np.ndarray:
    """Per-axis mass of ``N(mean, std**2)`` on ``[lower, upper)``.

    Broadcasts over all arguments. Where ``std == 0`` the mass is the indicator
    ``lower <= mean < upper`` (``upper = +inf`` included).
    """
    mean, std, lower, upper = np.broadcast_arrays(
        np.asarray(mean, dtype=float), np.asarray(std, dtype=float),
        np.asarray(lower, dtype=float), np.asarray(upper, dtype=float))
    det = std == 0
    safe = np.where(det, 1.0, std)
    with np.errstate(invalid="ignore"):
        mass = interval_mass((lower - mean) / safe, (upper - mean) / safe)
    indicator = ((mean >= lower) & ((mean < upper) | np.isposinf(upper))).astype(float)
    mass = np.where(det, indicator, mass)
    return np.where(upper > lower, mass, 0.0)


# ---------------------------------------------------------------------------
# Gaussian process model-error


@dataclass(frozen=True)
class GPHyperparams:
    signal_variance: float
    length_scales: tuple[float, ...]
    noise_variance: float

    def validate(self, input_dim: int) -> None:
        if self.signal_variance <= 0:
            raise HyperparameterError("signal variance must be > 0")
        if self.noise_variance <= 0:
            raise HyperparameterError("observation-noise variance must be > 0")
        if len(self.length_scales) != input_dim:
            raise HyperparameterError(
                f"expected {input_dim} length-scales, got {len(self.length_scales)}")
        if any(l <= 0 for l in self.length_scales):
            raise HyperparameterError("length-scales must be > 0")


def _se_kernel(a: np.ndarray, b: np.ndarray, hp: GPHyperparams) -> np.ndarray:
    ls = np.asarray(hp.length_scales, dtype=float)
    d = (a[:, None, :] - b[None, :, :]) / ls
    return hp.signal_variance * np.exp(-0.5 * np.sum(d * d, axis=-1))


class _OutputGP:
    """Exact GP regressor for one output dimension."""

    JITTERS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)

    def __init__(self, inputs: np.ndarray, targets: np.ndarray, hp: GPHyperparams):
        self.inputs = inputs
        self.targets = targets
        self.hp = hp
        gram = _se_kernel(inputs, inputs, hp) + hp.noise_variance * np.eye(len(inputs))
        for jitter in self.JITTERS:
            try:
                self.chol = cho_factor(gram + jitter * np.eye(len(inputs)), lower=True)
                break
            except LinAlgError:
                continue
        else:
            raise HyperparameterError("Gram matrix is not positive definite after jitter escalation")
        self.alpha = cho_solve(self.chol, targets)

    def predict(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ks = _se_kernel(z, self.inputs, self.hp)
        mean = ks @ self.alpha
        v = cho_solve(self.chol, ks.T)
        var = self.hp.signal_variance - np.sum(ks * v.T, axis=-1)
        return mean, np.maximum(var, 0.0)


class ModelErrorGP:
    """Independent per-output GPs over the joint (state, input) space.

    An instance with no training data is the zero model: mean and variance
    are identically zero.
    """

    def __init__(self, state_dim: int, input_dim: int, outputs: Sequence[_OutputGP | None] | None = None):
        self.state_dim = state_dim
        self.input_dim = input_dim
        self.outputs = list(outputs) if outputs is not None else [None] * state_dim

    @classmethod
    def zero(cls, state_dim: int, input_dim: int) -> "ModelErrorGP":
        return cls(state_dim, input_dim)

    @property
    def is_zero(self) -> bool:
        return all(gp is None for gp in self.outputs)

    def variance_bound(self) -> np.ndarray:
        """Per-output upper bound on the posterior variance (the prior variance)."""
        return np.array([0.0 if gp is None else gp.hp.signal_variance for gp in self.outputs])

    def predict(self, x, u) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and variance, vectorized over leading axes."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        lead = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
        mean = np.zeros(lead + (self.state_dim,))
        var = np.zeros(lead + (self.state_dim,))
        if self.is_zero:
            return mean, var
        z = np.concatenate([np.broadcast_to(x, lead + x.shape[-1:]),
                            np.broadcast_to(u, lead + u.shape[-1:])], axis=-1)
        flat = z.reshape(-1, z.shape[-1])
        for d, gp in enumerate(self.outputs):
            if gp is None:
                continue
            m, v = gp.predict(flat)
            mean[..., d] = m.reshape(lead)
            var[..., d] = v.reshape(lead)
        return mean, var


def gp_fit(samples, hyperparams: GPHyperparams | Sequence[GPHyperparams],
           state_dim: int | None = None, input_dim: int | None = None) -> ModelErrorGP:
    """Fit independent per-output GPs to model-error residuals.

    Args:
        samples: iterable of ``((x, u), residual)`` with ``residual`` of length n.
        hyperparams: one set shared by all outputs, or one per output.
        state_dim, input_dim: required only when ``samples`` is empty.
    """
    samples = list(samples)
    if not samples:
        if state_dim is None or input_dim is None:
            raise ValueError("dimensions are required to build the zero model")
        return ModelErrorGP.zero(state_dim, input_dim)
    xs = np.array([np.atleast_1d(np.asarray(xu[0], dtype=float)) for xu, _ in samples])
    us = np.array([np.atleast_1d(np.asarray(xu[1], dtype=float)) for xu, _ in samples])
    ys = np.array([np.atleast_1d(np.asarray(r, dtype=float)) for _, r in samples])
    n, m = xs.shape[1], us.shape[1]
    if ys.shape[1] != n:
        raise ValueError("residuals must have one entry per state dimension")
    if isinstance(hyperparams, GPHyperparams):
        hyperparams = [hyperparams] * n
    if len(hyperparams) != n:
        raise HyperparameterError("need one hyperparameter set per output dimension")
    z = np.concatenate([xs, us], axis=1)
    outputs = []
    for d, hp in enumerate(hyperparams):
        hp.validate(n + m)
        outputs.append(_OutputGP(z, ys[:, d], hp))
    return ModelErrorGP(n, m, outputs)


# ---------------------------------------------------------------------------
# System and kernel


@dataclass(frozen=True)
class GaussianKernel:
    """Diagonal Gaussian over the next state."""

    mean: np.ndarray
    variance: np.ndarray

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.variance)


@dataclass(frozen=True, eq=False)
class StochasticSystem:
    """``x' = f(x, u) + g(x, u) + w`` with ``g ~ GP`` and ``w ~ N(0, diag(noise_cov))``.

    ``nominal`` must accept batched arrays ``x[..., n]``, ``u[..., m]`` and
    return ``[..., n]``.
    """

    state_box: Box
    input_box: Box
    nominal: Callable[[np.ndarray, np.ndarray], np.ndarray]
    noise_cov: np.ndarray
    model_error: ModelErrorGP | None = None
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        noise = np.atleast_1d(np.asarray(self.noise_cov, dtype=float))
        object.__setattr__(self, "noise_cov", noise)
        if self.state_box.is_degenerate() or self.input_box.is_degenerate():
            raise ValueError("state and input boxes must be non-degenerate")
        if noise.shape != (self.state_dim,):
            raise ValueError("noise_cov must have one entry per state dimension")
        if np.any(noise < 0):
            raise ValueError("noise_cov entries must be >= 0")
        if self.model_error is None:
            object.__setattr__(self, "model_error", ModelErrorGP.zero(self.state_dim, self.input_dim))

    @property
    def state_dim(self) -> int:
        return self.state_box.dim

    @property
    def input_dim(self) -> int:
        return self.input_box.dim

    def variance_bound(self) -> np.ndarray:
        return self.noise_cov + self.model_error.variance_bound()

    def kernel_params(self, x, u) -> tuple[np.ndarray, np.ndarray]:
        """Batched kernel mean and variance for arrays ``x[..., n]``, ``u[..., m]``."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        mean = np.asarray(self.nominal(x, u), dtype=float)
        if not np.all(np.isfinite(mean)):
            raise ModelEvaluationError("nominal dynamics returned a non-finite value")
        gm, gv = self.model_error.predict(x, u)
        return mean + gm, self.noise_cov + gv

    def sample_next(self, x, u, rng: np.random.Generator) -> np.ndarray:
        mean, var = self.kernel_params(x, u)
        return mean + np.sqrt(var) * rng.standard_normal(mean.shape)


def kernel_at(sys: StochasticSystem, x, u) -> GaussianKernel:
    """The one-step Gaussian kernel of ``sys`` at a single ``(x, u)``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if x.shape != (sys.state_dim,) or u.shape != (sys.input_dim,):
        raise ValueError("state/input dimension mismatch")
    mean, var = sys.kernel_params(x[None], u[None])
    return GaussianKernel(mean[0], var[0])


def box_mass(kernel: GaussianKernel, box: Box) -> float:
    """Probability the kernel assigns to ``box``."""
    if box.dim != kernel.mean.shape[0]:
        raise ValueError("box dimension does not match kernel")
    return float(np.prod(axis_masses(kernel.mean, kernel.std, box.lower, box.upper)))
