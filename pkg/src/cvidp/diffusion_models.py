"""Diffusion-process priors: drifts, Euler-Maruyama simulation, discretization.

Every drift is time-homogeneous; the ``t`` argument is accepted for interface
uniformity. Drifts act on arrays of shape ``(..., d)``. Each drift carries a
compiled ``kernel(x, theta)`` over ``(K, d)`` arrays, which :meth:`eval`
wraps and which the particle methods call from compiled code.

Random numbers come from ``numpy.random.Generator(PCG64(seed))``.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Callable

import numpy as np
from numba import njit

from .errors import ConfigError, ParameterError
from .lgssm_core import DriftParamsLGSSM, TimeGrid

SQRT_EPS = 1e-12


def make_rng(seed: int) -> np.random.Generator:
    """The package-wide generator: PCG64 seeded with ``seed``."""
    return np.random.Generator(np.random.PCG64(seed))


# --------------------------------------------------------------------------
# Compiled drift kernels, x: (K, d), theta: (p,)
# --------------------------------------------------------------------------


@njit(cache=True)
def _ou_kernel(x, theta):
    return -theta[0] * x


@njit(cache=True)
def _benes_kernel(x, theta):
    return theta[0] * np.tanh(x)


@njit(cache=True)
def _double_well_kernel(x, theta):
    return theta[0] * x * (theta[1] - x * x)


@njit(cache=True)
def _sine_kernel(x, theta):
    return theta[0] * np.sin(x - theta[1])


@njit(cache=True)
def _sqrt_kernel(x, theta):
    return np.sqrt(theta[0] * np.sqrt(x * x + SQRT_EPS))


@njit(cache=True)
def _van_der_pol_kernel(x, theta):
    out = np.empty_like(x)
    for k in range(x.shape[0]):
        x1 = x[k, 0]
        x2 = x[k, 1]
        out[k, 0] = theta[0] * (theta[1] * x1 - x1 * x1 * x1 / 3.0 - x2)
        out[k, 1] = theta[0] * x1 / theta[1]
    return out


@njit(cache=True)
def _mlp_kernel(x, theta):
    K, d = x.shape
    H = (theta.shape[0] - d) // (2 * d + 1)
    W1 = theta[: H * d].reshape(H, d)
    b1 = theta[H * d : H * d + H]
    W2 = theta[H * d + H : H * d + H + d * H].reshape(d, H)
    b2 = theta[H * d + H + d * H :]
    out = np.empty_like(x)
    for k in range(K):
        for i in range(d):
            out[k, i] = b2[i]
        for j in range(H):
            a = b1[j]
            for i in range(d):
                a += W1[j, i] * x[k, i]
            if a > 0.0:
                for i in range(d):
                    out[k, i] += W2[i, j] * a
    return out


# --------------------------------------------------------------------------
# Drift classes
# --------------------------------------------------------------------------


class DriftFunction(ABC):
    """A drift f(x, t; theta) with state Jacobian and parameter gradient."""

    name: str = ""
    param_names: tuple[str, ...] = ()
    kernel: Callable = None  # compiled (K, d) -> (K, d) map

    def __init__(self, theta, dim: int = 1):
        self.theta = np.array(theta, dtype=float).reshape(-1)
        self.dim = int(dim)
        if self.param_names and self.theta.size != len(self.param_names):
            raise ParameterError(
                f"{self.name} expects {len(self.param_names)} parameters, got {self.theta.size}"
            )

    def __repr__(self) -> str:
        return f"{type(self).__name__}(theta={self.theta.tolist()}, dim={self.dim})"

    def with_params(self, theta) -> "DriftFunction":
        return type(self)(theta, self.dim)

    def eval(self, x, t: float = 0.0) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        flat = np.ascontiguousarray(x.reshape(-1, self.dim))
        return type(self).kernel(flat, self.theta).reshape(x.shape)

    @abstractmethod
    def jacobian(self, x, t: float = 0.0) -> np.ndarray:
        """State Jacobian with shape (..., d, d)."""

    @abstractmethod
    def eval_dtheta(self, x, t: float = 0.0) -> np.ndarray:
        """Parameter gradient with shape (..., d, p)."""

    def linear_coefficients(self) -> tuple[np.ndarray, np.ndarray] | None:
        """(A, b) if the drift is affine in x, else None."""
        return None


class _ScalarElementwise(DriftFunction):
    """Drifts acting elementwise on each coordinate through a scalar map."""

    @abstractmethod
    def _dfdx(self, x: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def _dfdtheta(self, x: np.ndarray) -> np.ndarray:
        """Elementwise gradients stacked on a trailing parameter axis."""

    def jacobian(self, x, t=0.0):
        x = np.asarray(x, dtype=float)
        return self._dfdx(x)[..., None] * np.eye(self.dim)

    def eval_dtheta(self, x, t=0.0):
        return self._dfdtheta(np.asarray(x, dtype=float))


class OUDrift(_ScalarElementwise):
    """Ornstein-Uhlenbeck mean reversion, f(x) = -theta x."""

    name = "ou"
    param_names = ("theta",)
    kernel = _ou_kernel

    def _dfdx(self, x):
        return np.full_like(x, -self.theta[0])

    def _dfdtheta(self, x):
        return (-x)[..., None]

    def linear_coefficients(self):
        return -self.theta[0] * np.eye(self.dim), np.zeros(self.dim)


class BenesDrift(_ScalarElementwise):
    name = "benes"
    param_names = ("theta",)
    kernel = _benes_kernel

    def _dfdx(self, x):
        return self.theta[0] * (1.0 - np.tanh(x) ** 2)

    def _dfdtheta(self, x):
        return np.tanh(x)[..., None]


class DoubleWellDrift(_ScalarElementwise):
    """f(x) = theta0 x (theta1 - x^2); stable wells at +/- sqrt(theta1)."""

    name = "double_well"
    param_names = ("theta0", "theta1")
    kernel = _double_well_kernel

    def _dfdx(self, x):
        return self.theta[0] * (self.theta[1] - 3.0 * x**2)

    def _dfdtheta(self, x):
        return np.stack([x * (self.theta[1] - x**2), self.theta[0] * x], axis=-1)


class SineDrift(_ScalarElementwise):
    name = "sine"
    param_names = ("theta0", "theta1")
    kernel = _sine_kernel

    def _dfdx(self, x):
        return self.theta[0] * np.cos(x - self.theta[1])

    def _dfdtheta(self, x):
        return np.stack([np.sin(x - self.theta[1]), -self.theta[0] * np.cos(x - self.theta[1])], axis=-1)


class SqrtDrift(_ScalarElementwise):
    """f(x) = sqrt(theta |x|) with |x| smoothed as sqrt(x^2 + 1e-12)."""

    name = "sqrt"
    param_names = ("theta",)
    kernel = _sqrt_kernel

    def _dfdx(self, x):
        a = np.sqrt(x * x + SQRT_EPS)
        return self.theta[0] * (x / a) / (2.0 * np.sqrt(self.theta[0] * a))

    def _dfdtheta(self, x):
        a = np.sqrt(x * x + SQRT_EPS)
        return (a / (2.0 * np.sqrt(self.theta[0] * a)))[..., None]


class VanDerPolDrift(DriftFunction):
    """Two-dimensional stochastic van der Pol oscillator drift (cubic damping)."""

    name = "van_der_pol"
    param_names = ("theta0", "theta1")
    kernel = _van_der_pol_kernel

    def __init__(self, theta, dim: int = 2):
        if dim != 2:
            raise ParameterError("van der Pol drift is two-dimensional")
        super().__init__(theta, 2)

    def jacobian(self, x, t=0.0):
        x = np.asarray(x, dtype=float)
        t0, t1 = self.theta
        J = np.zeros(x.shape + (2,))
        J[..., 0, 0] = t0 * (t1 - x[..., 0] ** 2)
        J[..., 0, 1] = -t0
        J[..., 1, 0] = t0 / t1
        return J

    def eval_dtheta(self, x, t=0.0):
        x = np.asarray(x, dtype=float)
        t0, t1 = self.theta
        x1, x2 = x[..., 0], x[..., 1]
        G = np.zeros(x.shape + (2,))
        G[..., 0, 0] = t1 * x1 - x1**3 / 3.0 - x2
        G[..., 0, 1] = t0 * x1
        G[..., 1, 0] = x1 / t1
        G[..., 1, 1] = -t0 * x1 / t1**2
        return G


class MLPDrift(DriftFunction):
    """One hidden layer of ReLU units: f(x) = W2 relu(W1 x + b1) + b2.

    ``theta`` packs ``W1`` (H x d), ``b1`` (H), ``W2`` (d x H), ``b2`` (d) in
    that order, row-major.
    """

    name = "mlp"
    kernel = _mlp_kernel

    def __init__(self, theta, dim: int = 1, hidden: int = 3):
        theta = np.asarray(theta, dtype=float).reshape(-1)
        expected = hidden * (2 * dim + 1) + dim
        if theta.size != expected:
            raise ParameterError(f"mlp with dim={dim}, hidden={hidden} needs {expected} parameters")
        self.hidden = hidden
        self.param_names = tuple(
            [f"W1[{j},{i}]" for j in range(hidden) for i in range(dim)]
            + [f"b1[{j}]" for j in range(hidden)]
            + [f"W2[{i},{j}]" for i in range(dim) for j in range(hidden)]
            + [f"b2[{i}]" for i in range(dim)]
        )
        super().__init__(theta, dim)

    @classmethod
    def random(cls, dim: int = 1, hidden: int = 3, seed: int = 0, scale: float = 0.5) -> "MLPDrift":
        rng = make_rng(seed)
        return cls(scale * rng.standard_normal(hidden * (2 * dim + 1) + dim), dim, hidden)

    def with_params(self, theta):
        return MLPDrift(theta, self.dim, self.hidden)

    def _unpack(self):
        H, d, th = self.hidden, self.dim, self.theta
        W1 = th[: H * d].reshape(H, d)
        b1 = th[H * d : H * d + H]
        W2 = th[H * d + H : H * d + H + d * H].reshape(d, H)
        return W1, b1, W2

    def jacobian(self, x, t=0.0):
        x = np.asarray(x, dtype=float)
        W1, b1, W2 = self._unpack()
        active = (x @ W1.T + b1 > 0.0).astype(float)  # (..., H)
        return np.einsum("ij,...j,jk->...ik", W2, active, W1)

    def eval_dtheta(self, x, t=0.0):
        x = np.asarray(x, dtype=float)
        W1, b1, W2 = self._unpack()
        H, d = self.hidden, self.dim
        pre = x @ W1.T + b1
        active = (pre > 0.0).astype(float)
        relu = pre * active
        eye = np.eye(d)
        # f_k depends on W1[j, i] via W2[k, j] * active_j * x_i
        g_W1 = np.einsum("kj,...j,...i->...kji", W2, active, x).reshape(x.shape[:-1] + (d, H * d))
        g_b1 = W2 * active[..., None, :]
        g_W2 = np.einsum("kl,...j->...klj", eye, relu).reshape(x.shape[:-1] + (d, d * H))
        g_b2 = np.broadcast_to(eye, x.shape[:-1] + (d, d))
        return np.concatenate([g_W1, g_b1, g_W2, g_b2], axis=-1)


DRIFT_REGISTRY: dict[str, type[DriftFunction]] = {
    cls.name: cls
    for cls in (OUDrift, BenesDrift, DoubleWellDrift, SineDrift, SqrtDrift, VanDerPolDrift, MLPDrift)
}


def make_drift(name: str, theta=None, dim: int | None = None, seed: int = 0) -> DriftFunction:
    """Construct a registered drift by name."""
    if name not in DRIFT_REGISTRY:
        raise ConfigError(f"unknown drift {name!r}; known: {sorted(DRIFT_REGISTRY)}", field="drift")
    cls = DRIFT_REGISTRY[name]
    if cls is VanDerPolDrift:
        return VanDerPolDrift(theta)
    if cls is MLPDrift:
        dim = dim or 1
        return MLPDrift.random(dim, seed=seed) if theta is None else MLPDrift(theta, dim)
    return cls(theta, dim or 1)


# --------------------------------------------------------------------------
# Processes
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DiffusionProcess:
    """dx = f(x) dt + dB with Cov(dB) = Qc dt and x_0 ~ N(m0, S0).

    ``S0`` may be all zeros to denote a point mass, which is only meaningful
    for simulation.
    """

    drift: DriftFunction
    Qc: np.ndarray
    m0: np.ndarray
    S0: np.ndarray

    def __post_init__(self):
        d = self.drift.dim
        object.__setattr__(self, "Qc", np.atleast_2d(np.asarray(self.Qc, dtype=float)).reshape(d, d))
        object.__setattr__(self, "m0", np.asarray(self.m0, dtype=float).reshape(d))
        object.__setattr__(self, "S0", np.atleast_2d(np.asarray(self.S0, dtype=float)).reshape(d, d))

    @property
    def dim(self) -> int:
        return self.drift.dim

    def with_drift(self, drift: DriftFunction) -> "DiffusionProcess":
        return DiffusionProcess(drift, self.Qc, self.m0, self.S0)

    def validate(self) -> "DiffusionProcess":
        try:
            np.linalg.cholesky(self.Qc)
        except np.linalg.LinAlgError as exc:
            raise ParameterError("Qc must be symmetric positive definite") from exc
        try:
            np.linalg.cholesky(self.S0)
        except np.linalg.LinAlgError as exc:
            raise ParameterError("initial covariance must be positive definite for inference") from exc
        return self


def _noise_factor(cov: np.ndarray) -> np.ndarray:
    if not np.any(cov):
        return np.zeros_like(cov)
    return np.linalg.cholesky(cov)


def simulate_em(process: DiffusionProcess, grid: TimeGrid, seed: int) -> np.ndarray:
    """One Euler-Maruyama path on the grid nodes, shape (M+1, d)."""
    return simulate_em_paths(process, grid, 1, seed)[:, 0, :]


def simulate_em_paths(process: DiffusionProcess, grid: TimeGrid, n_paths: int, seed: int) -> np.ndarray:
    """``n_paths`` independent Euler-Maruyama paths, shape (M+1, n_paths, d)."""
    rng = make_rng(seed)
    d = process.dim
    dt = grid.dt
    L0 = _noise_factor(process.S0)
    Lc = _noise_factor(process.Qc)
    skip_noise = not np.any(Lc)
    x = np.empty((grid.times.size, n_paths, d))
    x[0] = process.m0 + rng.standard_normal((n_paths, d)) @ L0.T
    for m in range(dt.size):
        step = x[m] + process.drift.eval(x[m], grid.times[m]) * dt[m]
        if not skip_noise:
            step = step + np.sqrt(dt[m]) * rng.standard_normal((n_paths, d)) @ Lc.T
        x[m + 1] = step
    return x


@dataclass(frozen=True)
class DiscretePrior:
    """Euler-Maruyama factors N(x_{m+1}; x_m + f(x_m) dt_m, Qc dt_m) on a grid."""

    process: DiffusionProcess
    grid: TimeGrid
    Q_hat: np.ndarray  # (M, d, d)
    linear: DriftParamsLGSSM | None

    @property
    def m0(self) -> np.ndarray:
        return self.process.m0

    @property
    def S0(self) -> np.ndarray:
        return self.process.S0

    def conditional_mean(self, x: np.ndarray, m: int) -> np.ndarray:
        return x + self.process.drift.eval(x, self.grid.times[m]) * self.grid.dt[m]


def linear_chain(A: np.ndarray, b: np.ndarray, process: DiffusionProcess, grid: TimeGrid) -> DriftParamsLGSSM:
    """Chain of an affine drift A_m x + b_m under Euler-Maruyama, per interval."""
    dt = grid.dt
    d = process.dim
    A_hat = np.eye(d) + A * dt[:, None, None]
    b_hat = b * dt[:, None]
    Q_hat = process.Qc * dt[:, None, None]
    return DriftParamsLGSSM(A_hat, b_hat, Q_hat, process.m0.copy(), process.S0.copy())


def discretize_prior(process: DiffusionProcess, grid: TimeGrid) -> DiscretePrior:
    dt = grid.dt
    Q_hat = process.Qc * dt[:, None, None]
    coeffs = process.drift.linear_coefficients()
    linear = None
    if coeffs is not None:
        A, b = coeffs
        M = dt.size
        linear = linear_chain(np.broadcast_to(A, (M,) + A.shape), np.broadcast_to(b, (M,) + b.shape), process, grid)
    return DiscretePrior(process, grid, Q_hat, linear)
