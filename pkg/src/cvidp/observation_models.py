"""Observation likelihoods on scalar projections u = h^T x.

Sites are parameterized against the sufficient statistics (u, u^2); a site
``(lam1, lam2)`` contributes ``lam1 u + lam2 u^2`` to the log density.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .quadrature import _rule_1d


@dataclass(frozen=True)
class Dataset:
    """Scalar observations ``y_i`` of ``h_i^T x(t_i)``.

    ``h`` is either one d-vector shared by all observations or an (n, d)
    array with one projection per observation.
    """

    times: np.ndarray
    values: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).reshape(-1)
        values = np.asarray(self.values, dtype=float).reshape(-1)
        h = np.asarray(self.h, dtype=float)
        if times.size != values.size:
            raise ParameterError("times and values differ in length")
        if np.any(np.diff(times) < 0):
            raise ParameterError("observation times must be sorted")
        if h.ndim == 2 and h.shape[0] != times.size:
            raise ParameterError("per-observation projections must have one row per observation")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "h", h)

    @property
    def n(self) -> int:
        return self.times.size

    @property
    def dim(self) -> int:
        return self.h.shape[-1]

    def projections(self) -> np.ndarray:
        """Projection vectors with shape (n, d)."""
        if self.h.ndim == 1:
            return np.broadcast_to(self.h, (self.n, self.h.size))
        return self.h

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        h = self.h if self.h.ndim == 1 else self.h[index]
        return Dataset(self.times[index], self.values[index], h)


class Likelihood(ABC):
    """p(y | u) for a scalar projection u of the state."""

    @abstractmethod
    def log_density(self, y, u): ...

    @abstractmethod
    def expected_log_density(self, y, m, v):
        """E_{u ~ N(m, v)} log p(y | u)."""

    @abstractmethod
    def grads(self, y, m, v) -> tuple[np.ndarray, np.ndarray]:
        """Derivatives (alpha, beta) of the expected log density w.r.t. m and v."""


class QuadratureLikelihood(Likelihood):
    """Expected log density and its gradients by 1-D Gauss-Hermite quadrature.

    Subclasses provide ``log_density`` and ``dlog_density`` (derivative in u).
    """

    order: int = 20

    @abstractmethod
    def dlog_density(self, y, u): ...

    def _nodes(self, m, v):
        xi, w = _rule_1d(self.order)
        m = np.asarray(m, dtype=float)[..., None]
        s = np.sqrt(np.asarray(v, dtype=float))[..., None]
        return m + s * xi, xi, w

    def expected_log_density(self, y, m, v):
        _check_variance(v)
        u, _, w = self._nodes(m, v)
        return np.sum(w * self.log_density(np.asarray(y, dtype=float)[..., None], u), axis=-1)

    def grads(self, y, m, v):
        _check_variance(v)
        u, xi, w = self._nodes(m, v)
        g = self.dlog_density(np.asarray(y, dtype=float)[..., None], u)
        alpha = np.sum(w * g, axis=-1)
        # dE/dv = E[(u - m) g(u)] / (2 v)
        beta = np.sum(w * xi * g, axis=-1) / (2.0 * np.sqrt(np.asarray(v, dtype=float)))
        return alpha, beta


def _check_variance(v) -> None:
    if np.any(np.asarray(v) <= 0):
        raise ParameterError("marginal variance must be positive")


class GaussianLikelihood(Likelihood):
    """y | u ~ N(u, variance)."""

    def __init__(self, variance: float):
        if not variance > 0:
            raise ParameterError("observation variance must be positive")
        self.variance = float(variance)

    def log_density(self, y, u):
        r = np.asarray(y) - np.asarray(u)
        return -0.5 * math.log(2.0 * math.pi * self.variance) - 0.5 * r * r / self.variance

    def expected_log_density(self, y, m, v):
        _check_variance(v)
        r = np.asarray(y) - np.asarray(m)
        return -0.5 * math.log(2.0 * math.pi * self.variance) - 0.5 * (r * r + np.asarray(v)) / self.variance

    def grads(self, y, m, v):
        return gaussian_grads(y, m, v, self.variance)

    def predictive_log_density(self, y, m, v):
        """log N(y; m, v + variance), the held-out predictive density."""
        s = np.asarray(v) + self.variance
        r = np.asarray(y) - np.asarray(m)
        return -0.5 * np.log(2.0 * math.pi * s) - 0.5 * r * r / s


def gaussian_grads(y, m, v, variance: float) -> tuple[np.ndarray, np.ndarray]:
    """alpha = (y - m) / variance, beta = -1 / (2 variance)."""
    _check_variance(v)
    if not variance > 0:
        raise ParameterError("observation variance must be positive")
    alpha = (np.asarray(y, dtype=float) - np.asarray(m, dtype=float)) / variance
    beta = np.full_like(alpha, -0.5 / variance)
    return alpha, beta


def grads_to_site(alpha, beta, m) -> tuple[np.ndarray, np.ndarray]:
    """Chain rule from (mean, variance) gradients to (E[u], E[u^2]) gradients."""
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    return alpha - 2.0 * beta * np.asarray(m, dtype=float), beta.copy()
