"""Linear-Gaussian Markov chains on a time grid.

A chain over states ``x_0, ..., x_M`` (each in R^d) has four equivalent
descriptions, each with its own container:

* :class:`DriftParamsLGSSM`: transitions ``x_{i+1} = A_i x_i + b_i + N(0, Q_i)``
  plus the initial Gaussian ``N(m0, S0)``.
* :class:`MarginalStats`: marginal means, covariances and lag-one
  cross-covariances ``C_i = Cov(x_{i+1}, x_i)``.
* :class:`NaturalParams`: linear term ``h`` and block-tridiagonal precision
  ``J``; the log density is ``h^T x - x^T J x / 2 - A(eta)``.
* :class:`ExpectationParams`: ``E[x_i]``, ``E[x_i x_i^T]`` and
  ``E[x_{i+1} x_i^T]``.

Natural and expectation parameters are paired through :func:`inner`, which
is the pairing ``<eta, T(x)>`` with natural coordinates ``(h, -J/2)``.
Only block-tridiagonal storage is used; nothing here forms a dense
``(M+1)d x (M+1)d`` matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import ConditioningError, ParameterError, PosteriorValidityError

JITTER = 1e-8
LOG_2PI = math.log(2.0 * math.pi)


def symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def _is_pd(a: np.ndarray) -> np.ndarray:
    """Elementwise PD test over the leading batch axes."""
    a = np.asarray(a)
    flat = a.reshape(-1, a.shape[-2], a.shape[-1])
    try:
        np.linalg.cholesky(flat)
        return np.ones(a.shape[:-2], dtype=bool)
    except np.linalg.LinAlgError:
        pass
    ok = np.empty(flat.shape[0], dtype=bool)
    for i, blk in enumerate(flat):
        try:
            np.linalg.cholesky(blk)
            ok[i] = True
        except np.linalg.LinAlgError:
            ok[i] = False
    return ok.reshape(a.shape[:-2])


# --------------------------------------------------------------------------
# Time grid
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing grid ``times`` and the node index of each observation."""

    times: np.ndarray
    obs_index: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        obs_index = np.asarray(self.obs_index, dtype=np.int64).reshape(-1)
        if times.ndim != 1 or times.size < 1:
            raise ParameterError("times must be a non-empty 1-D array")
        if np.any(np.diff(times) <= 0):
            raise ParameterError("grid times must be strictly increasing")
        if obs_index.size and (obs_index.min() < 0 or obs_index.max() >= times.size):
            raise ParameterError("observation index outside the grid")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "obs_index", obs_index)

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.times)

    @property
    def n_intervals(self) -> int:
        return self.times.size - 1

    @classmethod
    def with_observations(
        cls,
        t0: float,
        t_end: float,
        dt: float,
        obs_times,
        merge_tol: float | None = None,
    ) -> "TimeGrid":
        """Uniform grid of step ``dt`` on [t0, t_end] with ``obs_times`` inserted.

        A uniform node closer than ``merge_tol`` (default ``1e-6 * dt``) to an
        observation time is replaced by that time, so no sliver intervals
        appear. Repeated observation times share one node.
        """
        if dt <= 0:
            raise ParameterError("dt must be positive")
        obs_times = np.asarray(obs_times, dtype=float).reshape(-1)
        if obs_times.size and (obs_times.min() < t0 - 1e-12 or obs_times.max() > t_end + 1e-12):
            raise ParameterError("observation times must lie in [t0, t_end]")
        tol = 1e-6 * dt if merge_tol is None else merge_tol
        n_steps = max(int(round((t_end - t0) / dt)), 1)
        uniform = t0 + dt * np.arange(n_steps + 1)
        uniform[-1] = t_end
        unique_obs = np.unique(obs_times)
        if unique_obs.size:
            pos = np.searchsorted(unique_obs, uniform)
            left = np.abs(uniform - unique_obs[np.clip(pos - 1, 0, unique_obs.size - 1)])
            right = np.abs(uniform - unique_obs[np.clip(pos, 0, unique_obs.size - 1)])
            keep = np.minimum(left, right) > tol
            times = np.union1d(uniform[keep], unique_obs)
        else:
            times = uniform
        obs_index = np.searchsorted(times, obs_times)
        return cls(times, obs_index)


# --------------------------------------------------------------------------
# Parameter containers
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DriftParamsLGSSM:
    A_hat: np.ndarray  # (M, d, d)
    b_hat: np.ndarray  # (M, d)
    Q_hat: np.ndarray  # (M, d, d)
    m0: np.ndarray  # (d,)
    S0: np.ndarray  # (d, d)

    @property
    def dim(self) -> int:
        return self.m0.shape[0]

    @property
    def n_intervals(self) -> int:
        return self.A_hat.shape[0]

    def validate(self) -> "DriftParamsLGSSM":
        bad = np.flatnonzero(~_is_pd(self.Q_hat))
        if bad.size:
            raise ParameterError(f"transition covariance {bad[0]} is not positive definite")
        if not _is_pd(self.S0):
            raise ParameterError("initial covariance is not positive definite")
        return self


@dataclass(frozen=True)
class MarginalStats:
    mean: np.ndarray  # (N, d)
    cov: np.ndarray  # (N, d, d)
    cross: np.ndarray  # (N-1, d, d), Cov(x_{i+1}, x_i)

    @property
    def dim(self) -> int:
        return self.mean.shape[1]

    def pair_moments(self) -> tuple[np.ndarray, np.ndarray]:
        """Mean and covariance of ``[x_i; x_{i+1}]`` for each interval."""
        m, S, C = self.mean, self.cov, self.cross
        mean = np.concatenate([m[:-1], m[1:]], axis=1)
        top = np.concatenate([S[:-1], np.swapaxes(C, 1, 2)], axis=2)
        bottom = np.concatenate([C, S[1:]], axis=2)
        return mean, np.concatenate([top, bottom], axis=1)


@dataclass(frozen=True)
class NaturalParams:
    """Linear term ``h`` and precision blocks; ``J_off[i]`` couples state i+1 to i."""

    h: np.ndarray  # (N, d)
    J_diag: np.ndarray  # (N, d, d)
    J_off: np.ndarray  # (N-1, d, d)

    def __add__(self, other: "NaturalParams") -> "NaturalParams":
        _check_same_shape(self, other)
        return NaturalParams(self.h + other.h, self.J_diag + other.J_diag, self.J_off + other.J_off)

    def __sub__(self, other: "NaturalParams") -> "NaturalParams":
        _check_same_shape(self, other)
        return NaturalParams(self.h - other.h, self.J_diag - other.J_diag, self.J_off - other.J_off)

    def __mul__(self, c: float) -> "NaturalParams":
        return NaturalParams(c * self.h, c * self.J_diag, c * self.J_off)

    __rmul__ = __mul__

    @classmethod
    def zeros(cls, n_states: int, dim: int) -> "NaturalParams":
        return cls(
            np.zeros((n_states, dim)),
            np.zeros((n_states, dim, dim)),
            np.zeros((max(n_states - 1, 0), dim, dim)),
        )

    @property
    def n_states(self) -> int:
        return self.h.shape[0]

    @property
    def dim(self) -> int:
        return self.h.shape[1]


@dataclass(frozen=True)
class ExpectationParams:
    mean: np.ndarray  # (N, d)  E[x_i]
    second: np.ndarray  # (N, d, d)  E[x_i x_i^T]
    cross: np.ndarray  # (N-1, d, d)  E[x_{i+1} x_i^T]


def _check_same_shape(a: NaturalParams, b: NaturalParams) -> None:
    if a.h.shape != b.h.shape:
        raise ValueError(f"grid mismatch: {a.h.shape} vs {b.h.shape}")


# --------------------------------------------------------------------------
# Conversions
# --------------------------------------------------------------------------


def drift_to_marginals(phi: DriftParamsLGSSM) -> MarginalStats:
    """Forward moment recursion of the chain."""
    phi.validate()
    m, S, C, fail = _kernels.chain_moments(
        np.ascontiguousarray(phi.A_hat, dtype=float),
        np.ascontiguousarray(phi.b_hat, dtype=float),
        np.ascontiguousarray(phi.Q_hat, dtype=float),
        np.ascontiguousarray(phi.m0, dtype=float),
        np.ascontiguousarray(phi.S0, dtype=float),
    )
    if fail >= 0:
        raise ParameterError(f"marginal covariance {fail} lost positive definiteness")
    return MarginalStats(m, S, C)


def marginals_to_drift(M: MarginalStats) -> DriftParamsLGSSM:
    """Recover the transitions: A = C S^-1, b = m' - A m, Q = S' - A S A^T."""
    S_prev = M.cov[:-1]
    ok = _is_pd(S_prev) if S_prev.size else np.ones(0, dtype=bool)
    if not np.all(ok):
        i = int(np.flatnonzero(~ok)[0])
        raise ConditioningError(f"marginal covariance {i} is singular or indefinite", index=i)
    # A S = C  <=>  S A^T = C^T
    A = np.swapaxes(np.linalg.solve(S_prev, np.swapaxes(M.cross, 1, 2)), 1, 2)
    b = M.mean[1:] - np.einsum("nij,nj->ni", A, M.mean[:-1])
    Q = symmetrize(M.cov[1:] - A @ S_prev @ np.swapaxes(A, 1, 2))
    return DriftParamsLGSSM(A, b, Q, M.mean[0].copy(), symmetrize(M.cov[0]))


def marginals_to_expectations(M: MarginalStats) -> ExpectationParams:
    m = M.mean
    second = M.cov + np.einsum("ni,nj->nij", m, m)
    cross = M.cross + np.einsum("ni,nj->nij", m[1:], m[:-1])
    return ExpectationParams(m.copy(), second, cross)


def expectations_to_marginals(mu: ExpectationParams) -> MarginalStats:
    m = mu.mean
    S = symmetrize(mu.second - np.einsum("ni,nj->nij", m, m))
    C = mu.cross - np.einsum("ni,nj->nij", m[1:], m[:-1])
    return MarginalStats(m.copy(), S, C)


def expectations_to_drift(mu: ExpectationParams) -> DriftParamsLGSSM:
    return marginals_to_drift(expectations_to_marginals(mu))


def drift_to_natural(phi: DriftParamsLGSSM) -> NaturalParams:
    """Natural parameters of the joint density of the chain."""
    phi.validate()
    d = phi.dim
    M = phi.n_intervals
    A, b = phi.A_hat, phi.b_hat
    Qinv = symmetrize(np.linalg.inv(phi.Q_hat))
    S0inv = symmetrize(np.linalg.inv(phi.S0))
    h = np.zeros((M + 1, d))
    Jd = np.zeros((M + 1, d, d))
    h[0] += S0inv @ phi.m0
    Jd[0] += S0inv
    At = np.swapaxes(A, 1, 2)
    Qb = np.einsum("nij,nj->ni", Qinv, b)
    h[1:] += Qb
    h[:-1] -= np.einsum("nij,nj->ni", At, Qb)
    Jd[1:] += Qinv
    Jd[:-1] += symmetrize(At @ Qinv @ A)
    Jo = -Qinv @ A
    return NaturalParams(h, Jd, Jo)


def natural_to_expectations(eta: NaturalParams) -> ExpectationParams:
    return marginals_to_expectations(smooth(eta))


def expectations_to_natural(mu: ExpectationParams) -> NaturalParams:
    return drift_to_natural(expectations_to_drift(mu))


# --------------------------------------------------------------------------
# Smoothing, log-partition, KL
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class _Elimination:
    P: np.ndarray
    ht: np.ndarray
    logdet: float
    quad: float


def _eliminate(eta: NaturalParams) -> _Elimination:
    P, ht, logdet, quad, fail = _kernels.btd_eliminate(
        np.ascontiguousarray(eta.h, dtype=float),
        np.ascontiguousarray(eta.J_diag, dtype=float),
        np.ascontiguousarray(eta.J_off, dtype=float),
        JITTER,
    )
    if fail >= 0:
        raise PosteriorValidityError(
            f"precision is not positive definite (block {fail})", block=int(fail)
        )
    return _Elimination(P, ht, float(logdet), float(quad))


def smooth(eta: NaturalParams) -> MarginalStats:
    """Marginals and lag-one cross-covariances of the Gaussian with parameters ``eta``.

    Forward elimination turns the precision into backward conditionals
    ``x_i | x_{i+1}`` (a reversed-time LGSSM); an RTS-style backward pass
    then produces the moments.
    """
    elim = _eliminate(eta)
    m, S, C = _kernels.btd_backward(np.ascontiguousarray(eta.J_off, dtype=float), elim.P, elim.ht)
    return MarginalStats(m, S, C)


def smooth_with_tangent(
    eta: NaturalParams, direction: NaturalParams
) -> tuple[MarginalStats, MarginalStats]:
    """Smoother output and its directional derivative along ``direction``.

    ``direction`` is expressed in the same (h, J) storage as ``eta``.
    The tangent cross term is the derivative of ``Cov(x_{i+1}, x_i)``.
    """
    _check_same_shape(eta, direction)
    Jo = np.ascontiguousarray(eta.J_off, dtype=float)
    elim = _eliminate(eta)
    m, S, C = _kernels.btd_backward(Jo, elim.P, elim.ht)
    dm, dS, dC = _kernels.btd_tangent(
        Jo,
        elim.P,
        elim.ht,
        m,
        S,
        np.ascontiguousarray(direction.h, dtype=float),
        np.ascontiguousarray(direction.J_diag, dtype=float),
        np.ascontiguousarray(direction.J_off, dtype=float),
    )
    return MarginalStats(m, S, C), MarginalStats(dm, dS, dC)


def expectation_tangent(M: MarginalStats, dM: MarginalStats) -> ExpectationParams:
    """Push a tangent of the moments through the moments-to-expectations map."""
    m, dm = M.mean, dM.mean
    second = dM.cov + np.einsum("ni,nj->nij", dm, m) + np.einsum("ni,nj->nij", m, dm)
    cross = (
        dM.cross
        + np.einsum("ni,nj->nij", dm[1:], m[:-1])
        + np.einsum("ni,nj->nij", m[1:], dm[:-1])
    )
    return ExpectationParams(dm.copy(), second, cross)


def log_partition(eta: NaturalParams) -> float:
    """``log \\int exp(h^T x - x^T J x / 2) dx``."""
    elim = _eliminate(eta)
    n = eta.h.size
    return 0.5 * elim.quad - 0.5 * elim.logdet + 0.5 * n * LOG_2PI


def inner(eta: NaturalParams, mu: ExpectationParams) -> float:
    """Pairing ``<eta, mu>`` with natural coordinates (h, -J/2) on the btd support."""
    val = np.einsum("ni,ni->", eta.h, mu.mean)
    val -= 0.5 * np.einsum("nij,nij->", eta.J_diag, mu.second)
    val -= np.einsum("nij,nij->", eta.J_off, mu.cross)
    return float(val)


def kl(eta_q: NaturalParams, eta_p: NaturalParams, mu_q: ExpectationParams | None = None) -> float:
    """KL(q || p) = <eta_q - eta_p, mu_q> - A(eta_q) + A(eta_p)."""
    _check_same_shape(eta_q, eta_p)
    if mu_q is None:
        mu_q = natural_to_expectations(eta_q)
    return inner(eta_q - eta_p, mu_q) - log_partition(eta_q) + log_partition(eta_p)


def _gauss_kl(m_q, S_q, m_p, S_p) -> np.ndarray:
    """Batched KL(N(m_q, S_q) || N(m_p, S_p))."""
    d = m_q.shape[-1]
    Lp = np.linalg.cholesky(S_p)
    diff = m_p - m_q
    sol = np.linalg.solve(Lp, diff[..., None])[..., 0]
    trace = np.trace(np.linalg.solve(S_p, S_q), axis1=-2, axis2=-1)
    _, logdet_p = np.linalg.slogdet(S_p)
    sign_q, logdet_q = np.linalg.slogdet(S_q)
    if np.any(sign_q <= 0):
        raise ConditioningError("covariance in KL is not positive definite")
    return 0.5 * (trace - d + np.sum(sol**2, axis=-1) + logdet_p - logdet_q)


def kl_markov(M_q: MarginalStats, phi_p: DriftParamsLGSSM) -> float:
    """KL(q || p) summed over the initial state and the transition conditionals.

    Numerically identical in exact arithmetic to :func:`kl` but avoids the
    cancellation between two large log-partition values.
    """
    phi_q = marginals_to_drift(M_q)
    total = float(_gauss_kl(phi_q.m0, phi_q.S0, phi_p.m0, phi_p.S0))
    if phi_p.n_intervals == 0:
        return total
    Qp = phi_p.Q_hat
    Qq = phi_q.Q_hat
    dA = phi_q.A_hat - phi_p.A_hat
    db = phi_q.b_hat - phi_p.b_hat
    m, S = M_q.mean[:-1], M_q.cov[:-1]
    # E_x KL(N(Aq x + bq, Qq) || N(Ap x + bp, Qp)), x ~ N(m, S)
    base = _gauss_kl(np.zeros_like(db), Qq, np.zeros_like(db), Qp)
    r = np.einsum("nij,nj->ni", dA, m) + db
    Qp_inv = np.linalg.inv(Qp)
    quad = np.einsum("ni,nij,nj->n", r, Qp_inv, r)
    quad += np.einsum("nij,njk,nki->n", np.swapaxes(dA, 1, 2) @ Qp_inv, dA, S)
    return total + float(np.sum(base + 0.5 * quad))
