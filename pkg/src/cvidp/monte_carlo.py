"""Particle baselines: CPF-AS smoothing and annealed importance sampling.

Particle slot 0 always carries the reference trajectory. Weights live in the
log domain. They only change at nodes that carry observations, so resampling
(systematic, when ESS < K/2) and ancestor sampling only happen there; between
observations every particle keeps its own lineage.

Only Gaussian observation noise is supported, since the observation
log-density is evaluated inside compiled code.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .cvi_dp import observation_nodes
from .diffusion_models import DiffusionProcess
from .errors import ConfigError, NumericalUnderweightError
from .lgssm_core import TimeGrid, symmetrize
from .observation_models import Dataset, GaussianLikelihood, Likelihood

_LOG_2PI = math.log(2.0 * math.pi)


# --------------------------------------------------------------------------
# Compiled core
# --------------------------------------------------------------------------


@njit(cache=True)
def _log_sum_exp(a):
    mx = np.max(a)
    if not np.isfinite(mx):
        return mx
    return mx + np.log(np.sum(np.exp(a - mx)))


@njit(cache=True)
def _systematic(logw, n_draws, u):
    """``n_draws`` indices by systematic resampling with offset ``u`` in [0, 1)."""
    w = np.exp(logw - _log_sum_exp(logw))
    cum = np.cumsum(w)
    out = np.empty(n_draws, dtype=np.int64)
    j = 0
    K = w.size
    for i in range(n_draws):
        pos = (u + i) / n_draws
        while j < K - 1 and cum[j] < pos:
            j += 1
        out[i] = j
    return out


@njit(cache=True)
def _categorical(logw, u):
    w = np.exp(logw - _log_sum_exp(logw))
    cum = 0.0
    for k in range(w.size):
        cum += w[k]
        if u < cum:
            return k
    return w.size - 1


@njit(cache=True)
def _cpf_sweep(
    drift, theta, dt, Lc, Pc, m0, L0, obs_start, obs_y, obs_h, obs_var, tau, ref, K, rng, X, anc
):
    """One conditional particle filter with ancestor sampling.

    ``X`` (N, K, d) and ``anc`` (N-1, K) are work buffers. Returns the new
    reference trajectory, the number of resampling events and the first node
    whose weights all vanished (-1 if none).
    """
    N, d = ref.shape
    logw = np.zeros(K)
    la = np.empty(K)
    z = np.empty(d)
    resampled = 0
    log_norm = _LOG_2PI + math.log(obs_var)
    X[0, 0] = ref[0]
    for k in range(1, K):
        for i in range(d):
            z[i] = rng.standard_normal()
        for i in range(d):
            acc = m0[i]
            for j in range(i + 1):
                acc += L0[i, j] * z[j]
            X[0, k, i] = acc
    for n in range(N):
        lo, hi = obs_start[n], obs_start[n + 1]
        weighted = hi > lo and tau > 0.0
        if weighted:
            for k in range(K):
                acc = 0.0
                for j in range(lo, hi):
                    u = 0.0
                    for i in range(d):
                        u += obs_h[j, i] * X[n, k, i]
                    r = obs_y[j] - u
                    acc += -0.5 * (log_norm + r * r / obs_var)
                logw[k] += tau * acc
            if not np.isfinite(np.max(logw)):
                return ref, resampled, n
        if n == N - 1:
            break
        step = dt[n]
        sq = math.sqrt(step)
        mean = X[n] + drift(X[n], theta) * step
        resample = False
        if weighted:
            mx = np.max(logw)
            s1 = 0.0
            s2 = 0.0
            for k in range(K):
                e = math.exp(logw[k] - mx)
                s1 += e
                s2 += e * e
            resample = s1 * s1 / s2 < 0.5 * K
        if resample:
            resampled += 1
            draws = _systematic(logw, K - 1, rng.random())
            for k in range(1, K):
                anc[n, k] = draws[k - 1]
            # ancestor of the reference: weight times one-step transition density
            for k in range(K):
                q = 0.0
                for i in range(d):
                    di = ref[n + 1, i] - mean[k, i]
                    for j in range(d):
                        q += di * Pc[i, j] * (ref[n + 1, j] - mean[k, j])
                la[k] = logw[k] - 0.5 * q / step
            anc[n, 0] = _categorical(la, rng.random())
            logw[:] = 0.0
        else:
            for k in range(K):
                anc[n, k] = k
        X[n + 1, 0] = ref[n + 1]
        for k in range(1, K):
            a = anc[n, k]
            for i in range(d):
                z[i] = rng.standard_normal()
            for i in range(d):
                acc = mean[a, i]
                for j in range(i + 1):
                    acc += sq * Lc[i, j] * z[j]
                X[n + 1, k, i] = acc
    b = _categorical(logw, rng.random())
    out = np.empty_like(ref)
    for n in range(N - 1, -1, -1):
        out[n] = X[n, b]
        if n > 0:
            b = anc[n - 1, b]
    return out, resampled, -1


@njit(cache=True)
def _cpf_chain(
    drift, theta, dt, Lc, Pc, m0, L0, obs_start, obs_y, obs_h, obs_var, tau, ref, K, rng, n_sweeps, keep_from
):
    """``n_sweeps`` CPF-AS sweeps; references from sweep ``keep_from`` on are stored."""
    N, d = ref.shape
    X = np.empty((N, K, d))
    anc = np.empty((max(N - 1, 1), K), dtype=np.int64)
    kept = np.empty((max(n_sweeps - keep_from, 0), N, d))
    total = 0
    for s in range(n_sweeps):
        ref, r, fail = _cpf_sweep(
            drift, theta, dt, Lc, Pc, m0, L0, obs_start, obs_y, obs_h, obs_var, tau, ref, K, rng, X, anc
        )
        if fail >= 0:
            return ref, kept, total, fail
        total += r
        if s >= keep_from:
            kept[s - keep_from] = ref
    return ref, kept, total, -1


# --------------------------------------------------------------------------
# Python interface
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SMCConfig:
    n_particles: int = 200
    n_sweeps: int = 100
    burn_in: int = 20

    def validate(self) -> None:
        if self.n_particles < 2:
            raise ConfigError("need at least 2 particles", field="n_particles")
        if self.n_sweeps < 1:
            raise ConfigError("need at least one sweep", field="n_sweeps")
        if not 0 <= self.burn_in < self.n_sweeps:
            raise ConfigError("burn-in must be in [0, n_sweeps)", field="burn_in")


@dataclass
class ParticleSystem:
    """Compiled-model inputs shared by every sweep."""

    process: DiffusionProcess
    grid: TimeGrid
    obs_start: np.ndarray  # (N+1,) observation offsets per node
    obs_y: np.ndarray
    obs_h: np.ndarray
    obs_var: float

    @classmethod
    def build(cls, process: DiffusionProcess, dataset: Dataset, likelihood: Likelihood, grid: TimeGrid):
        if not isinstance(likelihood, GaussianLikelihood):
            raise ConfigError("particle methods support Gaussian observations only", field="likelihood")
        process.validate()
        nodes = observation_nodes(grid, dataset)
        order = np.argsort(nodes, kind="stable")
        counts = np.bincount(nodes, minlength=grid.times.size)
        start = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        return cls(
            process,
            grid,
            start,
            np.ascontiguousarray(dataset.values[order], dtype=float),
            np.ascontiguousarray(dataset.projections()[order], dtype=float),
            float(likelihood.variance),
        )

    def run(self, ref: np.ndarray, tau: float, K: int, rng, n_sweeps: int, keep_from: int):
        p = self.process
        ref, kept, resampled, fail = _cpf_chain(
            type(p.drift).kernel,
            np.ascontiguousarray(p.drift.theta, dtype=float),
            self.grid.dt,
            _factor(p.Qc),
            symmetrize(np.linalg.inv(p.Qc)),
            np.ascontiguousarray(p.m0, dtype=float),
            _factor(p.S0),
            self.obs_start,
            self.obs_y,
            self.obs_h,
            self.obs_var,
            float(tau),
            np.ascontiguousarray(ref, dtype=float),
            int(K),
            rng,
            int(n_sweeps),
            int(keep_from),
        )
        if fail >= 0:
            raise NumericalUnderweightError(
                f"all particle weights vanished at time index {fail} (t={self.grid.times[fail]:.6g}); "
                "increase the number of particles"
            )
        return ref, kept, resampled

    def prior_path(self, rng) -> np.ndarray:
        """An Euler-Maruyama draw from the prior, used as the first reference."""
        p = self.process
        d = p.dim
        N = self.grid.times.size
        x = np.empty((N, d))
        x[0] = p.m0 + _factor(p.S0) @ rng.standard_normal(d)
        Lc = _factor(p.Qc)
        for n, step in enumerate(self.grid.dt):
            x[n + 1] = x[n] + p.drift.eval(x[n]) * step + math.sqrt(step) * Lc @ rng.standard_normal(d)
        return x

    def log_likelihood(self, path: np.ndarray) -> float:
        nodes = np.repeat(np.arange(self.grid.times.size), np.diff(self.obs_start))
        u = np.einsum("ni,ni->n", self.obs_h, path[nodes])
        r = self.obs_y - u
        return float(np.sum(-0.5 * (_LOG_2PI + math.log(self.obs_var) + r * r / self.obs_var)))


def _factor(cov) -> np.ndarray:
    """Lower factor, allowing a zero (point-mass) covariance."""
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if not np.any(cov):
        return np.zeros_like(cov)
    return np.linalg.cholesky(cov)


def _rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def effective_sample_size(chain: np.ndarray) -> np.ndarray:
    """ESS along axis 0 by Geyer's initial positive sequence of autocorrelations."""
    n = chain.shape[0]
    x = chain - chain.mean(axis=0)
    var = np.mean(x * x, axis=0)
    f = np.fft.rfft(x, n=2 * n, axis=0)
    acov = np.fft.irfft(f * np.conj(f), axis=0)[:n] / n
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = acov / var
    flat = rho.reshape(n, -1)
    tau = np.ones(flat.shape[1])
    for j in range(flat.shape[1]):
        if not np.isfinite(flat[0, j]):
            continue
        total = 0.0
        for lag in range(1, n - 1, 2):
            pair = flat[lag, j] + flat[lag + 1, j]
            if pair <= 0.0:
                break
            total += pair
        tau[j] = max(1.0 + 2.0 * total, 1.0)
    return (n / tau).reshape(rho.shape[1:])


@dataclass
class SmootherResult:
    times: np.ndarray
    samples: np.ndarray  # (S, N, d)
    mean: np.ndarray
    var: np.ndarray
    std_error: np.ndarray
    resampling_events: int


def cpf_as_smoother(
    process: DiffusionProcess,
    dataset: Dataset,
    likelihood: Likelihood,
    grid: TimeGrid,
    config: SMCConfig = SMCConfig(),
    seed: int = 0,
    tau: float = 1.0,
) -> SmootherResult:
    """Posterior path samples by repeated CPF-AS sweeps; summaries after burn-in.

    Standard errors account for the autocorrelation of the chain of
    reference trajectories.
    """
    config.validate()
    system = ParticleSystem.build(process, dataset, likelihood, grid)
    rng = _rng(seed)
    ref = system.prior_path(rng)
    _, kept, resampled = system.run(ref, tau, config.n_particles, rng, config.n_sweeps, config.burn_in)
    mean = kept.mean(axis=0)
    var = kept.var(axis=0, ddof=1) if kept.shape[0] > 1 else np.zeros_like(mean)
    ess = effective_sample_size(kept) if kept.shape[0] > 2 else np.full(mean.shape, float(kept.shape[0]))
    se = np.sqrt(var / np.maximum(ess, 1.0))
    return SmootherResult(grid.times, kept, mean, var, se, resampled)


@dataclass(frozen=True)
class AISConfig:
    n_levels: int = 800
    n_particles: int = 20
    sweeps_per_level: int = 10
    repetitions: int = 3

    def validate(self) -> None:
        if self.n_levels < 1:
            raise ConfigError("need at least one temperature", field="n_levels")
        if self.n_particles < 2:
            raise ConfigError("need at least 2 particles", field="n_particles")
        if self.sweeps_per_level < 1:
            raise ConfigError("need at least one sweep per level", field="sweeps_per_level")
        if self.repetitions < 1:
            raise ConfigError("need at least one repetition", field="repetitions")

    def schedule(self) -> np.ndarray:
        """Temperatures (j/J)^4 for j = 0..J."""
        return (np.arange(self.n_levels + 1) / self.n_levels) ** 4


@dataclass
class AISResult:
    log_marginal: float
    estimates: np.ndarray


def ais_log_marginal(
    process: DiffusionProcess,
    dataset: Dataset,
    likelihood: Likelihood,
    grid: TimeGrid,
    config: AISConfig = AISConfig(),
    seed: int = 0,
) -> AISResult:
    """Single-path AIS; each level's path is the last of several CPF-AS sweeps.

    The path for level j targets the posterior tempered at tau(j-1) and is
    obtained by continuing the chain from the previous level's path. The
    repetitions are averaged in log space (a geometric mean of the Z estimates).
    """
    config.validate()
    system = ParticleSystem.build(process, dataset, likelihood, grid)
    taus = config.schedule()
    estimates = np.empty(config.repetitions)
    for r, child in enumerate(np.random.SeedSequence(seed).spawn(config.repetitions)):
        rng = _rng(child)
        path = system.prior_path(rng)
        total = 0.0
        for j in range(1, config.n_levels + 1):
            path, _, _ = system.run(path, taus[j - 1], config.n_particles, rng, config.sweeps_per_level, 0)
            total += (taus[j] - taus[j - 1]) * system.log_likelihood(path)
        estimates[r] = total
    return AISResult(float(np.mean(estimates)), estimates)
