"""Site-based conjugate-computation variational inference for diffusion priors.

The prior is discretized with Euler-Maruyama on a grid. The posterior is a
Gaussian Markov chain whose natural parameters are assembled as

    eta_q = eta_L + embed(sparse sites) + dt * embed(dense sites)

where ``eta_L`` belongs to a linear surrogate prior ``p_L`` (drift
``A_m x + b_m``), sparse sites carry the observations and dense sites carry
the change of measure from ``p_L`` to the non-linear prior on each interval.
Sites are refreshed by damped mirror-descent steps; ``p_L`` is refreshed by
posterior linearization, after which dense sites are rebased so the
posterior does not move.

Pair statistics on interval ``m`` are taken over ``[x_m; x_{m+1}]``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .diffusion_models import DiffusionProcess, DriftFunction, linear_chain
from .errors import ConditioningError, ConfigError, DivergenceError, ParameterError, PosteriorValidityError
from .lgssm_core import (
    DriftParamsLGSSM,
    MarginalStats,
    NaturalParams,
    TimeGrid,
    drift_to_natural,
    expectation_tangent,
    inner,
    kl_markov,
    smooth,
    smooth_with_tangent,
    symmetrize,
)
from .observation_models import Dataset, Likelihood, grads_to_site
from .optim import Adam
from .quadrature import factored_nodes, gaussian_nodes
from .tracing import Trace

log = logging.getLogger(__name__)

# The potential is affine in x_{m+1}, so every pair integrand is at most
# quadratic along those axes and two Gauss-Hermite nodes are exact there.
NEXT_STATE_ORDER = 2


def default_order(dim: int) -> int:
    return 20 if dim == 1 else 10


def observation_nodes(grid: TimeGrid, dataset: Dataset) -> np.ndarray:
    """Grid node index of each observation; raises if a time is off-grid."""
    times = grid.times
    idx = np.clip(np.searchsorted(times, dataset.times), 0, times.size - 1)
    left = np.clip(idx - 1, 0, times.size - 1)
    idx = np.where(np.abs(times[left] - dataset.times) < np.abs(times[idx] - dataset.times), left, idx)
    scale = max(1.0, float(np.max(np.abs(times))))
    if np.any(np.abs(times[idx] - dataset.times) > 1e-9 * scale):
        raise ParameterError("observation times must be grid nodes")
    return idx


# --------------------------------------------------------------------------
# Containers
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SparseSites:
    """One scalar site (lam1, lam2) per observation, on statistics (u, u^2)."""

    lam1: np.ndarray
    lam2: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "SparseSites":
        return cls(np.zeros(n), np.zeros(n))

    def blend(self, target: "SparseSites", rho: float) -> "SparseSites":
        return SparseSites(
            (1.0 - rho) * self.lam1 + rho * target.lam1,
            (1.0 - rho) * self.lam2 + rho * target.lam2,
        )

    def __sub__(self, other: "SparseSites") -> "SparseSites":
        return SparseSites(self.lam1 - other.lam1, self.lam2 - other.lam2)


@dataclass(frozen=True)
class DenseSites:
    """Per-interval natural parameters on ``[x_m; x_{m+1}]`` (before the dt factor)."""

    lin: np.ndarray  # (M, 2d)
    quad: np.ndarray  # (M, 2d, 2d), symmetric

    @classmethod
    def zeros(cls, n_intervals: int, dim: int) -> "DenseSites":
        return cls(np.zeros((n_intervals, 2 * dim)), np.zeros((n_intervals, 2 * dim, 2 * dim)))

    def blend(self, target: "DenseSites", rho: float) -> "DenseSites":
        return DenseSites(
            (1.0 - rho) * self.lin + rho * target.lin,
            symmetrize((1.0 - rho) * self.quad + rho * target.quad),
        )

    def __add__(self, other: "DenseSites") -> "DenseSites":
        return DenseSites(self.lin + other.lin, symmetrize(self.quad + other.quad))

    def __sub__(self, other: "DenseSites") -> "DenseSites":
        return DenseSites(self.lin - other.lin, symmetrize(self.quad - other.quad))


@dataclass(frozen=True)
class LinearizedPrior:
    """Affine surrogate drift ``A_m x + b_m`` on each interval."""

    A: np.ndarray  # (M, d, d)
    b: np.ndarray  # (M, d)

    def chain(self, process: DiffusionProcess, grid: TimeGrid) -> DriftParamsLGSSM:
        return linear_chain(self.A, self.b, process, grid)

    def natural(self, process: DiffusionProcess, grid: TimeGrid) -> NaturalParams:
        return drift_to_natural(self.chain(process, grid))

    @classmethod
    def around_point(cls, drift: DriftFunction, x: np.ndarray, grid: TimeGrid) -> "LinearizedPrior":
        """First-order Taylor expansion of the drift at ``x``, on every interval."""
        M = grid.n_intervals
        J = drift.jacobian(x[None], grid.times[0])[0]
        f = drift.eval(x[None], grid.times[0])[0]
        A = np.broadcast_to(J, (M,) + J.shape).copy()
        b = np.broadcast_to(f - J @ x, (M,) + f.shape).copy()
        return cls(A, b)

    @classmethod
    def initial(cls, kind: str, process: DiffusionProcess, grid: TimeGrid) -> "LinearizedPrior":
        """Starting surrogate: ``"point"`` linearizes at the prior initial mean,
        ``"brownian"`` uses zero drift (useful when that Jacobian is unstable)."""
        if kind == "point":
            return cls.around_point(process.drift, process.m0, grid)
        if kind == "brownian":
            M, d = grid.n_intervals, process.dim
            return cls(np.zeros((M, d, d)), np.zeros((M, d)))
        raise ConfigError(f"unknown initial surrogate {kind!r}; use 'point' or 'brownian'", field="init_surrogate")


@dataclass(frozen=True)
class VariationalPosterior:
    eta: NaturalParams
    marginals: MarginalStats


@dataclass(frozen=True)
class CVIState:
    """Warm-start bundle: sites plus the surrogate they are expressed against."""

    sparse: SparseSites
    dense: DenseSites
    linearized: LinearizedPrior


@dataclass(frozen=True)
class CVIConfig:
    rho: float = 0.5
    max_outer: int = 20
    max_inner: int = 500
    tol: float = 1e-6
    order: int | None = None
    relinearize_every: int | None = None
    max_halvings: int = 10
    monotone_slack: float = 1e-6
    init_surrogate: str = "point"


@dataclass
class CVIResult:
    posterior: VariationalPosterior
    sparse: SparseSites
    dense: DenseSites
    linearized: LinearizedPrior
    trace: Trace
    converged: bool
    n_inner: int
    n_outer: int
    monotone_violations: int = 0

    @property
    def elbo(self) -> float:
        return self.trace.records[-1].elbo

    @property
    def state(self) -> CVIState:
        return CVIState(self.sparse, self.dense, self.linearized)


# --------------------------------------------------------------------------
# Site embeddings and assembly
# --------------------------------------------------------------------------


def embed_sparse(sites: SparseSites, projections: np.ndarray, nodes: np.ndarray, n_states: int) -> NaturalParams:
    d = projections.shape[1]
    out = NaturalParams.zeros(n_states, d)
    np.add.at(out.h, nodes, sites.lam1[:, None] * projections)
    outer = np.einsum("ni,nj->nij", projections, projections)
    np.add.at(out.J_diag, nodes, -2.0 * sites.lam2[:, None, None] * outer)
    return out


def embed_dense(sites: DenseSites, dt: np.ndarray) -> NaturalParams:
    """Dense sites scaled by the interval lengths, in (h, J) storage."""
    M, two_d = sites.lin.shape
    d = two_d // 2
    lin = sites.lin * dt[:, None]
    quad = sites.quad * dt[:, None, None]
    h = np.zeros((M + 1, d))
    Jd = np.zeros((M + 1, d, d))
    h[:-1] += lin[:, :d]
    h[1:] += lin[:, d:]
    Jd[:-1] += -2.0 * quad[:, :d, :d]
    Jd[1:] += -2.0 * quad[:, d:, d:]
    Jo = -2.0 * quad[:, d:, :d]
    return NaturalParams(h, Jd, Jo)


def _transition_pair_params(chain: DriftParamsLGSSM) -> DenseSites:
    """Natural parameters of each transition density on ``[x_m; x_{m+1}]``."""
    A, b = chain.A_hat, chain.b_hat
    Qinv = symmetrize(np.linalg.inv(chain.Q_hat))
    At = np.swapaxes(A, 1, 2)
    Qb = np.einsum("nij,nj->ni", Qinv, b)
    lin = np.concatenate([-np.einsum("nij,nj->ni", At, Qb), Qb], axis=1)
    top = np.concatenate([At @ Qinv @ A, -At @ Qinv], axis=2)
    bottom = np.concatenate([-Qinv @ A, Qinv], axis=2)
    quad = -0.5 * np.concatenate([top, bottom], axis=1)
    return DenseSites(lin, symmetrize(quad))


# --------------------------------------------------------------------------
# Local computations
# --------------------------------------------------------------------------


def potential_V(x_curr, x_next, drift: DriftFunction, A, b, Qc, dt, t: float = 0.0):
    """Log-ratio of the non-linear and surrogate transitions, per unit time.

    ``V dt = log N(x_next; x_curr + f_p dt, Qc dt) - log N(x_next; x_curr + f_L dt, Qc dt)``,
    which expands to ``V = <r, delta> / dt - |delta|^2 / 2`` with
    ``r = x_next - x_curr - f_L dt``, ``delta = f_p - f_L`` (both drifts at
    ``x_curr``) and the Qc^{-1} inner product.
    """
    x_curr = np.asarray(x_curr, dtype=float)
    x_next = np.asarray(x_next, dtype=float)
    P = np.linalg.inv(np.atleast_2d(Qc))
    fp = drift.eval(x_curr, t)
    fL = np.einsum("...ij,...j->...i", A, x_curr) + b
    delta = fp - fL
    Pd = delta @ P
    r = x_next - x_curr - fL * dt
    return np.sum(r * Pd, axis=-1) / dt - 0.5 * np.sum(delta * Pd, axis=-1)


def _potential_with_grad(z, w, drift, A, b, P, dt):
    """V and its gradient w.r.t. (z, w) at quadrature nodes of shape (M, n, d)."""
    fp = drift.eval(z)
    Jp = drift.jacobian(z)
    fL = z @ np.swapaxes(A, 1, 2) + b[:, None, :]
    delta = fp - fL
    Pd = delta @ P
    inv_dt = 1.0 / dt[:, None, None]
    r = w - z - fL * dt[:, None, None]
    Pr = r @ P
    V = np.sum(r * Pd, axis=-1) * inv_dt[..., 0] - 0.5 * np.sum(delta * Pd, axis=-1)
    J_delta = Jp - A[:, None]
    # d/dz of <r, delta>/dt uses dr/dz = -(I + A dt)
    g_z = (
        (((Pr * inv_dt - Pd)[..., None, :]) @ J_delta)[..., 0, :]
        - Pd * inv_dt
        - Pd @ A
    )
    return V, np.concatenate([g_z, Pd * inv_dt], axis=-1)


def expected_V_grads(pair_mean, pair_cov, drift, A, b, Qc, dt, order: int | None = None):
    """``E_q[V]`` per interval and its gradient w.r.t. (E[x~], E[x~ x~^T]).

    Mean and covariance gradients come from Bonnet's and Price's identities,
    the latter in Stein form so only first derivatives of the drift are
    needed; they are then mapped through the chain rule
    ``d/dmu1 = g_m - 2 g_S m``, ``d/dmu2 = g_S``.
    """
    d = pair_mean.shape[1] // 2
    order = default_order(d) if order is None else order
    P = symmetrize(np.linalg.inv(np.atleast_2d(Qc)))
    x, xi, wts, L = factored_nodes(pair_mean, pair_cov, (order,) * d + (NEXT_STATE_ORDER,) * d)
    V, grad = _potential_with_grad(x[..., :d], x[..., d:], drift, A, b, P, np.asarray(dt, dtype=float))
    EV = V @ wts
    g_mean = wts @ grad
    e_xi_grad = (wts[:, None] * xi).T @ grad
    g_cov = 0.5 * symmetrize(np.linalg.solve(np.swapaxes(L, 1, 2), e_xi_grad))
    g1 = g_mean - 2.0 * np.einsum("mij,mj->mi", g_cov, pair_mean)
    return EV, g1, g_cov


def posterior_linearization(mean, cov, drift: DriftFunction, order: int | None = None):
    """Affine fit ``A x + b`` of the drift in expected squared error under N(mean, cov).

    ``A = Psi^T S^{-1}`` with ``Psi = E[(x - m) f(x)^T]`` and ``b = E f - A m``.
    """
    d = mean.shape[1]
    order = default_order(d) if order is None else order
    _check_covariances(cov)
    x, _, w = gaussian_nodes(mean, cov, (order,) * d)
    f = drift.eval(x)
    Ef = np.einsum("n,knd->kd", w, f)
    Psi = np.einsum("n,kni,knj->kij", w, x - mean[:, None, :], f)
    A = np.swapaxes(np.linalg.solve(cov, Psi), 1, 2)
    b = Ef - np.einsum("kij,kj->ki", A, mean)
    return A, b


def _linearization_dtheta(mean, cov, drift: DriftFunction, order: int):
    """Derivatives (p, K, d, d) and (p, K, d) of the linearization w.r.t. theta."""
    d = mean.shape[1]
    x, _, w = gaussian_nodes(mean, cov, (order,) * d)
    g = drift.eval_dtheta(x)  # (K, n, d, p)
    dPsi = np.einsum("n,kni,knjp->pkij", w, x - mean[:, None, :], g)
    dA = np.swapaxes(np.linalg.solve(cov[None], dPsi), -1, -2)
    dEf = np.einsum("n,knjp->pkj", w, g)
    db = dEf - np.einsum("pkij,kj->pki", dA, mean)
    return dA, db


def _check_covariances(cov) -> None:
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise ConditioningError("marginal covariance is singular in posterior linearization") from exc


def update_sparse_sites(sites: SparseSites, target: SparseSites, rho: float) -> SparseSites:
    """Damped step toward the current expected-log-likelihood gradients."""
    return sites.blend(target, rho)


def update_dense_sites(sites: DenseSites, target: DenseSites, rho: float) -> DenseSites:
    """Damped step toward the current expected-potential gradients."""
    return sites.blend(target, rho)


def rebase_dense_sites(
    dense: DenseSites, old_chain: DriftParamsLGSSM, new_chain: DriftParamsLGSSM, dt: np.ndarray
) -> DenseSites:
    """Re-express dense sites against a new surrogate without moving the posterior."""
    diff = _transition_pair_params(old_chain) - _transition_pair_params(new_chain)
    return dense + DenseSites(diff.lin / dt[:, None], diff.quad / dt[:, None, None])


# --------------------------------------------------------------------------
# The problem bundle
# --------------------------------------------------------------------------


@dataclass
class _Problem:
    process: DiffusionProcess
    dataset: Dataset
    likelihood: Likelihood
    grid: TimeGrid
    order: int
    nodes: np.ndarray = field(init=False)
    projections: np.ndarray = field(init=False)

    def __post_init__(self):
        self.process.validate()
        if self.dataset.dim != self.process.dim:
            raise ParameterError("projection dimension differs from state dimension")
        self.nodes = observation_nodes(self.grid, self.dataset)
        self.projections = np.ascontiguousarray(self.dataset.projections())

    @property
    def dt(self) -> np.ndarray:
        return self.grid.dt

    @property
    def n_states(self) -> int:
        return self.grid.times.size

    def assemble(self, eta_L: NaturalParams, sparse: SparseSites, dense: DenseSites) -> VariationalPosterior:
        eta = eta_L + embed_sparse(sparse, self.projections, self.nodes, self.n_states) + embed_dense(dense, self.dt)
        return VariationalPosterior(eta, smooth(eta))

    def observation_terms(self, marginals: MarginalStats) -> tuple[float, SparseSites]:
        H = self.projections
        m_u = np.einsum("ni,ni->n", H, marginals.mean[self.nodes])
        v_u = np.einsum("ni,nij,nj->n", H, marginals.cov[self.nodes], H)
        ell = float(np.sum(self.likelihood.expected_log_density(self.dataset.values, m_u, v_u)))
        alpha, beta = self.likelihood.grads(self.dataset.values, m_u, v_u)
        t1, t2 = grads_to_site(alpha, beta, m_u)
        return ell, SparseSites(t1, t2)

    def potential_terms(self, marginals: MarginalStats, lin: LinearizedPrior, drift=None):
        drift = self.process.drift if drift is None else drift
        mean, cov = marginals.pair_moments()
        EV, g1, G2 = expected_V_grads(mean, cov, drift, lin.A, lin.b, self.process.Qc, self.dt, self.order)
        return EV, DenseSites(g1, G2)

    def elbo_parts(self, post: VariationalPosterior, lin: LinearizedPrior, drift=None):
        """(elbo, sparse target, dense target) at the posterior ``post``."""
        ell, sparse_t = self.observation_terms(post.marginals)
        EV, dense_t = self.potential_terms(post.marginals, lin, drift)
        kl = kl_markov(post.marginals, lin.chain(self.process, self.grid))
        return -kl + ell + float(np.dot(self.dt, EV)), sparse_t, dense_t

    def linearize(self, marginals: MarginalStats, drift=None) -> LinearizedPrior:
        drift = self.process.drift if drift is None else drift
        A, b = posterior_linearization(marginals.mean[:-1], marginals.cov[:-1], drift, self.order)
        return LinearizedPrior(A, b)


def _problem(process, dataset, likelihood, grid, order) -> _Problem:
    order = default_order(process.dim) if order is None else order
    return _Problem(process, dataset, likelihood, grid, order)


def assemble_posterior(
    process: DiffusionProcess,
    grid: TimeGrid,
    dataset: Dataset,
    linearized: LinearizedPrior,
    sparse: SparseSites,
    dense: DenseSites,
) -> VariationalPosterior:
    """Posterior natural parameters from the surrogate and both site families."""
    prob = _Problem(process, dataset, _NullLikelihood(), grid, 1)
    return prob.assemble(linearized.natural(process, grid), sparse, dense)


class _NullLikelihood(Likelihood):
    def log_density(self, y, u):
        return np.zeros_like(np.asarray(u, dtype=float))

    def expected_log_density(self, y, m, v):
        return np.zeros_like(np.asarray(m, dtype=float))

    def grads(self, y, m, v):
        z = np.zeros_like(np.asarray(m, dtype=float))
        return z, z.copy()


def elbo(
    posterior: VariationalPosterior,
    process: DiffusionProcess,
    linearized: LinearizedPrior,
    dataset: Dataset,
    likelihood: Likelihood,
    grid: TimeGrid,
    order: int | None = None,
) -> float:
    """-KL(q || p_L) + sum E log p(y | x) + sum dt E[V].

    Equals ``E_q log p(x) + E_q log p(y | x) + H(q)`` for the Euler-Maruyama
    prior, whatever surrogate is used.
    """
    return _problem(process, dataset, likelihood, grid, order).elbo_parts(posterior, linearized)[0]


# --------------------------------------------------------------------------
# Inference loop
# --------------------------------------------------------------------------


def _relative_change_small(new: float, old: float, tol: float) -> bool:
    if not math.isfinite(tol):
        return True
    return abs(new - old) <= tol * abs(old)


def infer(
    process: DiffusionProcess,
    dataset: Dataset,
    likelihood: Likelihood,
    grid: TimeGrid,
    config: CVIConfig = CVIConfig(),
    init: CVIState | None = None,
) -> CVIResult:
    """Alternate damped site updates with posterior linearization of the prior."""
    if not 0.0 < config.rho <= 1.0:
        raise ParameterError("rho must lie in (0, 1]")
    prob = _problem(process, dataset, likelihood, grid, config.order)
    d = process.dim
    M = grid.n_intervals
    if init is None:
        lin = LinearizedPrior.initial(config.init_surrogate, process, grid)
        sparse = SparseSites.zeros(dataset.n)
        dense = DenseSites.zeros(M, d)
    else:
        lin, sparse, dense = init.linearized, init.sparse, init.dense
    eta_L = lin.natural(process, grid)
    post = prob.assemble(eta_L, sparse, dense)
    value, sparse_t, dense_t = prob.elbo_parts(post, lin)
    trace = Trace()
    trace.record(value)
    n_inner = 0
    violations = 0
    converged = False
    inner_budget = config.max_inner
    if config.relinearize_every:
        inner_budget = min(inner_budget, config.relinearize_every)
    outer = 0
    for outer in range(1, config.max_outer + 1):
        start = value
        steps = 0
        for _ in range(inner_budget):
            rho = config.rho
            for _attempt in range(config.max_halvings + 1):
                new_sparse = update_sparse_sites(sparse, sparse_t, rho)
                new_dense = update_dense_sites(dense, dense_t, rho)
                try:
                    new_post = prob.assemble(eta_L, new_sparse, new_dense)
                    break
                except PosteriorValidityError:
                    rho *= 0.5
            else:
                raise DivergenceError(
                    f"posterior lost positive definiteness after {config.max_halvings} step halvings"
                )
            sparse, dense, post = new_sparse, new_dense, new_post
            new_value, sparse_t, dense_t = prob.elbo_parts(post, lin)
            if not math.isfinite(new_value):
                raise DivergenceError("ELBO became non-finite")
            if new_value < value - config.monotone_slack * max(1.0, abs(value)):
                violations += 1
                log.debug("ELBO decreased from %.6g to %.6g", value, new_value)
            previous, value = value, new_value
            trace.record(value)
            n_inner += 1
            steps += 1
            if _relative_change_small(value, previous, config.tol):
                break
        if _relative_change_small(value, start, config.tol) or steps == 0:
            converged = True
            break
        if outer == config.max_outer:
            break
        new_lin = prob.linearize(post.marginals)
        dense = rebase_dense_sites(dense, lin.chain(process, grid), new_lin.chain(process, grid), prob.dt)
        lin = new_lin
        eta_L = lin.natural(process, grid)
        post = prob.assemble(eta_L, sparse, dense)
        value, sparse_t, dense_t = prob.elbo_parts(post, lin)
    return CVIResult(post, sparse, dense, lin, trace, converged, n_inner, outer, violations)


# --------------------------------------------------------------------------
# Learning
# --------------------------------------------------------------------------


def _chain_natural_tangent(chain: DriftParamsLGSSM, dA_hat, db_hat) -> NaturalParams:
    """Derivative of the chain's natural parameters along (dA_hat, db_hat), Q fixed."""
    A, b = chain.A_hat, chain.b_hat
    d = chain.dim
    M = chain.n_intervals
    Qinv = np.linalg.inv(chain.Q_hat)
    At, dAt = np.swapaxes(A, 1, 2), np.swapaxes(dA_hat, 1, 2)
    dh = np.zeros((M + 1, d))
    dJd = np.zeros((M + 1, d, d))
    Qdb = np.einsum("nij,nj->ni", Qinv, db_hat)
    dh[1:] += Qdb
    dh[:-1] -= np.einsum("nij,nj->ni", dAt @ Qinv, b) + np.einsum("nij,nj->ni", At, Qdb)
    cross = dAt @ Qinv @ A
    dJd[:-1] += cross + np.swapaxes(cross, 1, 2)
    return NaturalParams(dh, dJd, -Qinv @ dA_hat)


def _explicit_theta_grad(prob: _Problem, marginals: MarginalStats, drift: DriftFunction) -> np.ndarray:
    """``E_q[d/dtheta log p_theta(x)]`` for the Euler-Maruyama prior."""
    d = prob.process.dim
    P = np.linalg.inv(prob.process.Qc)
    mean, cov = marginals.pair_moments()
    x, _, w = gaussian_nodes(mean, cov, (prob.order,) * d + (NEXT_STATE_ORDER,) * d)
    z, nxt = x[..., :d], x[..., d:]
    f = drift.eval(z)
    g = drift.eval_dtheta(z)  # (M, n, d, p)
    resid = (nxt - z - f * prob.dt[:, None, None]) @ P
    return np.einsum("n,mndp,mnd->p", w, g, resid)


@dataclass(frozen=True)
class LearningObjective:
    value: float
    grad: np.ndarray
    posterior: VariationalPosterior
    linearized: LinearizedPrior


def learning_objective(
    theta,
    process: DiffusionProcess,
    dataset: Dataset,
    likelihood: Likelihood,
    grid: TimeGrid,
    sparse: SparseSites,
    dense: DenseSites,
    anchor: MarginalStats,
    order: int | None = None,
    with_grad: bool = True,
) -> LearningObjective:
    """ELBO of ``eta_L(theta) + sites`` with ``p_L(theta)`` linearized under ``anchor``.

    Sites are held fixed while theta moves. The gradient is the explicit
    prior-score term plus the response of the posterior through ``eta_L``,
    obtained from one tangent smoothing pass along the fixed-point residual.
    """
    drift = process.drift.with_params(theta)
    proc = process.with_drift(drift)
    prob = _problem(proc, dataset, likelihood, grid, order)
    lin = prob.linearize(anchor, drift)
    chain = lin.chain(proc, grid)
    eta_L = drift_to_natural(chain)
    post = prob.assemble(eta_L, sparse, dense)
    value, sparse_t, dense_t = prob.elbo_parts(post, lin, drift)
    if not with_grad:
        return LearningObjective(value, np.full(drift.theta.size, np.nan), post, lin)
    residual = embed_sparse(sparse_t - sparse, prob.projections, prob.nodes, prob.n_states) + embed_dense(
        dense_t - dense, prob.dt
    )
    M, dM = smooth_with_tangent(post.eta, residual)
    dmu = expectation_tangent(M, dM)
    grad = _explicit_theta_grad(prob, post.marginals, drift)
    dA, db = _linearization_dtheta(anchor.mean[:-1], anchor.cov[:-1], drift, prob.order)
    dt = prob.dt
    for j in range(grad.size):
        d_eta = _chain_natural_tangent(chain, dA[j] * dt[:, None, None], db[j] * dt[:, None])
        grad[j] += inner(d_eta, dmu)
    return LearningObjective(value, grad, post, lin)


@dataclass(frozen=True)
class LearnConfig:
    lr: float = 0.1
    n_cycles: int = 100
    m_steps: int = 1
    tol: float = 1e-6
    params: tuple[str, ...] | None = None
    infer: CVIConfig = CVIConfig()


@dataclass
class LearnResult:
    theta_trace: np.ndarray  # (cycles + 1, p)
    objective_trace: list[float]
    process: DiffusionProcess
    inference: CVIResult
    converged: bool


def free_mask(drift: DriftFunction, params) -> np.ndarray:
    if params is None:
        return np.ones(drift.theta.size, dtype=bool)
    unknown = set(params) - set(drift.param_names)
    if unknown:
        raise ParameterError(f"unknown parameters {sorted(unknown)}; drift has {drift.param_names}")
    return np.array([n in params for n in drift.param_names])


def learn(
    process: DiffusionProcess,
    dataset: Dataset,
    likelihood: Likelihood,
    grid: TimeGrid,
    config: LearnConfig = LearnConfig(),
) -> LearnResult:
    """Variational EM whose M-step moves theta with the sites held fixed."""
    mask = free_mask(process.drift, config.params)
    theta = process.drift.theta.copy()
    opt = Adam(config.lr)
    thetas = [theta.copy()]
    objectives: list[float] = []
    state: CVIState | None = None
    converged = False
    result = None
    for _cycle in range(config.n_cycles):
        proc = process.with_drift(process.drift.with_params(theta))
        prob = _problem(proc, dataset, likelihood, grid, config.infer.order)
        result = infer(proc, dataset, likelihood, grid, config.infer, init=state)
        anchor = result.posterior.marginals
        # make p_L(theta) the linearization under the anchor before moving theta
        lin = prob.linearize(anchor)
        dense = rebase_dense_sites(
            result.dense, result.linearized.chain(proc, grid), lin.chain(proc, grid), prob.dt
        )
        sparse = result.sparse
        new_theta = theta
        for _ in range(config.m_steps):
            obj = learning_objective(
                new_theta, process, dataset, likelihood, grid, sparse, dense, anchor, config.infer.order
            )
            if not np.all(np.isfinite(obj.grad)):
                raise DivergenceError(f"non-finite theta gradient {obj.grad} at theta={new_theta}")
            new_theta = np.where(mask, opt.step(new_theta, np.where(mask, obj.grad, 0.0)), new_theta)
        objectives.append(obj.value)
        delta = np.max(np.abs(new_theta - theta)) if theta.size else 0.0
        theta = new_theta
        thetas.append(theta.copy())
        state = CVIState(sparse, dense, obj.linearized)
        if delta < config.tol:
            converged = True
            break
    final_proc = process.with_drift(process.drift.with_params(theta))
    return LearnResult(np.array(thetas), objectives, final_proc, result, converged)


__all__ = [
    "CVIConfig",
    "CVIResult",
    "CVIState",
    "DenseSites",
    "LearnConfig",
    "LearnResult",
    "LinearizedPrior",
    "SparseSites",
    "VariationalPosterior",
    "assemble_posterior",
    "elbo",
    "embed_dense",
    "embed_sparse",
    "expected_V_grads",
    "infer",
    "learn",
    "learning_objective",
    "observation_nodes",
    "posterior_linearization",
    "potential_V",
    "rebase_dense_sites",
    "update_dense_sites",
    "update_sparse_sites",
]
