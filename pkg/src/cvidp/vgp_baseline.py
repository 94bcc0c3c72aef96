"""Fixed-point variational Gaussian process smoothing with a linear drift posterior.

The posterior is the process ``dx = (A_t x + b_t) dt + dB`` discretized with
Euler-Maruyama on the same grid as the prior, so its marginals follow

    m_{k+1} = (I + A_k dt) m_k + b_k dt
    S_{k+1} = (I + A_k dt) S_k (I + A_k dt)^T + Qc dt

(the explicit Euler step of the moment ODEs plus the O(dt^2) term that keeps
the recursion an exact Gaussian chain). The objective is

    sum_i E log p(y_i | x) - KL(q(x_0) || p(x_0)) - sum_k dt E_k,
    E_k = 1/2 E || A_k x + b_k - f(x) ||^2_{Qc^{-1}}   (x ~ N(m_k, S_k)),

which coincides with the site-based ELBO for the same chain. The backward
sweep propagates the costates lam_k = dL/dm_k and Psi_k = dL/dS_k, and the
drift update solves the stationarity conditions of the objective w.r.t.
(A_k, b_k) given those costates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .cvi_dp import LinearizedPrior, default_order, free_mask, observation_nodes
from .diffusion_models import DiffusionProcess, DriftFunction
from .errors import DivergenceError, ParameterError
from .lgssm_core import MarginalStats, TimeGrid, symmetrize
from .observation_models import Dataset, Likelihood
from .optim import Adam
from .quadrature import factored_nodes
from .tracing import Trace


@dataclass
class VGPState:
    A: np.ndarray  # (M, d, d)
    b: np.ndarray  # (M, d)
    m0: np.ndarray
    S0: np.ndarray
    marginals: MarginalStats | None = None
    lam: np.ndarray | None = None  # (M+1, d)
    Psi: np.ndarray | None = None  # (M+1, d, d)

    def copy(self) -> "VGPState":
        return VGPState(self.A.copy(), self.b.copy(), self.m0.copy(), self.S0.copy(), self.marginals, self.lam, self.Psi)


@dataclass(frozen=True)
class VGPConfig:
    omega: float = 0.1
    max_iter: int = 1000
    tol: float = 1e-6
    order: int | None = None
    divergence_window: int = 20
    update_initial: bool = True
    init_surrogate: str = "point"


@dataclass
class VGPResult:
    state: VGPState
    trace: Trace
    converged: bool
    n_iter: int

    @property
    def marginals(self) -> MarginalStats:
        return self.state.marginals

    @property
    def elbo(self) -> float:
        return self.trace.records[-1].elbo


def initial_state(process: DiffusionProcess, grid: TimeGrid, kind: str = "point") -> VGPState:
    """Drift from the starting surrogate (see ``LinearizedPrior.initial``), initial marginal equal to the prior's."""
    lin = LinearizedPrior.initial(kind, process, grid)
    return VGPState(lin.A, lin.b, process.m0.copy(), process.S0.copy())


def forward_sweep(state: VGPState, process: DiffusionProcess, grid: TimeGrid) -> MarginalStats:
    """Propagate the marginals of the linear posterior process along the grid."""
    dt = grid.dt
    d = process.dim
    A_hat = np.eye(d) + state.A * dt[:, None, None]
    b_hat = state.b * dt[:, None]
    Q_hat = process.Qc * dt[:, None, None]
    m, S, C, fail = _kernels.chain_moments(
        np.ascontiguousarray(A_hat), np.ascontiguousarray(b_hat), np.ascontiguousarray(Q_hat),
        np.ascontiguousarray(state.m0, dtype=float), np.ascontiguousarray(state.S0, dtype=float),
    )
    bad = ~(np.all(np.isfinite(m), axis=1) & np.all(np.isfinite(S), axis=(1, 2)))
    if bad.any():
        fail = int(np.argmax(bad)) if fail < 0 else min(fail, int(np.argmax(bad)))
    if fail >= 0:
        raise DivergenceError(f"marginal covariance blew up at time index {fail} (t={grid.times[fail]:.6g})")
    return MarginalStats(m, S, C)


@dataclass(frozen=True)
class _Energy:
    value: np.ndarray  # (M,)
    grad_m: np.ndarray  # (M, d)
    grad_S: np.ndarray  # (M, d, d)
    Ef: np.ndarray  # (M, d)
    EJ: np.ndarray  # (M, d, d)


def _energy(marginals: MarginalStats, state: VGPState, drift: DriftFunction, P: np.ndarray, order: int) -> _Energy:
    """E_k = 1/2 E||A x + b - f(x)||^2_P under N(m_k, S_k), with its (m, S) gradients."""
    mean, cov = marginals.mean[:-1], marginals.cov[:-1]
    d = mean.shape[1]
    x, xi, w, L = factored_nodes(mean, cov, (order,) * d)
    f = drift.eval(x)
    J = drift.jacobian(x)
    u = np.einsum("kij,knj->kni", state.A, x) + state.b[:, None, :] - f
    Pu = u @ P
    value = 0.5 * np.einsum("n,kn->k", w, np.sum(u * Pu, axis=-1))
    grad = np.einsum("knji,knj->kni", state.A[:, None] - J, Pu)
    grad_m = np.einsum("n,kni->ki", w, grad)
    e_xi_grad = np.einsum("n,nj,kni->kji", w, xi, grad)
    grad_S = 0.5 * symmetrize(np.linalg.solve(np.swapaxes(L, 1, 2), e_xi_grad))
    Ef = np.einsum("n,kni->ki", w, f)
    EJ = np.einsum("n,knij->kij", w, J)
    return _Energy(value, grad_m, grad_S, Ef, EJ)


def _gauss_kl(m1, S1, m2, S2) -> float:
    d = m1.size
    S2i = np.linalg.inv(S2)
    diff = m2 - m1
    return 0.5 * float(
        np.trace(S2i @ S1) - d + diff @ S2i @ diff + np.linalg.slogdet(S2)[1] - np.linalg.slogdet(S1)[1]
    )


class _Problem:
    def __init__(self, process, dataset, likelihood, grid, order):
        process.validate()
        self.process = process
        self.dataset = dataset
        self.likelihood = likelihood
        self.grid = grid
        self.order = default_order(process.dim) if order is None else order
        self.nodes = observation_nodes(grid, dataset)
        self.H = np.ascontiguousarray(dataset.projections())
        self.P = symmetrize(np.linalg.inv(process.Qc))

    def observation_terms(self, marginals: MarginalStats):
        H = self.H
        m_u = np.einsum("ni,ni->n", H, marginals.mean[self.nodes])
        v_u = np.einsum("ni,nij,nj->n", H, marginals.cov[self.nodes], H)
        ell = float(np.sum(self.likelihood.expected_log_density(self.dataset.values, m_u, v_u)))
        alpha, beta = self.likelihood.grads(self.dataset.values, m_u, v_u)
        return ell, alpha, beta

    def evaluate(self, state: VGPState, drift: DriftFunction | None = None):
        drift = self.process.drift if drift is None else drift
        energy = _energy(state.marginals, state, drift, self.P, self.order)
        ell, alpha, beta = self.observation_terms(state.marginals)
        kl0 = _gauss_kl(state.m0, state.S0, self.process.m0, self.process.S0)
        value = ell - kl0 - float(np.dot(self.grid.dt, energy.value))
        return value, energy, alpha, beta


def elbo(state: VGPState, process, dataset, likelihood, grid, order=None) -> float:
    """Objective of the linear posterior process; marginals are recomputed."""
    prob = _Problem(process, dataset, likelihood, grid, order)
    state = state.copy()
    state.marginals = forward_sweep(state, process, grid)
    return prob.evaluate(state)[0]


def backward_sweep(state: VGPState, prob: _Problem, energy: _Energy, alpha, beta) -> tuple[np.ndarray, np.ndarray]:
    """Costates from the terminal condition lam = 0, Psi = 0 after the last node.

    Observation gradients enter as jumps at their nodes: ``alpha h`` on lam
    and ``beta h h^T`` on Psi (``beta = -1 / (2 sigma^2)`` for Gaussian noise).
    The energy gradients enter on every interval scaled by ``-dt``.
    """
    dt = prob.grid.dt
    N = dt.size + 1
    d = prob.process.dim
    grad_m = np.zeros((N, d))
    grad_S = np.zeros((N, d, d))
    np.add.at(grad_m, prob.nodes, alpha[:, None] * prob.H)
    np.add.at(grad_S, prob.nodes, beta[:, None, None] * np.einsum("ni,nj->nij", prob.H, prob.H))
    grad_m[:-1] -= dt[:, None] * energy.grad_m
    grad_S[:-1] -= dt[:, None, None] * energy.grad_S
    A_hat = np.eye(d) + state.A * dt[:, None, None]
    lam, Psi = _kernels.costate_recursion(np.ascontiguousarray(A_hat), grad_m, grad_S)
    if not (np.all(np.isfinite(lam)) and np.all(np.isfinite(Psi))):
        raise DivergenceError("non-finite costates in the backward sweep")
    return lam, Psi


def drift_update(state: VGPState, prob: _Problem, energy: _Energy, omega: float) -> VGPState:
    """Damped solution of the stationarity conditions for (A_k, b_k).

    With next-node costates (lam, Psi):
        A = (I - 2 dt Qc Psi)^{-1} (E[df/dx] + 2 Qc Psi)
        b = E[f] - A m + Qc lam
    """
    if not 0.0 <= omega <= 1.0:
        raise ParameterError("omega must lie in [0, 1]")
    dt = prob.grid.dt
    d = prob.process.dim
    Qc = prob.process.Qc
    lam_next = state.lam[1:]
    QPsi = Qc @ state.Psi[1:]
    lhs = np.eye(d) - 2.0 * dt[:, None, None] * QPsi
    A_target = np.linalg.solve(lhs, energy.EJ + 2.0 * QPsi)
    A = (1.0 - omega) * state.A + omega * A_target
    m = state.marginals.mean[:-1]
    b_target = energy.Ef - np.einsum("kij,kj->ki", A, m) + lam_next @ Qc.T
    b = (1.0 - omega) * state.b + omega * b_target
    new = state.copy()
    new.A, new.b = A, b
    return new


def initial_update(state: VGPState, prob: _Problem, omega: float) -> VGPState:
    """Damped stationary point of the objective in (m_0, S_0); skipped if not PD."""
    p = prob.process
    m_target = p.m0 + p.S0 @ state.lam[0]
    prec = symmetrize(np.linalg.inv(p.S0) - 2.0 * state.Psi[0])
    try:
        np.linalg.cholesky(prec)
    except np.linalg.LinAlgError:
        return state
    S_target = symmetrize(np.linalg.inv(prec))
    new = state.copy()
    new.m0 = (1.0 - omega) * state.m0 + omega * m_target
    new.S0 = symmetrize((1.0 - omega) * state.S0 + omega * S_target)
    return new


def infer(
    process: DiffusionProcess,
    dataset: Dataset,
    likelihood: Likelihood,
    grid: TimeGrid,
    config: VGPConfig = VGPConfig(),
    init: VGPState | None = None,
) -> VGPResult:
    """Forward sweep, backward sweep and damped drift update until the ELBO settles."""
    prob = _Problem(process, dataset, likelihood, grid, config.order)
    state = initial_state(process, grid, config.init_surrogate) if init is None else init.copy()
    state.marginals = forward_sweep(state, process, grid)
    value, energy, alpha, beta = prob.evaluate(state)
    trace = Trace()
    trace.record(value)
    decreasing = 0
    converged = False
    it = 0
    for it in range(1, config.max_iter + 1):
        state.lam, state.Psi = backward_sweep(state, prob, energy, alpha, beta)
        state = drift_update(state, prob, energy, config.omega)
        if config.update_initial:
            state = initial_update(state, prob, config.omega)
        state.marginals = forward_sweep(state, process, grid)
        new_value, energy, alpha, beta = prob.evaluate(state)
        if not math.isfinite(new_value):
            raise DivergenceError("ELBO became non-finite")
        trace.record(new_value)
        decreasing = decreasing + 1 if new_value < value else 0
        if decreasing >= config.divergence_window:
            raise DivergenceError(f"ELBO decreased for {decreasing} consecutive iterations")
        previous, value = value, new_value
        if abs(value - previous) <= config.tol * abs(previous):
            converged = True
            break
    else:
        it = config.max_iter
    if state.lam is None or it == 0:
        state.lam, state.Psi = backward_sweep(state, prob, energy, alpha, beta)
    return VGPResult(state, trace, converged, it)


# --------------------------------------------------------------------------
# Standard variational EM
# --------------------------------------------------------------------------


def theta_gradient(state: VGPState, process, dataset, likelihood, grid, theta, order=None) -> tuple[float, np.ndarray]:
    """Objective and its theta-gradient with the posterior process held fixed."""
    drift = process.drift.with_params(theta)
    prob = _Problem(process.with_drift(drift), dataset, likelihood, grid, order)
    value = prob.evaluate(state, drift)[0]
    mean, cov = state.marginals.mean[:-1], state.marginals.cov[:-1]
    d = mean.shape[1]
    x, _, w, _ = factored_nodes(mean, cov, (prob.order,) * d)
    u = np.einsum("kij,knj->kni", state.A, x) + state.b[:, None, :] - drift.eval(x)
    g = drift.eval_dtheta(x)  # (k, n, d, p)
    per_interval = np.einsum("n,kndp,kne->kp", w, g, u @ prob.P)
    return value, grid.dt @ per_interval


@dataclass(frozen=True)
class VGPLearnConfig:
    lr: float = 0.01
    n_cycles: int = 100
    m_steps: int = 1
    tol: float = 1e-6
    params: tuple[str, ...] | None = None
    infer: VGPConfig = VGPConfig(max_iter=20)


@dataclass
class VGPLearnResult:
    theta_trace: np.ndarray
    objective_trace: list[float]
    process: DiffusionProcess
    inference: VGPResult
    converged: bool


def learn(process, dataset, likelihood, grid, config: VGPLearnConfig = VGPLearnConfig()) -> VGPLearnResult:
    """Variational EM with the posterior held in drift form during the M-step."""
    mask = free_mask(process.drift, config.params)
    theta = process.drift.theta.copy()
    opt = Adam(config.lr)
    thetas = [theta.copy()]
    objectives: list[float] = []
    state = None
    converged = False
    result = None
    for _cycle in range(config.n_cycles):
        proc = process.with_drift(process.drift.with_params(theta))
        result = infer(proc, dataset, likelihood, grid, config.infer, init=state)
        state = result.state
        new_theta = theta
        for _ in range(config.m_steps):
            value, grad = theta_gradient(state, process, dataset, likelihood, grid, new_theta, config.infer.order)
            if not np.all(np.isfinite(grad)):
                raise DivergenceError(f"non-finite theta gradient {grad} at theta={new_theta}")
            new_theta = np.where(mask, opt.step(new_theta, np.where(mask, grad, 0.0)), new_theta)
        objectives.append(value)
        delta = np.max(np.abs(new_theta - theta)) if theta.size else 0.0
        theta = new_theta
        thetas.append(theta.copy())
        if delta < config.tol:
            converged = True
            break
    final = process.with_drift(process.drift.with_params(theta))
    return VGPLearnResult(np.array(thetas), objectives, final, result, converged)
