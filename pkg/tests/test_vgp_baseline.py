import numpy as np
import pytest
from conftest import make_problem
from oracles import kalman_smoother

from cvidp import cvi_dp
from cvidp import vgp_baseline as vgp
from cvidp.cvi_dp import LinearizedPrior, VariationalPosterior
from cvidp.diffusion_models import DiffusionProcess, DoubleWellDrift, OUDrift
from cvidp.errors import DivergenceError, ParameterError
from cvidp.lgssm_core import TimeGrid, drift_to_marginals, drift_to_natural
from cvidp.observation_models import Dataset, GaussianLikelihood


def _no_data(d=1):
    return Dataset(np.zeros(0), np.zeros(0), np.eye(d)[0])


def _state(A, b, m0, S0):
    return vgp.VGPState(np.asarray(A, float), np.asarray(b, float), np.asarray(m0, float), np.asarray(S0, float))


def _grid(t_end, dt):
    return TimeGrid(np.linspace(0.0, t_end, int(round(t_end / dt)) + 1), np.zeros(0))


# --------------------------------------------------------------------------
# Forward sweep
# --------------------------------------------------------------------------


def test_forward_zero_drift_variance_grows_linearly():
    grid = _grid(2.0, 0.01)
    M = grid.n_intervals
    proc = DiffusionProcess(OUDrift([0.0]), np.eye(1), np.zeros(1), np.eye(1))
    marg = vgp.forward_sweep(_state(np.zeros((M, 1, 1)), np.zeros((M, 1)), [0.0], [[1.0]]), proc, grid)
    np.testing.assert_allclose(marg.cov[:, 0, 0], 1.0 + grid.times, atol=1e-12)


def test_forward_ou_mean_close_to_exponential():
    theta, grid = 1.5, _grid(3.0, 1e-3)
    M = grid.n_intervals
    proc = DiffusionProcess(OUDrift([theta]), np.eye(1), np.ones(1), np.eye(1))
    marg = vgp.forward_sweep(_state(np.full((M, 1, 1), -theta), np.zeros((M, 1)), [1.0], [[1.0]]), proc, grid)
    assert np.max(np.abs(marg.mean[:, 0] - np.exp(-theta * grid.times))) < 1e-2


def test_forward_constant_drift_is_exact():
    grid = _grid(1.0, 0.1)
    M = grid.n_intervals
    proc = DiffusionProcess(OUDrift([0.0]), np.eye(1), np.zeros(1), np.eye(1))
    marg = vgp.forward_sweep(_state(np.zeros((M, 1, 1)), np.full((M, 1), 0.3), [0.5], [[1.0]]), proc, grid)
    np.testing.assert_allclose(marg.mean[:, 0], 0.5 + 0.3 * grid.times, atol=1e-14)


def test_forward_blowup_names_time_index():
    grid = _grid(1.0, 0.1)
    M = grid.n_intervals
    proc = DiffusionProcess(OUDrift([0.0]), np.eye(1), np.zeros(1), np.eye(1))
    with pytest.raises(DivergenceError, match="time index"):
        vgp.forward_sweep(_state(np.full((M, 1, 1), 1e200), np.zeros((M, 1)), [0.0], [[1.0]]), proc, grid)


# --------------------------------------------------------------------------
# Backward sweep
# --------------------------------------------------------------------------


def _costates(process, dataset, lik, grid, state=None):
    prob = vgp._Problem(process, dataset, lik, grid, None)
    state = vgp.initial_state(process, grid) if state is None else state.copy()
    state.marginals = vgp.forward_sweep(state, process, grid)
    _, energy, alpha, beta = prob.evaluate(state)
    state.lam, state.Psi = vgp.backward_sweep(state, prob, energy, alpha, beta)
    return state, prob, energy


def test_costates_vanish_without_data_for_matched_drift():
    grid = _grid(2.0, 0.01)
    proc = DiffusionProcess(OUDrift([0.8]), np.eye(1), np.zeros(1), np.eye(1))
    state, _, _ = _costates(proc, _no_data(), GaussianLikelihood(0.1), grid)
    np.testing.assert_array_equal(state.lam, 0.0)
    np.testing.assert_array_equal(state.Psi, 0.0)


def test_single_observation_jump():
    sigma2 = 0.04
    grid = TimeGrid.with_observations(0.0, 2.0, 0.01, [1.0])
    node = int(grid.obs_index[0])
    proc = DiffusionProcess(OUDrift([0.8]), np.eye(1), np.zeros(1), np.eye(1))
    data = Dataset([1.0], [0.3], np.ones(1))
    state, _, _ = _costates(proc, data, GaussianLikelihood(sigma2), grid)
    # d/dS of E log N(y; x, sigma2) is -1 / (2 sigma2), independent of the marginal
    assert state.Psi[node, 0, 0] == pytest.approx(-1.0 / (2 * sigma2), rel=1e-14)
    m = state.marginals.mean[node, 0]
    assert state.lam[node, 0] == pytest.approx((0.3 - m) / sigma2, rel=1e-12)
    np.testing.assert_array_equal(state.Psi[node + 1 :], 0.0)
    assert state.lam[-1, 0] == 0.0 and state.Psi[-1, 0, 0] == 0.0


def test_costates_are_objective_gradients():
    process, dataset, lik, grid = make_problem(DoubleWellDrift([4.0, 1.0]), 1.0, 1.0, 4, 0.05, seed=1)
    base = vgp.initial_state(process, grid)
    rng = np.random.default_rng(0)
    base.A = base.A + 0.3 * rng.normal(size=base.A.shape)
    base.b = base.b + 0.3 * rng.normal(size=base.b.shape)
    state, prob, energy = _costates(process, dataset, lik, grid, base)
    dt = grid.dt
    P = prob.P
    k = 7
    m, S = state.marginals.mean[k], state.marginals.cov[k]
    A_hat = np.eye(1) + state.A[k] * dt[k]
    resid = state.A[k] @ m + state.b[k] - energy.Ef[k]
    grad_b = dt[k] * (state.lam[k + 1] - P @ resid)
    # E[(A x + b - f) x^T] = resid m^T + (A - E[df/dx]) S
    grad_A = dt[k] * (
        np.outer(state.lam[k + 1], m)
        + 2.0 * state.Psi[k + 1] @ A_hat @ S
        - P @ (np.outer(resid, m) + (state.A[k] - energy.EJ[k]) @ S)
    )
    eps = 1e-6

    def value(dA=0.0, db=0.0):
        s = base.copy()
        s.A = s.A.copy()
        s.b = s.b.copy()
        s.A[k] += dA
        s.b[k] += db
        return vgp.elbo(s, process, dataset, lik, grid)

    assert grad_b[0] == pytest.approx((value(db=eps) - value(db=-eps)) / (2 * eps), rel=1e-5)
    assert grad_A[0, 0] == pytest.approx((value(dA=eps) - value(dA=-eps)) / (2 * eps), rel=1e-5)


# --------------------------------------------------------------------------
# Drift update
# --------------------------------------------------------------------------


def test_zero_damping_leaves_drift_unchanged():
    process, dataset, lik, grid = make_problem(DoubleWellDrift([4.0, 1.0]), 1.0, 2.0, 5, 0.05)
    state, prob, energy = _costates(process, dataset, lik, grid)
    new = vgp.drift_update(state, prob, energy, 0.0)
    np.testing.assert_array_equal(new.A, state.A)
    np.testing.assert_array_equal(new.b, state.b)


def test_full_step_with_zero_costates_recovers_prior_drift():
    grid = _grid(1.0, 0.05)
    proc = DiffusionProcess(OUDrift([0.8]), np.eye(1), np.zeros(1), np.eye(1))
    state, prob, energy = _costates(proc, _no_data(), GaussianLikelihood(0.1), grid)
    state.A = state.A + 1.0
    new = vgp.drift_update(state, prob, energy, 1.0)
    np.testing.assert_allclose(new.A, -0.8, atol=1e-14)


def test_damping_outside_unit_interval():
    process, dataset, lik, grid = make_problem(OUDrift([1.0]), 1.0, 1.0, 3, 0.1)
    state, prob, energy = _costates(process, dataset, lik, grid)
    with pytest.raises(ParameterError):
        vgp.drift_update(state, prob, energy, 1.5)


# --------------------------------------------------------------------------
# Inference
# --------------------------------------------------------------------------


def _kalman(process, dataset, lik, grid):
    chain = LinearizedPrior.around_point(process.drift, process.m0, grid).chain(process, grid)
    nodes = cvi_dp.observation_nodes(grid, dataset)
    return kalman_smoother(
        chain.A_hat, chain.b_hat, chain.Q_hat, chain.m0, chain.S0, nodes, dataset.values,
        dataset.projections(), lik.variance,
    )


def test_ou_converges_to_kalman_means_and_is_stationary():
    process, dataset, lik, grid = make_problem(OUDrift([1.2]), 1.0, 3.0, 8, 1e-3, seed=0)
    res = vgp.infer(process, dataset, lik, grid, vgp.VGPConfig(omega=0.1, tol=0.0, max_iter=600))
    assert res.converged
    ms, *_ = _kalman(process, dataset, lik, grid)
    assert np.max(np.abs(res.marginals.mean - ms)) < 1e-4
    state, prob, energy = _costates(process, dataset, lik, grid, res.state)
    new = vgp.drift_update(state, prob, energy, 1.0)
    assert np.max(np.abs(new.A - state.A)) < 1e-5
    assert np.max(np.abs(new.b - state.b)) < 1e-4


def test_ou_covariance_gap_shrinks_with_step():
    gaps = []
    for dt in (2e-3, 1e-3):
        process, dataset, lik, grid = make_problem(OUDrift([1.2]), 1.0, 3.0, 8, dt, seed=0)
        res = vgp.infer(process, dataset, lik, grid, vgp.VGPConfig(omega=0.1, tol=1e-10, max_iter=600))
        _, Ps, _, _ = _kalman(process, dataset, lik, grid)
        gaps.append(np.max(np.abs(res.marginals.cov - Ps)))
    assert gaps[1] < 0.75 * gaps[0]


def test_large_damping_diverges_on_fine_grid():
    process, dataset, lik, grid = make_problem(OUDrift([1.2]), 1.0, 3.0, 8, 1e-3, seed=0)
    with pytest.raises(DivergenceError):
        vgp.infer(process, dataset, lik, grid, vgp.VGPConfig(omega=1.0))


def test_zero_iterations_returns_initial_marginals():
    process, dataset, lik, grid = make_problem(DoubleWellDrift([4.0, 1.0]), 1.0, 2.0, 5, 0.05)
    res = vgp.infer(process, dataset, lik, grid, vgp.VGPConfig(max_iter=0))
    ref = drift_to_marginals(LinearizedPrior.around_point(process.drift, process.m0, grid).chain(process, grid))
    np.testing.assert_allclose(res.marginals.mean, ref.mean, atol=1e-14)
    np.testing.assert_allclose(res.marginals.cov, ref.cov, atol=1e-14)
    assert len(res.trace.records) == 1 and res.n_iter == 0


@pytest.mark.parametrize("seed", range(10))
def test_objective_equals_site_based_elbo(seed):
    rng = np.random.default_rng(seed)
    d = 1 + seed % 2
    A_p = -np.eye(d) + 0.3 * rng.normal(size=(d, d))
    from test_cvi_dp import Affine

    drift = Affine(A_p, rng.normal(size=d))
    process = DiffusionProcess(drift, np.eye(d) * rng.uniform(0.5, 2.0), rng.normal(size=d), np.eye(d))
    times = np.sort(rng.uniform(0.1, 2.0, size=4))
    h = np.eye(d)[0]
    dataset = Dataset(times, rng.normal(size=4), h)
    grid = TimeGrid.with_observations(0.0, 2.0, 0.05, times)
    lik = GaussianLikelihood(0.1)
    M = grid.n_intervals
    state = vgp.VGPState(
        A_p + 0.2 * rng.normal(size=(M, d, d)), 0.3 * rng.normal(size=(M, d)), process.m0.copy(), process.S0.copy()
    )
    value = vgp.elbo(state, process, dataset, lik, grid)
    chain = LinearizedPrior(state.A, state.b).chain(process, grid)
    post = VariationalPosterior(drift_to_natural(chain), drift_to_marginals(chain))
    prior_lin = LinearizedPrior.around_point(drift, process.m0, grid)
    other = cvi_dp.elbo(post, process, prior_lin, dataset, lik, grid)
    assert value == pytest.approx(other, abs=1e-8 * max(1.0, abs(other)))


# --------------------------------------------------------------------------
# Learning
# --------------------------------------------------------------------------


def test_theta_gradient_matches_finite_differences():
    process, dataset, lik, grid = make_problem(DoubleWellDrift([4.0, 1.0]), 1.0, 2.0, 5, 0.05, seed=3)
    res = vgp.infer(process, dataset, lik, grid, vgp.VGPConfig(omega=0.01, max_iter=30))
    theta = np.array([3.5, 0.7])
    _, grad = vgp.theta_gradient(res.state, process, dataset, lik, grid, theta)
    eps = 1e-6
    for j in range(2):
        e = np.zeros(2)
        e[j] = eps
        up = vgp.theta_gradient(res.state, process, dataset, lik, grid, theta + e)[0]
        dn = vgp.theta_gradient(res.state, process, dataset, lik, grid, theta - e)[0]
        assert grad[j] == pytest.approx((up - dn) / (2 * eps), rel=1e-4)


def test_zero_gradient_when_posterior_is_the_prior():
    grid = _grid(2.0, 0.05)
    proc = DiffusionProcess(OUDrift([0.8]), np.eye(1), np.zeros(1), np.eye(1))
    res = vgp.infer(proc, _no_data(), GaussianLikelihood(0.1), grid, vgp.VGPConfig(max_iter=0))
    _, grad = vgp.theta_gradient(res.state, proc, _no_data(), GaussianLikelihood(0.1), grid, np.array([0.8]))
    assert grad[0] == 0.0


def test_learning_records_traces():
    process, dataset, lik, grid = make_problem(OUDrift([1.2]), 1.0, 5.0, 15, 0.01, seed=0)
    cfg = vgp.VGPLearnConfig(lr=0.05, n_cycles=5, infer=vgp.VGPConfig(omega=0.1, max_iter=10))
    out = vgp.learn(process.with_drift(OUDrift([2.0])), dataset, lik, grid, cfg)
    assert out.theta_trace.shape == (6, 1)
    assert len(out.objective_trace) == 5
    assert out.theta_trace[-1, 0] < 2.0


def test_brownian_initial_state():
    process, _, _, grid = make_problem(OUDrift([1.0]), 1.0, 1.0, 3, 0.1)
    state = vgp.initial_state(process, grid, "brownian")
    assert not state.A.any() and not state.b.any()
    np.testing.assert_array_equal(state.S0, process.S0)
