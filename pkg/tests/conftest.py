import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cvidp.lgssm_core import DriftParamsLGSSM  # noqa: E402


def random_spd(rng, d, scale=1.0, floor=0.2):
    a = rng.normal(size=(d, d))
    return scale * (a @ a.T / d + floor * np.eye(d))


def random_chain(rng, n_intervals, d):
    """A random stable chain with well-conditioned noise."""
    A = np.zeros((n_intervals, d, d))
    Q = np.zeros((n_intervals, d, d))
    for i in range(n_intervals):
        A[i] = 0.8 * np.eye(d) + 0.2 * rng.normal(size=(d, d))
        Q[i] = random_spd(rng, d, 0.5)
    b = rng.normal(size=(n_intervals, d))
    return DriftParamsLGSSM(A, b, Q, rng.normal(size=d), random_spd(rng, d))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_problem(drift, x0, t_end, n_obs, dt, seed=0, obs_var=0.01, s0=0.1, qc=1.0):
    """Simulated scalar-projection data under ``drift`` on an observation-aligned grid."""
    from cvidp.diffusion_models import DiffusionProcess, simulate_em
    from cvidp.lgssm_core import TimeGrid
    from cvidp.observation_models import Dataset, GaussianLikelihood

    d = drift.dim
    rng = np.random.default_rng(seed)
    sim_grid = TimeGrid(np.linspace(0.0, t_end, int(round(t_end / 0.01)) + 1), np.zeros(0))
    truth = DiffusionProcess(drift, qc * np.eye(d), x0 * np.ones(d), np.zeros((d, d)))
    path = simulate_em(truth, sim_grid, seed)
    idx = np.sort(rng.choice(np.arange(1, sim_grid.times.size), size=n_obs, replace=False))
    h = np.zeros(d)
    h[0] = 1.0
    y = path[idx] @ h + np.sqrt(obs_var) * rng.normal(size=n_obs)
    dataset = Dataset(sim_grid.times[idx], y, h)
    grid = TimeGrid.with_observations(0.0, t_end, dt, dataset.times)
    process = DiffusionProcess(drift, qc * np.eye(d), x0 * np.ones(d), s0 * np.eye(d))
    return process, dataset, GaussianLikelihood(obs_var), grid


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
