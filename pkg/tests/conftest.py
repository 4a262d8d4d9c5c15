import numpy as np
import pytest

from kbridge.grid import SpaceTimeGrid
from kbridge.pde import Propagator, solve_forward
from kbridge.prior import PriorSpec
from kbridge.presets import build_example_problem
from kbridge.sinkhorn import ProblemSpec, SolverConfig, solve


@pytest.fixture(scope="session")
def coarse_problem():
    """The built-in demonstration problem on a quick grid."""
    return build_example_problem(nx=81, nt=121)


@pytest.fixture(scope="session")
def coarse_solution(coarse_problem):
    pot, trace = solve(coarse_problem, SolverConfig(tol_hilbert=1e-11))
    return coarse_problem, pot, trace


def random_feasible_problem(seed: int, nx: int = 41, nt: int = 61) -> ProblemSpec:
    """A randomized problem whose killed target is feasible by construction.

    The target is the killed density of the prior transport run with a
    rescaled killing rate alpha(t, x) * V (a valid posterior candidate), so
    the support condition holds and the mass is automatically < 1.
    """
    rng = np.random.default_rng(seed)
    grid = SpaceTimeGrid(0.0, 1.0, nx, nt)
    sigma = float(rng.uniform(0.2, 0.35))
    v0 = float(rng.uniform(0.25, 0.6))
    b_amp = float(rng.uniform(-0.2, 0.2))
    prior = PriorSpec(b=lambda t, x: b_amp * np.sin(2 * np.pi * x), sigma=sigma, V=v0)

    phase = float(rng.uniform(0, 2 * np.pi))
    rho0 = 1.0 + 0.6 * np.sin(2 * np.pi * grid.x + phase) + 0.2 * np.cos(4 * np.pi * grid.x)
    rho0 = np.maximum(rho0, 1e-3)
    rho0 /= grid.wx @ rho0

    amp = float(rng.uniform(0.5, 1.5))
    aphase = float(rng.uniform(0, 2 * np.pi))

    def alpha_fn(t, x):
        return amp * t * t * (1.0 + 0.7 * np.sin(2 * np.pi * x + aphase))

    killed_prior = PriorSpec(b=prior.b, sigma=sigma, V=lambda t, x: alpha_fn(t, x) * v0)
    dens = solve_forward(killed_prior, grid, rho0).phihat
    Q = killed_prior.V_field(grid) * np.maximum(dens, 0.0)
    Q[0] = 0.0
    return ProblemSpec(rho0=rho0, Q=Q, prior=prior, grid=grid)
