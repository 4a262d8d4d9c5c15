"""Built-in problem presets.

The "paper-example" preset is the package's reference demonstration: a
driftless diffusion dX = (1/4) dW on [0, 1] with constant killing rate 0.3,
steered to the initial density 1 - cos(2 pi x) and a killed-mass density
proportional to sin(pi z) that switches on at t = 1/3 and dies off at t = 1.
Its total killed mass is 4/(3 pi), about 42% of the initial mass.
"""

from __future__ import annotations

import numpy as np

from kbridge.grid import SpaceTimeGrid, integrate_space, sample
from kbridge.prior import PriorSpec
from kbridge.sinkhorn import ProblemSpec

PAPER_EXAMPLE = "paper-example"

DEFAULT_NX = 201
DEFAULT_NT = 301


def example_rho0(x: np.ndarray) -> np.ndarray:
    """Initial density (1 - cos(2 pi x)) restricted to [0, 1]."""
    x = np.asarray(x, dtype=float)
    inside = (x >= 0.0) & (x <= 1.0)
    return np.where(inside, 1.0 - np.cos(2.0 * np.pi * x), 0.0)


def example_killed_density(t: float, z: np.ndarray) -> np.ndarray:
    """Target killed density sin(pi z)(1 - cos(3 pi t - pi)) on [0,1] x [1/3, 1]."""
    z = np.asarray(z, dtype=float)
    if t < 1.0 / 3.0 or t > 1.0:
        return np.zeros_like(z)
    inside = (z >= 0.0) & (z <= 1.0)
    return np.where(inside, np.sin(np.pi * z) * (1.0 - np.cos(3.0 * np.pi * t - np.pi)), 0.0)


def example_prior() -> PriorSpec:
    """Driftless prior dX = (1/4) dW with constant killing rate 0.3."""
    return PriorSpec(b=0.0, sigma=0.25, V=0.3)


def example_grid(nx: int = DEFAULT_NX, nt: int = DEFAULT_NT) -> SpaceTimeGrid:
    return SpaceTimeGrid(0.0, 1.0, nx, nt)


def build_example_problem(nx: int = DEFAULT_NX, nt: int = DEFAULT_NT) -> ProblemSpec:
    """The preset assembled on an nx-by-nt grid, rho0 normalized on input."""
    grid = example_grid(nx, nt)
    rho0 = example_rho0(grid.x)
    rho0 = rho0 / integrate_space(rho0, grid)
    Q = sample(example_killed_density, grid)
    return ProblemSpec(rho0=rho0, Q=Q, prior=example_prior(), grid=grid)


PRESETS = {PAPER_EXAMPLE: build_example_problem}


def build_preset(name: str, nx: int = DEFAULT_NX, nt: int = DEFAULT_NT) -> ProblemSpec:
    try:
        builder = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; available: {sorted(PRESETS)}") from None
    return builder(nx, nt)
