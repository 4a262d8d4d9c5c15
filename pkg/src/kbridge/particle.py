"""Monte Carlo simulation of the killed process on the fused state space.

Euler-Maruyama on the primary interval with reflecting fold-back at the
walls; killing is sampled per substep with the exponential-increment
probability 1 - exp(-rate * h), which is exact for piecewise-constant rates.
Killed particles freeze at their killing position (the coffin copy of the
state space), so the log always accounts for every particle.

Noise is drawn from counter-based Philox blocks keyed by (seed, substep), so
the draw consumed by particle i at substep s is a pure function of
(seed, s, i): results are reproducible bit-for-bit and independent of
execution order or particle batching.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from kbridge.grid import SpaceTimeGrid, as_space_field
from kbridge.posterior import PosteriorSolution
from kbridge.prior import PriorSpec, as_coefficient

_COUNTER_STRIDE = 1 << 96


@dataclass(frozen=True)
class SimConfig:
    """Simulation controls.

    dynamics selects the drift/killing pair: "prior" uses (b, V); "posterior"
    uses (b + sigma*u, alpha*V) with u and alpha interpolated bilinearly from
    a converged solution.  substeps refines each grid time step.
    """

    n_particles: int
    seed: int
    dynamics: str = "prior"
    substeps: int = 1

    def __post_init__(self):
        if self.n_particles < 1:
            raise ValueError("n_particles must be >= 1")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")
        if self.dynamics not in ("prior", "posterior"):
            raise ValueError(f"dynamics must be 'prior' or 'posterior', got {self.dynamics!r}")


@dataclass(frozen=True)
class KillEventLog:
    """Per-particle outcome records.

    t_kill/x_kill are NaN for survivors; x_final holds the terminal position
    for survivors and the frozen killing position for killed particles.
    """

    t_kill: np.ndarray
    x_kill: np.ndarray
    survived: np.ndarray
    x_final: np.ndarray

    @property
    def n_particles(self) -> int:
        return self.survived.size

    @property
    def n_killed(self) -> int:
        return int(np.count_nonzero(~self.survived))

    @property
    def killed_fraction(self) -> float:
        return self.n_killed / self.n_particles


def _block_rng(seed: int, block: int) -> np.random.Generator:
    """Fresh Philox stream at a disjoint counter block.

    Each (noise kind, substep) pair owns one block, so the i-th draw of a
    block is a pure function of (seed, block, i), independent of batch size
    or execution order.
    """
    return np.random.Generator(np.random.Philox(key=seed, counter=block * _COUNTER_STRIDE))


def _interp_rows(field: np.ndarray, grid: SpaceTimeGrid, t: float) -> np.ndarray:
    """Linear-in-time blend of the two field rows bracketing t."""
    s = min(max(t / grid.dt, 0.0), grid.nt - 1.0)
    k = min(int(s), grid.nt - 2)
    frac = s - k
    return (1.0 - frac) * field[k] + frac * field[k + 1]


def _interp_field(field: np.ndarray, grid: SpaceTimeGrid, t: float, xs: np.ndarray) -> np.ndarray:
    """Bilinear interpolation of a space-time field at scalar t, vector xs."""
    row = _interp_rows(field, grid, t)
    return np.interp(xs, grid.x, row)


def _sample_initial(rho0: np.ndarray, grid: SpaceTimeGrid, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF sampling of the node-based density via its trapezoid CDF."""
    cell_mass = 0.5 * grid.dx * (rho0[:-1] + rho0[1:])
    cdf = np.concatenate([[0.0], np.cumsum(cell_mass)])
    cdf /= cdf[-1]
    return np.interp(u, cdf, grid.x)


def _reflect(xs: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Fold positions back into [lo, hi] (triangle-wave reflection)."""
    span = hi - lo
    y = np.mod(xs - lo, 2.0 * span)
    return lo + np.minimum(y, 2.0 * span - y)


def simulate(
    prior: PriorSpec,
    grid: SpaceTimeGrid,
    cfg: SimConfig,
    rho0,
    solution: PosteriorSolution | None = None,
) -> KillEventLog:
    """Simulate cfg.n_particles paths of the killed process started from rho0.

    Per substep of length h = dt/substeps: the kill trial (probability
    1 - exp(-rate*h), rate evaluated at the substep start) precedes the
    Euler-Maruyama move; killed particles record the pre-move position.
    Posterior dynamics require a converged PosteriorSolution.
    """
    rho0 = as_space_field(rho0, grid)
    if cfg.dynamics == "posterior" and solution is None:
        raise ValueError("posterior dynamics require a PosteriorSolution")

    b_fn = as_coefficient(prior.b)
    sig_fn = as_coefficient(prior.sigma)
    v_fn = as_coefficient(prior.V)
    if cfg.dynamics == "posterior":
        rate_field = solution.alpha * prior.V_field(grid)
        u_field = solution.u

    n = cfg.n_particles
    h = grid.dt / cfg.substeps
    n_steps = (grid.nt - 1) * cfg.substeps

    x = _sample_initial(rho0, grid, _block_rng(cfg.seed, 1).random(n))
    alive = np.ones(n, dtype=bool)
    t_kill = np.full(n, np.nan)
    x_kill = np.full(n, np.nan)

    for s in range(n_steps):
        t = s * h
        noise = _block_rng(cfg.seed, 2 * s + 2).standard_normal(n)
        trial = _block_rng(cfg.seed, 2 * s + 3).random(n)

        if cfg.dynamics == "prior":
            rate = np.asarray(v_fn(t, x), dtype=float)
        else:
            rate = _interp_field(rate_field, grid, t, x)
        p_kill = -np.expm1(-np.maximum(rate, 0.0) * h)
        dying = alive & (trial < p_kill)
        if np.any(dying):
            t_kill[dying] = t
            x_kill[dying] = x[dying]
            alive &= ~dying

        drift = np.asarray(b_fn(t, x), dtype=float)
        sig = np.asarray(sig_fn(t, x), dtype=float)
        if cfg.dynamics == "posterior":
            drift = drift + sig * _interp_field(u_field, grid, t, x)
        moved = x + drift * h + sig * np.sqrt(h) * noise
        x = np.where(alive, _reflect(moved, grid.x_min, grid.x_max), x)

    return KillEventLog(
        t_kill=t_kill,
        x_kill=x_kill,
        survived=alive,
        x_final=np.where(alive, x, x_kill),
    )


def empirical_profiles(log: KillEventLog, grid: SpaceTimeGrid):
    """Histogram estimators on the grid.

    Returns (killed_hist, survivor_hist): kill events and terminal survivor
    positions binned to their nearest node and normalized by particle count
    and cell volume, so integrate_spacetime(killed_hist) equals the killed
    fraction and integrate_space(survivor_hist) the surviving fraction.
    """
    if log.n_particles == 0:
        raise ValueError("empty event log")
    n = log.n_particles
    killed_hist = np.zeros((grid.nt, grid.nx))
    dead = ~log.survived
    if np.any(dead):
        k_idx = np.clip(np.rint(log.t_kill[dead] / grid.dt).astype(int), 0, grid.nt - 1)
        i_idx = np.clip(np.rint((log.x_kill[dead] - grid.x_min) / grid.dx).astype(int), 0, grid.nx - 1)
        np.add.at(killed_hist, (k_idx, i_idx), 1.0)
        killed_hist /= n * grid.wt[:, None] * grid.wx[None, :]

    survivor_hist = np.zeros(grid.nx)
    if np.any(log.survived):
        i_idx = np.clip(
            np.rint((log.x_final[log.survived] - grid.x_min) / grid.dx).astype(int), 0, grid.nx - 1
        )
        np.add.at(survivor_hist, i_idx, 1.0)
        survivor_hist /= n * grid.wx
    return killed_hist, survivor_hist
