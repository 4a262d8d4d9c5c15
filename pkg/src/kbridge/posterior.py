"""Posterior objects assembled from converged potentials.

The posterior law is Markov: its one-time marginals are the pointwise
product P = phi * phihat, its drift gains the feedback term sigma * u with
u = sigma * d/dx log(phi), and its killing rate is alpha * V with
alpha = Lambda / phi.  The achieved killed density alpha * V * P equals
Lambda * V * phihat, which is the form used here since phi cancels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from kbridge.grid import SpaceTimeGrid, integrate_spacetime
from kbridge.pde import Propagator
from kbridge.prior import PriorSpec, advection_diffusion_bands, delta_field
from kbridge.sinkhorn import Potentials

# Relative positivity floor: control and killing fields are reported as 0
# (mask False) where P < P_FLOOR_REL * max(P); log-gradients carry no
# information in vacuum regions.
P_FLOOR_REL = 1e-12

# Guard for materializing coupling tensors: nt * nx * nx must not exceed this.
DEFAULT_COUPLING_BUDGET = 5_000_000


@dataclass(frozen=True)
class PosteriorSolution:
    """Everything reportable about the posterior on one grid.

    P: one-time marginals (clipped at zero for reporting);
    u: feedback control sigma * dlog(phi)/dx, zeroed off the mask;
    drift_correction: sigma * u, the drift increment entering the SDE;
    alpha: killing rescale Lambda/phi (zero wherever Lambda = 0);
    Qhat: achieved killed density Lambda * V * phihat;
    survivor_mass_t: trapezoid mass of P at each time node;
    mask: True where P is above the vacuum floor.
    """

    P: np.ndarray
    u: np.ndarray
    drift_correction: np.ndarray
    alpha: np.ndarray
    Qhat: np.ndarray
    survivor_mass_t: np.ndarray
    mask: np.ndarray
    grid: SpaceTimeGrid


@dataclass(frozen=True)
class Couplings:
    """Materialized optimal couplings on small grids.

    pi_xy[i, j]     : joint density of (start x_i, surviving end y_j);
    pi_xzt[k, i, j] : joint density of (start x_i, kill site z_j, kill time t_k);
    f[i]            : density ratio of posterior to prior initial condition,
                      with the prior anchored at R_0 = rho0 (so f = 1/phi0 on
                      the support of rho0).
    """

    pi_xy: np.ndarray
    pi_xzt: np.ndarray
    f: np.ndarray


def marginals(pot: Potentials, grid: SpaceTimeGrid) -> np.ndarray:
    """One-time marginals P = phi * phihat at every grid node."""
    return pot.phi * pot.phihat


def control(pot: Potentials, prior: PriorSpec, grid: SpaceTimeGrid):
    """Feedback control u = sigma * d/dx log(phi) and its validity mask.

    Central differences inside; exactly zero at the reflecting walls, where
    the discrete backward operator enforces a vanishing normal derivative of
    phi.  Entries below the vacuum floor of P are reported as zero with mask
    False.
    """
    P = marginals(pot, grid)
    logphi = np.log(pot.phi)
    dlog = np.zeros_like(logphi)
    dlog[:, 1:-1] = (logphi[:, 2:] - logphi[:, :-2]) / (2.0 * grid.dx)
    sig = np.stack([prior.sigma_row(t, grid) for t in grid.t])
    u = sig * dlog
    mask = P >= P_FLOOR_REL * np.max(P)
    u[~mask] = 0.0
    return u, mask


def killing(pot: Potentials, prior: PriorSpec, grid: SpaceTimeGrid):
    """Killing rescale alpha = Lambda/phi and achieved killed density Qhat.

    Qhat is computed in the division-free form Lambda * V * phihat, which is
    algebraically alpha * V * P.
    """
    alpha = np.where(pot.Lambda > 0.0, pot.Lambda / pot.phi, 0.0)
    Qhat = pot.Lambda * prior.V_field(grid) * pot.phihat
    return alpha, Qhat


def posterior_solution(pot: Potentials, prior: PriorSpec, grid: SpaceTimeGrid) -> PosteriorSolution:
    """Bundle marginals, control, killing and mass bookkeeping for reporting."""
    P_raw = marginals(pot, grid)
    u, mask = control(pot, prior, grid)
    alpha, Qhat = killing(pot, prior, grid)
    sig = np.stack([prior.sigma_row(t, grid) for t in grid.t])
    return PosteriorSolution(
        P=np.maximum(P_raw, 0.0),
        u=u,
        drift_correction=sig * u,
        alpha=alpha,
        Qhat=Qhat,
        survivor_mass_t=P_raw @ grid.wx,
        mask=mask,
        grid=grid,
    )


def fp_residual(sol: PosteriorSolution, prior: PriorSpec, grid: SpaceTimeGrid) -> float:
    """Max-norm Crank-Nicolson residual of the posterior Fokker-Planck equation.

    Rebuilds, per time node, the conservative operator with the controlled
    drift b + sigma*u and the rescaled killing alpha*V (the same stencils the
    solvers use), and evaluates the half-step residual of the reported P.
    The max is taken over interior spatial nodes and normalized by max P.
    """
    P = sol.P
    vfield = prior.V_field(grid)
    rate = sol.alpha * vfield
    applied = np.empty_like(P)
    for k, t in enumerate(grid.t):
        b_row = prior.b_row(t, grid) + prior.sigma_row(t, grid) * sol.u[k]
        lo, di, up = advection_diffusion_bands(b_row, prior.a_row(t, grid), grid)
        y = di * P[k]
        y[:-1] += up * P[k, 1:]
        y[1:] += lo * P[k, :-1]
        applied[k] = y - rate[k] * P[k]
    resid = (P[1:] - P[:-1]) / grid.dt - 0.5 * (applied[:-1] + applied[1:])
    interior = resid[:, 1:-1]
    return float(np.max(np.abs(interior)) / np.max(P))


def couplings(
    pot: Potentials,
    prior: PriorSpec,
    grid: SpaceTimeGrid,
    max_entries: int = DEFAULT_COUPLING_BUDGET,
) -> Couplings:
    """Materialize the optimal couplings by propagating one kernel row per node.

    pi_xy(x, y) = r(0, x, 1, y) phihat0(x) and
    pi_xzt(x, z, t) = V(t, z) r(0, x, t, z) phihat0(x) Lambda(t, z).
    Only intended for small grids; refuses when nt*nx*nx exceeds the budget.
    """
    size = grid.nt * grid.nx * grid.nx
    if size > max_entries:
        raise ValueError(
            f"coupling tensor would hold {size} entries, over the budget of {max_entries}; "
            "use a coarser grid or raise max_entries"
        )
    prop = Propagator(prior, grid)
    vfield = prior.V_field(grid)
    pi_xy = np.empty((grid.nx, grid.nx))
    pi_xzt = np.empty((grid.nt, grid.nx, grid.nx))
    for i in range(grid.nx):
        r = prop.forward(delta_field(grid, i), warn_undershoot=False)
        pi_xy[i] = r[-1] * pot.phihat0[i]
        pi_xzt[:, i, :] = vfield * r * pot.phihat0[i] * pot.Lambda
    f = np.where(pot.phihat0 > 0.0, 1.0 / np.where(pot.phi0 > 0.0, pot.phi0, 1.0), 0.0)
    return Couplings(pi_xy=pi_xy, pi_xzt=pi_xzt, f=f)


def coupling_marginal_residuals(cpl: Couplings, rho0, Q, grid: SpaceTimeGrid):
    """Max-norm residuals of the two marginal constraints of the couplings."""
    row = cpl.pi_xy @ grid.wx + np.einsum("kij,k,j->i", cpl.pi_xzt, grid.wt, grid.wx)
    col = np.einsum("kij,i->kj", cpl.pi_xzt, grid.wx)
    return float(np.max(np.abs(row - rho0))), float(np.max(np.abs(col - Q)))


def mass_bookkeeping_defect(sol: PosteriorSolution) -> float:
    """Max over time nodes of |mass(P_t) + killed mass up to t - 1|."""
    grid = sol.grid
    flux = sol.Qhat @ grid.wx
    acc = np.zeros(grid.nt)
    acc[1:] = np.cumsum(0.5 * grid.dt * (flux[:-1] + flux[1:]))
    return float(np.max(np.abs(sol.survivor_mass_t + acc - 1.0)))
