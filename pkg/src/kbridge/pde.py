"""Crank-Nicolson solvers for the coupled Kolmogorov equations.

Forward equation (densities):   d/dt p = L p - V p,         p(0) given,
backward equation (potentials): d/dt f = -A f + V f - V Lam, f(1) = 1,

with L the conservative advection-diffusion operator of `kbridge.prior` and
A its adjoint under the trapezoid inner product <u, v> = sum_i w_i u_i v_i.

Both solves share one set of banded factorizations per time node.  The
backward recursion is implemented as the exact algebraic adjoint of the
forward step, with the -V*Lam source split across the step endpoints the way
the trapezoid rule splits it.  Consequently the discrete pairing

    <f_k, p_k> + sum_{j<k} dt/2 (<Lam_j V_j p_j> + <Lam_{j+1} V_{j+1} p_{j+1}>)

is constant in k to machine precision, which is the discrete form of the
mass bookkeeping behind the whole scheme: a backward solve with Lam = 1
returns exactly the survivor-plus-killed mass of the forward kernel.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import get_lapack_funcs

from kbridge.errors import InfeasibleError, UndershootWarning
from kbridge.grid import SpaceTimeGrid, as_space_field, as_spacetime_field
from kbridge.prior import PriorSpec, advection_diffusion_bands

# Warn when Crank-Nicolson produces undershoots below this level.
UNDERSHOOT_TOL = -1e-8


@dataclass(frozen=True)
class ForwardSolveResult:
    """phihat[k] is the forward solution at time node k; phihat[0] = init."""

    phihat: np.ndarray


@dataclass(frozen=True)
class BackwardSolveResult:
    """phi[k] is the backward solution at time node k; phi[-1] = 1."""

    phi: np.ndarray

    @property
    def phi0(self) -> np.ndarray:
        return self.phi[0]


class Propagator:
    """Pre-factorized Crank-Nicolson stepper for one prior on one grid.

    Builds, once, the explicit bands (I + dt/2 M_k) and the LU factorization
    of the implicit bands (I - dt/2 M_k) for every time node, with
    M_k = L_k - diag(V_k).  The factorizations are immutable and reused by
    every forward/backward call, which is what makes repeated Sinkhorn sweeps
    cheap.
    """

    def __init__(self, prior: PriorSpec, grid: SpaceTimeGrid):
        prior.validate(grid)
        self.grid = grid
        self.prior = prior
        nt, nx, dt = grid.nt, grid.nx, grid.dt
        self.V = np.empty((nt, nx))
        self._explicit = []  # bands of I + dt/2 M_k, k = 0..nt-1
        self._factors = [None] * nt  # gttrf factors of I - dt/2 M_k, k = 1..nt-1
        gttrf, gttrs = get_lapack_funcs(("gttrf", "gttrs"), (np.zeros(2),))
        self._gttrs = gttrs
        for k, t in enumerate(grid.t):
            b_row = prior.b_row(t, grid)
            a_row = prior.a_row(t, grid)
            self.V[k] = prior.V_row(t, grid)
            lo, di, up = advection_diffusion_bands(b_row, a_row, grid)
            di = di - self.V[k]
            half = 0.5 * dt
            self._explicit.append((half * lo, 1.0 + half * di, half * up))
            if k > 0:
                dlf, df, duf, du2, ipiv, info = gttrf(-half * lo, 1.0 - half * di, -half * up)
                if info != 0:
                    raise RuntimeError(f"tridiagonal factorization failed at node {k} (info={info})")
                self._factors[k] = (dlf, df, duf, du2, ipiv)

    def _explicit_apply(self, k: int, v: np.ndarray) -> np.ndarray:
        lo, di, up = self._explicit[k]
        out = di * v
        out[:-1] += up * v[1:]
        out[1:] += lo * v[:-1]
        return out

    def _explicit_apply_t(self, k: int, v: np.ndarray) -> np.ndarray:
        lo, di, up = self._explicit[k]
        out = di * v
        out[1:] += up * v[:-1]
        out[:-1] += lo * v[1:]
        return out

    def _implicit_solve(self, k: int, rhs: np.ndarray, trans: str = "N") -> np.ndarray:
        dlf, df, duf, du2, ipiv = self._factors[k]
        x, info = self._gttrs(dlf, df, duf, du2, ipiv, rhs, trans=trans)
        if info != 0:
            raise RuntimeError(f"tridiagonal solve failed at node {k} (info={info})")
        return x

    def step_dense(self, k: int) -> np.ndarray:
        """Dense one-step matrix mapping the density at node k to node k+1.

        Only sensible on small grids (used by the chain reduction and tests).
        """
        lo, di, up = self._explicit[k]
        explicit = np.diag(di) + np.diag(lo, -1) + np.diag(up, 1)
        return self._implicit_solve(k + 1, np.asfortranarray(explicit))

    def forward(self, init: np.ndarray, warn_undershoot: bool = True) -> np.ndarray:
        """Integrate the forward equation from row 0; returns the (nt, nx) field."""
        out = np.empty((self.grid.nt, self.grid.nx))
        out[0] = init
        for k in range(self.grid.nt - 1):
            out[k + 1] = self._implicit_solve(k + 1, self._explicit_apply(k, out[k]))
        if warn_undershoot:
            worst = float(out.min(initial=0.0))
            if worst < UNDERSHOOT_TOL:
                warnings.warn(
                    f"forward solve undershoots to {worst:.3e}; consider increasing nt",
                    UndershootWarning,
                    stacklevel=2,
                )
        return out

    def backward(self, Lambda: np.ndarray) -> np.ndarray:
        """Integrate the backward equation with source -V*Lambda from f(1) = 1.

        Implemented as the exact trapezoid-weighted adjoint of `forward`, so
        row 0 equals the kernel functional: survivor mass plus
        Lambda-weighted killed mass, per start node.
        """
        grid = self.grid
        w = grid.wx
        half = 0.5 * grid.dt
        src = self.V * Lambda
        out = np.empty((grid.nt, grid.nx))
        out[-1] = 1.0
        for k in range(grid.nt - 2, -1, -1):
            v = w * (out[k + 1] + half * src[k + 1])
            u = self._implicit_solve(k + 1, v, trans="T")
            out[k] = self._explicit_apply_t(k, u) / w + half * src[k]
        return out


def solve_forward(prior: PriorSpec, grid: SpaceTimeGrid, init, *, propagator: Propagator | None = None) -> ForwardSolveResult:
    """Solve d/dt p = L p - V p forward from p(0) = init (init >= 0, finite)."""
    init = as_space_field(init, grid)
    if not np.all(np.isfinite(init)):
        raise ValueError("initial condition contains non-finite values")
    if np.min(init) < 0.0:
        raise ValueError("initial condition must be nonnegative")
    prop = propagator if propagator is not None else Propagator(prior, grid)
    return ForwardSolveResult(phihat=prop.forward(init))


def solve_backward(prior: PriorSpec, grid: SpaceTimeGrid, Lambda, *, propagator: Propagator | None = None) -> BackwardSolveResult:
    """Solve the backward equation with source -V*Lambda down from f(1) = 1.

    Lambda must be nonnegative and finite.  A nonpositive solution value
    signals an infeasible coupling and is raised as InfeasibleError.
    """
    Lambda = as_spacetime_field(Lambda, grid)
    if not np.all(np.isfinite(Lambda)):
        raise ValueError("Lambda contains non-finite values")
    if np.min(Lambda) < 0.0:
        raise ValueError("Lambda must be nonnegative")
    prop = propagator if propagator is not None else Propagator(prior, grid)
    phi = prop.backward(Lambda)
    if phi.min() <= 0.0:
        k, i = np.unravel_index(int(np.argmin(phi)), phi.shape)
        raise InfeasibleError(
            f"backward potential nonpositive at (t={grid.t[k]:g}, x={grid.x[i]:g})",
            locus=(float(grid.t[k]), float(grid.x[i])),
        )
    return BackwardSolveResult(phi=phi)


def conservation_defect(prior: PriorSpec, grid: SpaceTimeGrid) -> float:
    """Mass-bookkeeping defect of the discrete kernel.

    A backward solve with Lambda = 1 evaluates, per start node, the survivor
    mass plus total killed mass of the forward kernel; the defect is the
    max-norm deviation of that quantity from one.
    """
    phi = solve_backward(prior, grid, np.ones((grid.nt, grid.nx))).phi0
    return float(np.max(np.abs(phi - 1.0)))


def duality_pairing(phi, phihat, Lambda, prior: PriorSpec, grid: SpaceTimeGrid) -> np.ndarray:
    """Per-node value of <phi, phihat> plus the accumulated Lambda-weighted kill flux.

    Constant across time nodes (to machine precision) whenever phi solves the
    backward equation with source -V*Lambda and phihat solves the forward
    equation, with both produced by the same Propagator.
    """
    phi = as_spacetime_field(phi, grid)
    phihat = as_spacetime_field(phihat, grid)
    Lambda = as_spacetime_field(Lambda, grid)
    w = grid.wx
    flux = (Lambda * prior.V_field(grid) * phihat) @ w
    pair = (phi * phihat) @ w
    acc = np.zeros(grid.nt)
    acc[1:] = np.cumsum(0.5 * grid.dt * (flux[:-1] + flux[1:]))
    return pair + acc
