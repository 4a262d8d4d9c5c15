"""Fortet-Sinkhorn fixed-point iteration for the coupled potential system.

One sweep updates the quadruple (phi0, phihat0, Lambda, Lambdahat) in the
fixed cycle

    phi0 -> phihat0 -> Lambdahat -> Lambda -> next phi0,

where each arrow is one of: the pointwise coupling phi0 * phihat0 = rho0, a
forward PDE solve, the pointwise identity Lambdahat = V * phihat, the
pointwise coupling Lambda * Lambdahat = Q, and a backward PDE solve.
Convergence is monitored in the Hilbert projective metric on phi0 restricted
to the support of rho0, where the composed map is a strict contraction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import IO, Optional

import numpy as np

from kbridge.errors import ConvergenceError, InfeasibleError
from kbridge.grid import (
    SpaceTimeGrid,
    as_space_field,
    as_spacetime_field,
    integrate_space,
    integrate_spacetime,
)
from kbridge.pde import Propagator
from kbridge.prior import PriorSpec

TRACE_HEADER = "iteration,hilbert_distance,residual_rho0,residual_Q"

# Mass tolerance for the normalized initial density.
RHO0_MASS_TOL = 1e-8
# Converged coupling residuals are verified against this multiple of the
# constraint masses.
RESIDUAL_BOUND = 1e-6


@dataclass
class ProblemSpec:
    """Problem data: initial density, target killed density, prior, grid.

    rho0 must carry unit trapezoid mass; Q must be nonnegative with zero row
    at t = 0 and total mass < 1, and may be positive only where the prior
    killing rate is positive (otherwise no absolutely continuous posterior
    can realize it).
    """

    rho0: np.ndarray
    Q: np.ndarray
    prior: PriorSpec
    grid: SpaceTimeGrid

    def __post_init__(self):
        self.rho0 = as_space_field(self.rho0, self.grid)
        self.Q = as_spacetime_field(self.Q, self.grid)
        if np.min(self.rho0) < 0.0:
            raise ValueError("rho0 must be nonnegative")
        mass = integrate_space(self.rho0, self.grid)
        if abs(mass - 1.0) > RHO0_MASS_TOL:
            raise ValueError(f"rho0 must have unit mass (got {mass:.12g}); normalize on input")
        if np.min(self.Q) < 0.0:
            raise ValueError("Q must be nonnegative")
        if np.any(self.Q[0] != 0.0):
            raise ValueError("Q must vanish identically at t = 0")
        qmass = integrate_spacetime(self.Q, self.grid)
        if qmass >= 1.0:
            raise ValueError(f"killed mass must be < 1 (got {qmass:.12g})")
        self.prior.validate(self.grid)
        vfield = self.prior.V_field(self.grid)
        bad = (self.Q > 0.0) & (vfield <= 0.0)
        if np.any(bad):
            k, i = np.argwhere(bad)[0]
            raise InfeasibleError(
                "Q is positive where the prior killing rate vanishes "
                f"(first at t={self.grid.t[k]:g}, x={self.grid.x[i]:g})",
                locus=(float(self.grid.t[k]), float(self.grid.x[i])),
            )

    @property
    def support(self) -> np.ndarray:
        """Boolean mask of the support of rho0."""
        return self.rho0 > 0.0


@dataclass
class Potentials:
    """The four unknowns of the coupled system plus their space-time extensions."""

    phi0: np.ndarray
    phihat0: Optional[np.ndarray] = None
    Lambda: Optional[np.ndarray] = None
    Lambdahat: Optional[np.ndarray] = None
    phi: Optional[np.ndarray] = None
    phihat: Optional[np.ndarray] = None

    def rescaled(self, kappa: float) -> "Potentials":
        """Gauge transform (kappa*phi, phihat/kappa, kappa*Lambda, Lambdahat/kappa)."""
        if kappa <= 0.0:
            raise ValueError("gauge factor must be positive")
        scale = lambda a, c: None if a is None else c * a
        return Potentials(
            phi0=kappa * self.phi0,
            phihat0=scale(self.phihat0, 1.0 / kappa),
            Lambda=scale(self.Lambda, kappa),
            Lambdahat=scale(self.Lambdahat, 1.0 / kappa),
            phi=scale(self.phi, kappa),
            phihat=scale(self.phihat, 1.0 / kappa),
        )


@dataclass(frozen=True)
class SolverConfig:
    """Iteration controls.

    tol_hilbert: stop once the Hilbert distance between successive phi0
    iterates falls below this.  eps_div guards pointwise divisions; hitting
    it where the numerator is positive is classified as infeasibility, never
    silently clamped.  normalization names the gauge convention applied to
    the converged potentials ("max-phi0": max of phi0 over the support of
    rho0 equals one).
    """

    tol_hilbert: float = 1e-10
    max_iter: int = 10_000
    eps_div: float = 1e-300
    normalization: str = "max-phi0"

    def __post_init__(self):
        if not self.tol_hilbert > 0.0:
            raise ValueError("tol_hilbert must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.normalization != "max-phi0":
            raise ValueError(f"unknown normalization {self.normalization!r}")


@dataclass
class ConvergenceTrace:
    """Per-sweep Hilbert distances and coupling residuals."""

    hilbert: list = field(default_factory=list)
    residual_rho0: list = field(default_factory=list)
    residual_q: list = field(default_factory=list)
    termination: str = "running"
    converged: bool = False
    residual_ok: bool = False

    @property
    def iterations(self) -> int:
        return len(self.hilbert)

    def rows(self):
        for i, (h, r0, rq) in enumerate(
            zip(self.hilbert, self.residual_rho0, self.residual_q), start=1
        ):
            yield i, h, r0, rq

    def contraction_ratios(self) -> np.ndarray:
        """Ratios of successive Hilbert distances, d_{k+1}/d_k."""
        d = np.asarray(self.hilbert)
        if d.size < 2:
            return np.empty(0)
        with np.errstate(divide="ignore", invalid="ignore"):
            return d[1:] / d[:-1]


def hilbert_metric(u, v, mask=None) -> float:
    """Hilbert projective distance log max(u/v) - log min(u/v) on a shared support."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.shape != v.shape:
        raise ValueError(f"shape mismatch {u.shape} vs {v.shape}")
    if mask is None:
        mask = np.ones(u.shape, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty shared support")
    us, vs = u[mask], v[mask]
    if np.min(us) <= 0.0 or np.min(vs) <= 0.0:
        raise ValueError("hilbert_metric requires strictly positive fields on the support")
    r = np.log(us) - np.log(vs)
    return float(np.max(r) - np.min(r))


def _step_phihat0(phi0, problem: ProblemSpec, eps_div: float) -> np.ndarray:
    """Coupling at t=0: phihat0 = rho0 / phi0 on the support of rho0, else 0."""
    supp = problem.support
    if np.any(phi0[supp] <= eps_div):
        raise InfeasibleError("phi0 vanished on the support of rho0")
    out = np.zeros_like(problem.rho0)
    out[supp] = problem.rho0[supp] / phi0[supp]
    return out


def _step_phihat(phihat0, propagator: Propagator) -> np.ndarray:
    """Forward solve extending phihat0 across time."""
    return propagator.forward(phihat0, warn_undershoot=False)


def _step_lambdahat(phihat, propagator: Propagator) -> np.ndarray:
    """Pointwise identity Lambdahat = V * phihat."""
    return propagator.V * phihat


def _step_lambda(Lambdahat, problem: ProblemSpec, eps_div: float) -> np.ndarray:
    """Coupling in the killed layer: Lambda = Q / Lambdahat where Q > 0, else 0."""
    pos = problem.Q > 0.0
    starved = pos & (Lambdahat <= eps_div)
    if np.any(starved):
        k, i = np.argwhere(starved)[0]
        raise InfeasibleError(
            "target killed density unreachable: Lambdahat = 0 where Q > 0 "
            f"(first at t={problem.grid.t[k]:g}, x={problem.grid.x[i]:g})",
            locus=(float(problem.grid.t[k]), float(problem.grid.x[i])),
        )
    out = np.zeros_like(problem.Q)
    out[pos] = problem.Q[pos] / Lambdahat[pos]
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite Lambda iterate")
    return out


def _step_phi(Lambda, propagator: Propagator) -> np.ndarray:
    """Backward solve with source -V*Lambda; must stay positive."""
    phi = propagator.backward(Lambda)
    if phi.min() <= 0.0:
        grid = propagator.grid
        k, i = np.unravel_index(int(np.argmin(phi)), phi.shape)
        raise InfeasibleError(
            f"backward potential nonpositive at (t={grid.t[k]:g}, x={grid.x[i]:g})",
            locus=(float(grid.t[k]), float(grid.x[i])),
        )
    return phi


def fs_sweep(
    state: Potentials,
    problem: ProblemSpec,
    propagator: Propagator | None = None,
    eps_div: float = 1e-300,
) -> Potentials:
    """One full cycle of the fixed-point map, in the canonical step order."""
    prop = propagator if propagator is not None else Propagator(problem.prior, problem.grid)
    phihat0 = _step_phihat0(state.phi0, problem, eps_div)
    phihat = _step_phihat(phihat0, prop)
    Lambdahat = _step_lambdahat(phihat, prop)
    Lambda = _step_lambda(Lambdahat, problem, eps_div)
    phi = _step_phi(Lambda, prop)
    return Potentials(
        phi0=phi[0].copy(),
        phihat0=phihat0,
        Lambda=Lambda,
        Lambdahat=Lambdahat,
        phi=phi,
        phihat=phihat,
    )


def coupling_residuals(state: Potentials, problem: ProblemSpec):
    """L1 (trapezoid) residuals of the two coupling constraints."""
    r0 = integrate_space(np.abs(state.phi0 * state.phihat0 - problem.rho0), problem.grid)
    rq = integrate_spacetime(np.abs(state.Lambda * state.Lambdahat - problem.Q), problem.grid)
    return r0, rq


def solve(
    problem: ProblemSpec,
    config: SolverConfig | None = None,
    *,
    phi0_init=None,
    propagator: Propagator | None = None,
    trace_stream: IO[str] | None = None,
):
    """Iterate fs_sweep from phi0 = 1 until the Hilbert stop rule fires.

    Returns (Potentials, ConvergenceTrace).  The returned potentials are
    gauge-normalized so that max phi0 = 1 on the support of rho0; the
    posterior quantities derived from them are gauge-invariant.  Raises
    ConvergenceError (carrying the trace) if max_iter is exhausted, and
    propagates InfeasibleError from the sweep.
    """
    cfg = config if config is not None else SolverConfig()
    prop = propagator if propagator is not None else Propagator(problem.prior, problem.grid)
    supp = problem.support
    if phi0_init is None:
        phi0 = np.ones(problem.grid.nx)
    else:
        phi0 = as_space_field(phi0_init, problem.grid).copy()
        if np.any(phi0[supp] <= 0.0):
            raise ValueError("phi0_init must be positive on the support of rho0")

    trace = ConvergenceTrace()
    if trace_stream is not None:
        trace_stream.write(TRACE_HEADER + "\n")

    state = Potentials(phi0=phi0)
    for it in range(1, cfg.max_iter + 1):
        new = fs_sweep(state, problem, prop, cfg.eps_div)
        dist = hilbert_metric(new.phi0, state.phi0, supp)
        r0, rq = coupling_residuals(new, problem)
        trace.hilbert.append(dist)
        trace.residual_rho0.append(r0)
        trace.residual_q.append(rq)
        if trace_stream is not None:
            trace_stream.write(f"{it},{dist:.17g},{r0:.17g},{rq:.17g}\n")
        state = new
        if dist < cfg.tol_hilbert:
            trace.converged = True
            trace.termination = f"converged in {it} sweeps (hilbert {dist:.3e} < {cfg.tol_hilbert:g})"
            break
    else:
        trace.termination = f"max_iter = {cfg.max_iter} reached without convergence"
        raise ConvergenceError(trace.termination, trace=trace)

    # Pin the scaling gauge: max of phi0 over the support of rho0 equals one.
    kappa = 1.0 / float(np.max(state.phi0[supp]))
    state = state.rescaled(kappa)

    r0, rq = coupling_residuals(state, problem)
    qmass = integrate_spacetime(problem.Q, problem.grid)
    trace.residual_ok = bool(r0 < RESIDUAL_BOUND and rq < RESIDUAL_BOUND * max(qmass, 1.0))
    return state, trace
