"""Brute-force verification on small discrete chains.

A DiscreteChain is a finite-state killed Markov chain: at step k a particle
alive in state i is killed with probability d_k(i) (recorded at state i,
step k) and otherwise moved by the survival step matrix S_k, whose row sums
are 1 - d_k(i).  The entropy projection onto the two marginal constraints is
solved twice, by iterative proportional fitting on the materialized coupling
tensors and by the discrete analogue of the PDE fixed-point sweep; strict
convexity makes any disagreement between the two a bug detector.  The
`chain_from_grid` constructor ties chains to the continuous solver.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from kbridge.errors import ConvergenceError, InfeasibleError
from kbridge.grid import SpaceTimeGrid
from kbridge.pde import Propagator
from kbridge.prior import PriorSpec

ROWSUM_TOL = 1e-12


@dataclass(frozen=True)
class DiscreteChain:
    """Sub-stochastic chain: survival steps S[k] (m x m), kill probs d[k] (m), start r0.

    Kill trial k happens before move k at the current state, so each row of
    S[k] must sum to 1 - d[k, i].
    """

    S: np.ndarray
    d: np.ndarray
    r0: np.ndarray

    def __post_init__(self):
        S = np.asarray(self.S, dtype=float)
        d = np.asarray(self.d, dtype=float)
        r0 = np.asarray(self.r0, dtype=float)
        object.__setattr__(self, "S", S)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "r0", r0)
        if S.ndim != 3 or S.shape[1] != S.shape[2]:
            raise ValueError(f"S must be (K, m, m), got {S.shape}")
        K, m, _ = S.shape
        if d.shape != (K, m):
            raise ValueError(f"d must be ({K}, {m}), got {d.shape}")
        if r0.shape != (m,):
            raise ValueError(f"r0 must be ({m},), got {r0.shape}")
        if np.min(S) < 0.0:
            raise ValueError("step matrices must be nonnegative")
        if np.min(d) < 0.0 or np.max(d) > 1.0:
            raise ValueError("kill probabilities must lie in [0, 1]")
        if np.max(np.abs(S.sum(axis=2) + d - 1.0)) > ROWSUM_TOL:
            raise ValueError("row sums of S[k] plus d[k] must equal 1")
        if np.min(r0) < 0.0 or abs(r0.sum() - 1.0) > ROWSUM_TOL:
            raise ValueError("r0 must be a probability vector")

    @property
    def K(self) -> int:
        return self.S.shape[0]

    @property
    def m(self) -> int:
        return self.S.shape[1]


@dataclass(frozen=True)
class OracleResult:
    """Couplings of an entropy projection plus bookkeeping.

    pi_xy[i, j]     mass starting at i and surviving to j;
    pi_xzt[k, i, j] mass starting at i and killed at j on step k;
    objective       KL divergence to the prior couplings;
    residual_row / residual_col  final constraint residuals (max norm).
    """

    pi_xy: np.ndarray
    pi_xzt: np.ndarray
    objective: float
    iterations: int
    residual_row: float
    residual_col: float
    objective_trace: tuple = ()


def prior_couplings(chain: DiscreteChain):
    """Couplings of the chain itself: (rho_xy (m,m), rho_xzt (K,m,m))."""
    m, K = chain.m, chain.K
    rho_xzt = np.empty((K, m, m))
    alive = np.diag(chain.r0.copy())  # alive[x, z] = P(start x, alive at z before trial k)
    for k in range(K):
        rho_xzt[k] = alive * chain.d[k][None, :]
        alive = alive @ chain.S[k]
    return alive, rho_xzt


def kl_couplings(pi_xy, pi_xzt, rho_xy, rho_xzt) -> float:
    """KL divergence of couplings, with the 0 log 0 = 0 convention."""
    total = 0.0
    for pi, rho in ((pi_xy, rho_xy), (pi_xzt, rho_xzt)):
        pos = pi > 0.0
        if np.any(pos & (rho <= 0.0)):
            return float("inf")
        total += float(np.sum(pi[pos] * np.log(pi[pos] / rho[pos])))
    return total


def _residuals(pi_xy, pi_xzt, rho0_target, Q_target):
    row = pi_xy.sum(axis=1) + pi_xzt.sum(axis=(0, 2))
    col = pi_xzt.sum(axis=1)
    return float(np.max(np.abs(row - rho0_target))), float(np.max(np.abs(col - Q_target)))


def ipf_solve(
    rho_xy,
    rho_xzt,
    rho0_target,
    Q_target,
    tol: float = 1e-12,
    max_iter: int = 100_000,
) -> OracleResult:
    """Iterative proportional fitting onto the two marginal constraints.

    Alternates a per-start-state scaling of both blocks (initial-density
    constraint) with a per-(step, site) scaling of the killed block (killed
    mass constraint) until the max residual drops below tol.
    """
    rho_xy = np.asarray(rho_xy, dtype=float)
    rho_xzt = np.asarray(rho_xzt, dtype=float)
    rho0_target = np.asarray(rho0_target, dtype=float)
    Q_target = np.asarray(Q_target, dtype=float)

    col_support = rho_xzt.sum(axis=1)
    if np.any((Q_target > 0.0) & (col_support <= 0.0)):
        k, z = np.argwhere((Q_target > 0.0) & (col_support <= 0.0))[0]
        raise InfeasibleError(
            f"killed target has mass at step {k}, state {z} where the prior cannot kill",
            locus=(int(k), int(z)),
        )
    row_support = rho_xy.sum(axis=1) + rho_xzt.sum(axis=(0, 2))
    if np.any((rho0_target > 0.0) & (row_support <= 0.0)):
        raise InfeasibleError("initial target has mass where the prior has none")

    pi_xy = rho_xy.copy()
    pi_xzt = rho_xzt.copy()
    objective_trace = []
    for it in range(1, max_iter + 1):
        row = pi_xy.sum(axis=1) + pi_xzt.sum(axis=(0, 2))
        s = np.divide(rho0_target, row, out=np.zeros_like(row), where=row > 0.0)
        pi_xy *= s[:, None]
        pi_xzt *= s[None, :, None]
        col = pi_xzt.sum(axis=1)
        c = np.divide(Q_target, col, out=np.zeros_like(col), where=col > 0.0)
        pi_xzt *= c[:, None, :]
        objective_trace.append(kl_couplings(pi_xy, pi_xzt, rho_xy, rho_xzt))
        r_row, r_col = _residuals(pi_xy, pi_xzt, rho0_target, Q_target)
        if max(r_row, r_col) < tol:
            return OracleResult(
                pi_xy=pi_xy,
                pi_xzt=pi_xzt,
                objective=objective_trace[-1],
                iterations=it,
                residual_row=r_row,
                residual_col=r_col,
                objective_trace=tuple(objective_trace),
            )
    raise ConvergenceError(f"IPF did not reach tol {tol:g} in {max_iter} cycles")


def fs_discrete(
    chain: DiscreteChain,
    rho0_target,
    Q_target,
    tol: float = 1e-12,
    max_iter: int = 100_000,
    phi0_init=None,
) -> OracleResult:
    """Fixed-point sweep specialized to the chain (sums in place of PDE solves).

    Same cycle as the continuous solver: phi0 -> phihat0 -> Lambdahat ->
    Lambda -> phi0, with forward propagation phihat_{k+1} = S_k^T phihat_k
    and the backward recursion psi_k = d_k * Lambda_k + S_k psi_{k+1}.
    Converged couplings must agree with ipf_solve to strict tolerance.
    """
    rho0_target = np.asarray(rho0_target, dtype=float)
    Q_target = np.asarray(Q_target, dtype=float)
    m, K = chain.m, chain.K
    supp = rho0_target > 0.0
    if not supp.any():
        raise ValueError("rho0 target is identically zero")

    phi0 = np.ones(m) if phi0_init is None else np.asarray(phi0_init, dtype=float).copy()
    last = None
    for it in range(1, max_iter + 1):
        phihat0 = np.where(supp, rho0_target / np.where(supp, phi0, 1.0), 0.0)
        phihat = np.empty((K + 1, m))
        phihat[0] = phihat0
        for k in range(K):
            phihat[k + 1] = chain.S[k].T @ phihat[k]
        Lambdahat = chain.d * phihat[:K]
        pos = Q_target > 0.0
        if np.any(pos & (Lambdahat <= 0.0)):
            k, z = np.argwhere(pos & (Lambdahat <= 0.0))[0]
            raise InfeasibleError(
                f"killed target unreachable at step {k}, state {z}", locus=(int(k), int(z))
            )
        Lambda = np.where(pos, Q_target / np.where(pos, Lambdahat, 1.0), 0.0)
        psi = np.ones(m)
        for k in range(K - 1, -1, -1):
            psi = chain.d[k] * Lambda[k] + chain.S[k] @ psi
        new_phi0 = psi
        ratio = new_phi0[supp] / phi0[supp]
        dist = float(np.log(ratio.max()) - np.log(ratio.min()))
        phi0 = new_phi0
        last = (phihat0, Lambda)
        if dist < tol:
            break
    else:
        raise ConvergenceError(f"discrete sweep did not reach tol {tol:g} in {max_iter} sweeps")

    phihat0, Lambda = last
    rho_xy, rho_xzt = prior_couplings(chain)
    f = np.divide(phihat0, chain.r0, out=np.zeros_like(phihat0), where=chain.r0 > 0.0)
    pi_xy = rho_xy * f[:, None]
    pi_xzt = rho_xzt * f[None, :, None] * Lambda[:, None, :]
    r_row, r_col = _residuals(pi_xy, pi_xzt, rho0_target, Q_target)
    return OracleResult(
        pi_xy=pi_xy,
        pi_xzt=pi_xzt,
        objective=kl_couplings(pi_xy, pi_xzt, rho_xy, rho_xzt),
        iterations=it,
        residual_row=r_row,
        residual_col=r_col,
    )


def chain_from_grid(prior: PriorSpec, grid: SpaceTimeGrid, r0_mass) -> DiscreteChain:
    """Chain matched to the continuous discretization.

    Transport per step is the Crank-Nicolson step matrix of the killing-free
    prior, converted to a row-stochastic matrix on cell masses; the kill
    probability at state i on step k is 1 - exp(-V(t_k, x_i) dt), applied
    before the move.  Requires a grid mild enough that the CN step matrix is
    entrywise nonnegative.
    """
    r0_mass = np.asarray(r0_mass, dtype=float)
    transport = PriorSpec(b=prior.b, sigma=prior.sigma, V=0.0)
    prop = Propagator(transport, grid)
    nx, w = grid.nx, grid.wx
    K = grid.nt - 1
    S = np.empty((K, nx, nx))
    for k in range(K):
        # density step matrix, conjugated to the mass convention
        G = prop.step_dense(k) * w[:, None] / w[None, :]
        T = G.T.copy()
        T[np.abs(T) < 1e-14] = 0.0
        if np.min(T) < 0.0:
            raise ValueError(
                "CN step matrix has negative entries; grid too coarse for a chain reduction"
            )
        T /= T.sum(axis=1, keepdims=True)
        d_k = 1.0 - np.exp(-prior.V_row(grid.t[k], grid) * grid.dt)
        S[k] = (1.0 - d_k)[:, None] * T
    d = np.stack([1.0 - np.exp(-prior.V_row(grid.t[k], grid) * grid.dt) for k in range(K)])
    return DiscreteChain(S=S, d=d, r0=r0_mass)


def node_masses_from_step_masses(step_masses: np.ndarray, grid: SpaceTimeGrid) -> np.ndarray:
    """Reattribute per-step killed masses (K, m) to time nodes (nt, m).

    Each step's mass is split evenly between its two endpoint nodes, the
    discrete counterpart of the trapezoid rule; totals are preserved.
    """
    K, m = step_masses.shape
    if K != grid.nt - 1:
        raise ValueError(f"expected {grid.nt - 1} steps, got {K}")
    node = np.zeros((grid.nt, m))
    node[:-1] += 0.5 * step_masses
    node[1:] += 0.5 * step_masses
    return node


def step_masses_from_node_masses(node_masses: np.ndarray, grid: SpaceTimeGrid) -> np.ndarray:
    """Inverse attribution: per-node masses (nt, m) to steps (K, m), totals preserved."""
    share = grid.dt / (2.0 * grid.wt)
    scaled = node_masses * share[:, None]
    return scaled[:-1] + scaled[1:]


@dataclass(frozen=True)
class ComparisonInstance:
    """A seeded chain/grid pair with feasible targets for cross-validation.

    The chain is reduced from a randomized prior on the grid; the targets
    come from simulating the same chain with a rescaled killing profile, so
    they are feasible by construction.  Mass-convention targets (for the
    chain solvers) and density-convention targets (for the PDE solver) are
    both provided.
    """

    prior: PriorSpec
    grid: SpaceTimeGrid
    chain: DiscreteChain
    rho0_mass: np.ndarray
    Q_mass: np.ndarray
    rho0_density: np.ndarray
    Q_density: np.ndarray
    alpha_true: np.ndarray


def make_comparison_instance(m: int = 5, steps: int = 6, seed: int = 0) -> ComparisonInstance:
    """Randomized sub-stochastic instance tying the discrete and continuous solvers."""
    grid = SpaceTimeGrid(0.0, 1.0, m, steps + 1)
    rng = np.random.default_rng(seed)
    b_vals = rng.uniform(-0.15, 0.15, size=m)
    s_vals = rng.uniform(0.3, 0.45, size=m)
    v_vals = rng.uniform(0.2, 0.5, size=m)
    xs = grid.x.copy()
    prior = PriorSpec(
        b=lambda t, x: np.interp(x, xs, b_vals),
        sigma=lambda t, x: np.interp(x, xs, s_vals),
        V=lambda t, x: np.interp(x, xs, v_vals),
    )
    r0 = rng.uniform(0.5, 1.5, size=m)
    r0 /= r0.sum()
    chain = chain_from_grid(prior, grid, r0)

    # Feasible killed target: simulate the chain with a rescaled killing
    # profile (zero on the first step so the density target vanishes at t=0).
    ramp = np.concatenate([[0.0], rng.uniform(0.4, 1.6, size=steps - 1)])
    site = rng.uniform(0.5, 1.5, size=m)
    alpha_true = ramp[:, None] * site[None, :]
    Q_mass = np.empty((steps, m))
    alive = r0.copy()
    for k in range(steps):
        d_mod = np.clip(alpha_true[k] * chain.d[k], 0.0, 0.95)
        T = chain.S[k] / (1.0 - chain.d[k])[:, None]
        Q_mass[k] = alive * d_mod
        alive = ((1.0 - d_mod) * alive) @ T

    # The chain records step-k kills at the step-start node, so the density
    # handed to the continuous solver places step k's mass at node k.
    Q_density = np.zeros((grid.nt, m))
    Q_density[:steps] = Q_mass / (grid.wt[:steps, None] * grid.wx[None, :])
    return ComparisonInstance(
        prior=prior,
        grid=grid,
        chain=chain,
        rho0_mass=r0,
        Q_mass=Q_mass,
        rho0_density=r0 / grid.wx,
        Q_density=Q_density,
        alpha_true=alpha_true,
    )
