"""Prior killed diffusion and its discrete generator.

The prior is dX = b(t,X) dt + sigma(t,X) dW on [x_min, x_max] with reflecting
(zero-flux) walls, killed at rate V(t,X) >= 0.  The spatial operator of the
forward (Fokker-Planck) equation,

    L p = -d/dx (b p) + 1/2 d^2/dx^2 (a p),      a = sigma^2,

is discretized in conservative finite-volume form on node-centred cells whose
widths equal the trapezoid quadrature weights (half cells at the walls).  Wall
fluxes are identically zero, so the trapezoid mass of a killing-free solve is
conserved to machine precision and every unit of lost mass is attributable to
the killing term.  The backward (generator) operator is the exact adjoint of L
under the trapezoid inner product.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from kbridge.errors import ModelError
from kbridge.grid import SpaceTimeGrid

Coefficient = Union[float, Callable[[float, np.ndarray], np.ndarray]]

# Uniform ellipticity floor for a = sigma^2 on the grid.
SIGMA_FLOOR = 1e-8


def as_coefficient(c: Coefficient) -> Callable[[float, np.ndarray], np.ndarray]:
    """Wrap a constant as a coefficient function of (t, x)."""
    if callable(c):
        return c
    value = float(c)
    return lambda t, x: np.full_like(np.asarray(x, dtype=float), value)


@dataclass(frozen=True)
class PriorSpec:
    """Coefficients of the prior killed diffusion.

    b, sigma and V may be floats or callables f(t, x) vectorized over the
    node vector x.  sigma must stay uniformly positive and V nonnegative on
    any grid the prior is used with; `validate` checks both.
    """

    b: Coefficient = 0.0
    sigma: Coefficient = 1.0
    V: Coefficient = 0.0

    def b_row(self, t: float, grid: SpaceTimeGrid) -> np.ndarray:
        return np.broadcast_to(np.asarray(as_coefficient(self.b)(t, grid.x), dtype=float), (grid.nx,)).copy()

    def sigma_row(self, t: float, grid: SpaceTimeGrid) -> np.ndarray:
        return np.broadcast_to(np.asarray(as_coefficient(self.sigma)(t, grid.x), dtype=float), (grid.nx,)).copy()

    def a_row(self, t: float, grid: SpaceTimeGrid) -> np.ndarray:
        return self.sigma_row(t, grid) ** 2

    def V_row(self, t: float, grid: SpaceTimeGrid) -> np.ndarray:
        return np.broadcast_to(np.asarray(as_coefficient(self.V)(t, grid.x), dtype=float), (grid.nx,)).copy()

    def V_field(self, grid: SpaceTimeGrid) -> np.ndarray:
        return np.stack([self.V_row(t, grid) for t in grid.t])

    def validate(self, grid: SpaceTimeGrid) -> None:
        """Check uniform ellipticity and nonnegative finite killing on the grid."""
        for k, t in enumerate(grid.t):
            sig = self.sigma_row(t, grid)
            if not np.all(np.isfinite(sig)) or np.min(sig) <= SIGMA_FLOOR:
                raise ModelError(
                    f"sigma must be uniformly positive; min sigma = {np.min(sig):g} at t = {t:g}"
                )
            v = self.V_row(t, grid)
            if not np.all(np.isfinite(v)) or np.min(v) < 0.0:
                raise ModelError(f"killing rate must be finite and >= 0; offending row t = {t:g}")


@dataclass(frozen=True)
class GeneratorSnapshot:
    """Tridiagonal operators at one time node.

    `lower`, `diag`, `upper` are the bands of the advection-diffusion part L
    (killing excluded); `V` is the diagonal killing rate at the same node.
    The forward operator of the killed Fokker-Planck equation is L - diag(V);
    the backward generator is the trapezoid-weighted adjoint of L.
    """

    k: int
    lower: np.ndarray
    diag: np.ndarray
    upper: np.ndarray
    V: np.ndarray
    grid: SpaceTimeGrid

    def forward_bands(self):
        """Bands of L - diag(V)."""
        return self.lower, self.diag - self.V, self.upper

    def adjoint_bands(self):
        """Bands of A = W^-1 L^T W, the generator acting on observables."""
        w = self.grid.wx
        lower = self.upper * w[:-1] / w[1:]
        upper = self.lower * w[1:] / w[:-1]
        return lower, self.diag.copy(), upper

    def forward_dense(self) -> np.ndarray:
        lo, d, up = self.forward_bands()
        return np.diag(d) + np.diag(lo, -1) + np.diag(up, 1)

    def adjoint_dense(self) -> np.ndarray:
        lo, d, up = self.adjoint_bands()
        return np.diag(d) + np.diag(lo, -1) + np.diag(up, 1)


def advection_diffusion_bands(b_row: np.ndarray, a_row: np.ndarray, grid: SpaceTimeGrid):
    """Finite-volume bands of L p = -(b p)_x + ((a p)_x / 2)_x with zero wall flux.

    The face flux between nodes i and i+1 is

        F = b_f * (th_lo p_i + th_hi p_{i+1}) - (a_{i+1} p_{i+1} - a_i p_i) / (2 dx)

    with b_f the face-averaged drift.  The advective weights (th_lo, th_hi)
    are central (1/2, 1/2) whenever |b_f| dx <= min(a_i, a_{i+1}), which keeps
    both off-diagonal entries nonnegative, and first-order upwind otherwise.
    Row i of L is (F_{i-1/2} - F_{i+1/2}) / w_i with w the trapezoid weights,
    so the weighted column sums of L vanish identically (discrete mass
    conservation).
    """
    nx, dx, w = grid.nx, grid.dx, grid.wx
    b_face = 0.5 * (b_row[:-1] + b_row[1:])
    central = np.abs(b_face) * dx <= np.minimum(a_row[:-1], a_row[1:])
    th_lo = np.where(central, 0.5, (b_face > 0).astype(float))
    th_hi = np.where(central, 0.5, (b_face < 0).astype(float))

    # F_{i+1/2} = c_lo[i] p_i + c_hi[i] p_{i+1}
    c_lo = b_face * th_lo + a_row[:-1] / (2.0 * dx)
    c_hi = b_face * th_hi - a_row[1:] / (2.0 * dx)

    diag = np.zeros(nx)
    lower = np.zeros(nx - 1)
    upper = np.zeros(nx - 1)
    # row i loses F_{i+1/2}, row i+1 gains it
    diag[:-1] -= c_lo / w[:-1]
    upper -= c_hi / w[:-1]
    diag[1:] += c_hi / w[1:]
    lower += c_lo / w[1:]
    return lower, diag, upper


def assemble(prior: PriorSpec, grid: SpaceTimeGrid, k: int) -> GeneratorSnapshot:
    """Discrete generator snapshot at time node k.

    Raises ModelError if ellipticity or killing-sign requirements fail on the
    row, and IndexError for an out-of-range time index.
    """
    if not 0 <= k < grid.nt:
        raise IndexError(f"time index {k} outside [0, {grid.nt - 1}]")
    t = grid.t[k]
    sig = prior.sigma_row(t, grid)
    if not np.all(np.isfinite(sig)) or np.min(sig) <= SIGMA_FLOOR:
        raise ModelError(f"sigma must be uniformly positive at t = {t:g}")
    v = prior.V_row(t, grid)
    if not np.all(np.isfinite(v)) or np.min(v) < 0.0:
        raise ModelError(f"killing rate must be finite and >= 0 at t = {t:g}")
    lower, diag, upper = advection_diffusion_bands(prior.b_row(t, grid), sig**2, grid)
    return GeneratorSnapshot(k=k, lower=lower, diag=diag, upper=upper, V=v, grid=grid)


def delta_field(grid: SpaceTimeGrid, i: int) -> np.ndarray:
    """Unit-mass discrete delta at node i: value 1/w_i in cell i, zero elsewhere."""
    if not 0 <= i < grid.nx:
        raise IndexError(f"node index {i} outside [0, {grid.nx - 1}]")
    d = np.zeros(grid.nx)
    d[i] = 1.0 / grid.wx[i]
    return d


def kernel_row(prior: PriorSpec, grid: SpaceTimeGrid, i: int):
    """Transition-kernel row from node i: (survivor density at t=1, killed flux field).

    Propagates the discrete delta at x_i through the forward solver.  The
    survivor slice is r(0, x_i, 1, .) and the killed field is
    V(t, z) r(0, x_i, t, z); their trapezoid masses add up to one to machine
    precision (see `kbridge.pde.conservation_defect`).
    """
    from kbridge.pde import solve_forward  # deferred: pde depends on this module

    result = solve_forward(prior, grid, delta_field(grid, i))
    killed = prior.V_field(grid) * result.phihat
    return result.phihat[-1].copy(), killed
