"""Uniform space-time grid on [x_min, x_max] x [0, 1] and trapezoid quadrature.

Fields are plain numpy arrays: a spatial field has shape (nx,), a space-time
field has shape (nt, nx) with row k holding the snapshot at time node t_k.
All mass-balance tolerances in this package are calibrated to the trapezoid
rule, so the quadrature weights defined here are also the weights used by the
discrete operators in `kbridge.prior` and `kbridge.pde`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class SpaceTimeGrid:
    """Uniform tensor grid: nx spatial nodes on [x_min, x_max], nt time nodes on [0, 1].

    Attributes
    ----------
    x, t : node coordinates, x[i] = x_min + i*dx, t[k] = k*dt
    dx, dt : node spacings, dx = (x_max - x_min)/(nx - 1), dt = 1/(nt - 1)
    wx, wt : trapezoid quadrature weights (dx/2 at the spatial endpoints,
             dx inside; analogously in time)
    """

    x_min: float
    x_max: float
    nx: int
    nt: int
    x: np.ndarray = field(init=False, repr=False, compare=False)
    t: np.ndarray = field(init=False, repr=False, compare=False)
    wx: np.ndarray = field(init=False, repr=False, compare=False)
    wt: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.x_max > self.x_min:
            raise ValueError(f"x_max must exceed x_min, got [{self.x_min}, {self.x_max}]")
        if self.nx < 3:
            raise ValueError(f"nx must be >= 3, got {self.nx}")
        if self.nt < 2:
            raise ValueError(f"nt must be >= 2, got {self.nt}")
        object.__setattr__(self, "x", np.linspace(self.x_min, self.x_max, self.nx))
        object.__setattr__(self, "t", np.linspace(0.0, 1.0, self.nt))
        object.__setattr__(self, "wx", _trapezoid_weights(self.nx, self.dx))
        object.__setattr__(self, "wt", _trapezoid_weights(self.nt, self.dt))
        self.x.setflags(write=False)
        self.t.setflags(write=False)
        self.wx.setflags(write=False)
        self.wt.setflags(write=False)

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / (self.nx - 1)

    @property
    def dt(self) -> float:
        return 1.0 / (self.nt - 1)

    def refined(self, factor: int = 2) -> "SpaceTimeGrid":
        """Grid with each spacing divided by `factor` (nodes: n -> factor*(n-1)+1)."""
        return SpaceTimeGrid(
            self.x_min,
            self.x_max,
            factor * (self.nx - 1) + 1,
            factor * (self.nt - 1) + 1,
        )


def _trapezoid_weights(n: int, h: float) -> np.ndarray:
    w = np.full(n, h)
    w[0] = w[-1] = 0.5 * h
    return w


def as_space_field(values, grid: SpaceTimeGrid) -> np.ndarray:
    """Validate and return a (nx,) float array attached to `grid`."""
    f = np.asarray(values, dtype=float)
    if f.shape != (grid.nx,):
        raise ValueError(f"spatial field shape {f.shape} does not match grid ({grid.nx},)")
    return f


def as_spacetime_field(values, grid: SpaceTimeGrid) -> np.ndarray:
    """Validate and return a (nt, nx) float array attached to `grid`."""
    f = np.asarray(values, dtype=float)
    if f.shape != (grid.nt, grid.nx):
        raise ValueError(
            f"space-time field shape {f.shape} does not match grid ({grid.nt}, {grid.nx})"
        )
    return f


def integrate_space(values, grid: SpaceTimeGrid) -> float:
    """Trapezoid-rule integral of a spatial field over [x_min, x_max]."""
    f = as_space_field(values, grid)
    return float(grid.wx @ f)


def integrate_spacetime(values, grid: SpaceTimeGrid) -> float:
    """Trapezoid-rule integral of a space-time field over [x_min, x_max] x [0, 1]."""
    f = as_spacetime_field(values, grid)
    return float(grid.wt @ (f @ grid.wx))


def sample(f, grid: SpaceTimeGrid) -> np.ndarray:
    """Tabulate f(t, x) on the grid; f receives a scalar t and the node vector x.

    Scalars and return values broadcastable to (nx,) are accepted. Non-finite
    samples are rejected.
    """
    out = np.empty((grid.nt, grid.nx))
    for k, tk in enumerate(grid.t):
        out[k, :] = np.broadcast_to(np.asarray(f(tk, grid.x), dtype=float), (grid.nx,))
    if not np.all(np.isfinite(out)):
        raise ValueError("sampled field contains non-finite values")
    return out
