"""Schrodinger bridges for killed diffusions.

Given a prior Ito diffusion with a state- and time-dependent killing rate,
an initial density, and a target spatio-temporal density of absorbed mass,
this package computes the entropy-optimal posterior law: its feedback
control drift, rescaled killing rate, one-time marginals, and optimal
couplings, via a coupled forward/backward PDE system solved by a
Fortet-Sinkhorn fixed-point iteration.
"""

from kbridge.errors import ConvergenceError, InfeasibleError, ModelError, UndershootWarning
from kbridge.grid import SpaceTimeGrid, integrate_space, integrate_spacetime, sample
from kbridge.prior import GeneratorSnapshot, PriorSpec, assemble, kernel_row
from kbridge.pde import (
    BackwardSolveResult,
    ForwardSolveResult,
    Propagator,
    conservation_defect,
    solve_backward,
    solve_forward,
)
from kbridge.sinkhorn import (
    ConvergenceTrace,
    Potentials,
    ProblemSpec,
    SolverConfig,
    fs_sweep,
    hilbert_metric,
    solve,
)
from kbridge.posterior import (
    Couplings,
    PosteriorSolution,
    control,
    couplings,
    fp_residual,
    killing,
    marginals,
    posterior_solution,
)
from kbridge.oracle import (
    DiscreteChain,
    OracleResult,
    chain_from_grid,
    fs_discrete,
    ipf_solve,
    prior_couplings,
)
from kbridge.particle import KillEventLog, SimConfig, empirical_profiles, simulate

__version__ = "0.1.0"

__all__ = [
    "BackwardSolveResult",
    "ConvergenceError",
    "ConvergenceTrace",
    "Couplings",
    "DiscreteChain",
    "ForwardSolveResult",
    "GeneratorSnapshot",
    "InfeasibleError",
    "KillEventLog",
    "ModelError",
    "OracleResult",
    "PosteriorSolution",
    "Potentials",
    "PriorSpec",
    "ProblemSpec",
    "Propagator",
    "SimConfig",
    "SolverConfig",
    "SpaceTimeGrid",
    "UndershootWarning",
    "assemble",
    "chain_from_grid",
    "conservation_defect",
    "control",
    "couplings",
    "empirical_profiles",
    "fp_residual",
    "fs_discrete",
    "fs_sweep",
    "hilbert_metric",
    "integrate_space",
    "integrate_spacetime",
    "ipf_solve",
    "kernel_row",
    "killing",
    "marginals",
    "posterior_solution",
    "prior_couplings",
    "sample",
    "simulate",
    "solve",
    "solve_backward",
    "solve_forward",
]
