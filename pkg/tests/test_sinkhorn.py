import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from kbridge.errors import ConvergenceError, InfeasibleError
from kbridge.grid import SpaceTimeGrid, integrate_space, integrate_spacetime, sample
from kbridge.pde import Propagator, solve_forward
from kbridge.posterior import killing, marginals
from kbridge.presets import build_example_problem
from kbridge.prior import PriorSpec
from kbridge.sinkhorn import (
    Potentials,
    ProblemSpec,
    SolverConfig,
    TRACE_HEADER,
    _step_lambda,
    _step_lambdahat,
    _step_phi,
    _step_phihat,
    _step_phihat0,
    fs_sweep,
    hilbert_metric,
    solve,
)

from conftest import random_feasible_problem


class TestHilbertMetric:
    def test_projective_invariance(self):
        v = np.array([0.5, 1.0, 2.0])
        for kappa in (0.1, 1.0, 7.3):
            assert hilbert_metric(v, kappa * v) == pytest.approx(0.0, abs=1e-12)

    def test_explicit_value(self):
        # ratios are 1/2 and 2: distance log 4
        assert hilbert_metric(np.array([1.0, 2.0]), np.array([2.0, 1.0])) == pytest.approx(np.log(4.0))

    def test_requires_positive_support(self):
        with pytest.raises(ValueError):
            hilbert_metric(np.array([1.0, 0.0]), np.array([1.0, 1.0]))
        with pytest.raises(ValueError):
            hilbert_metric(np.array([1.0, 1.0]), np.array([1.0, 1.0]), mask=np.zeros(2, bool))

    @settings(max_examples=200, deadline=None)
    @given(
        hnp.arrays(np.float64, 6, elements=st.floats(1e-3, 1e3)),
        hnp.arrays(np.float64, 6, elements=st.floats(1e-3, 1e3)),
        hnp.arrays(np.float64, 6, elements=st.floats(1e-3, 1e3)),
    )
    def test_metric_axioms(self, u, v, w):
        duv = hilbert_metric(u, v)
        assert duv >= 0.0
        assert duv == pytest.approx(hilbert_metric(v, u), rel=1e-12, abs=1e-12)
        assert duv <= hilbert_metric(u, w) + hilbert_metric(w, v) + 1e-9

    @settings(max_examples=100, deadline=None)
    @given(
        hnp.arrays(np.float64, 5, elements=st.floats(1e-2, 1e2)),
        st.floats(1e-3, 1e3),
    )
    def test_scaling_invariance(self, u, kappa):
        v = u[::-1].copy()
        assert hilbert_metric(u, kappa * v) == pytest.approx(hilbert_metric(u, v), rel=1e-10, abs=1e-10)


class TestProblemSpec:
    def grid(self):
        return SpaceTimeGrid(0.0, 1.0, 21, 11)

    def normalized_rho0(self, g):
        rho = 1.0 - np.cos(2 * np.pi * g.x)
        return rho / integrate_space(rho, g)

    def test_rejects_unnormalized_rho0(self):
        g = self.grid()
        with pytest.raises(ValueError, match="unit mass"):
            ProblemSpec(rho0=np.ones(g.nx) * 2.0, Q=np.zeros((g.nt, g.nx)), prior=PriorSpec(sigma=1.0), grid=g)

    def test_rejects_killed_mass_at_time_zero(self):
        g = self.grid()
        Q = np.ones((g.nt, g.nx)) * 0.1
        with pytest.raises(ValueError, match="t = 0"):
            ProblemSpec(rho0=self.normalized_rho0(g), Q=Q, prior=PriorSpec(sigma=1.0, V=0.3), grid=g)

    def test_rejects_killed_mass_of_one(self):
        g = self.grid()
        Q = np.full((g.nt, g.nx), 1.2)
        Q[0] = 0.0
        with pytest.raises(ValueError, match="killed mass must be < 1"):
            ProblemSpec(rho0=self.normalized_rho0(g), Q=Q, prior=PriorSpec(sigma=1.0, V=0.3), grid=g)

    def test_support_condition_is_infeasibility(self):
        g = self.grid()
        Q = np.zeros((g.nt, g.nx))
        Q[5, 10] = 0.5
        with pytest.raises(InfeasibleError) as exc:
            ProblemSpec(rho0=self.normalized_rho0(g), Q=Q, prior=PriorSpec(sigma=1.0, V=0.0), grid=g)
        assert exc.value.locus is not None


class TestSweep:
    def test_prior_is_fixed_point_without_target(self):
        # Q = 0 and V = 0: one sweep lands exactly on the prior
        g = SpaceTimeGrid(0.0, 1.0, 31, 21)
        rho0 = 1.0 - np.cos(2 * np.pi * g.x)
        rho0 /= integrate_space(rho0, g)
        prior = PriorSpec(b=0.0, sigma=0.25, V=0.0)
        problem = ProblemSpec(rho0=rho0, Q=np.zeros((g.nt, g.nx)), prior=prior, grid=g)
        state = fs_sweep(Potentials(phi0=np.ones(g.nx)), problem)
        assert np.all(state.Lambda == 0.0)
        assert np.max(np.abs(state.phi - 1.0)) < 1e-12
        evol = solve_forward(prior, g, rho0).phihat
        assert np.max(np.abs(state.phihat - evol)) < 1e-12

    def test_priors_own_killed_density_is_near_fixed_point(self):
        # target = prior's own killed flux (first row zeroed per the t=0
        # convention): the sweep returns phi0 = 1 up to the O(V dt / 2)
        # perturbation caused by that zeroed row
        g = SpaceTimeGrid(0.0, 1.0, 31, 41)
        rho0 = 1.0 - np.cos(2 * np.pi * g.x)
        rho0 /= integrate_space(rho0, g)
        prior = PriorSpec(b=0.0, sigma=0.25, V=0.3)
        R = solve_forward(prior, g, rho0).phihat
        Q = prior.V_field(g) * R
        Q[0] = 0.0
        problem = ProblemSpec(rho0=rho0, Q=Q, prior=prior, grid=g)
        state = fs_sweep(Potentials(phi0=np.ones(g.nx)), problem)
        assert np.max(np.abs(state.Lambda[1:] - 1.0)) < 1e-10
        assert np.max(np.abs(state.phi0 - 1.0)) < 0.3 * g.dt
        # the coupling identities hold exactly regardless
        assert np.max(np.abs(state.Lambda * state.Lambdahat - Q)) < 1e-14

    def test_step_order_matters(self):
        # computing Lambdahat from the stale phihat (swapped steps) must
        # change the iterate: guards against silent reordering of the cycle
        problem = random_feasible_problem(3, nx=21, nt=31)
        prop = Propagator(problem.prior, problem.grid)
        start = Potentials(phi0=np.full(problem.grid.nx, 1.3))
        canonical = fs_sweep(start, problem, prop)

        stale_phihat = prop.forward(np.where(problem.support, problem.rho0, 0.0))
        phihat0 = _step_phihat0(start.phi0, problem, 1e-300)
        lhat_stale = _step_lambdahat(stale_phihat, prop)  # stale: skips the refresh
        lam = _step_lambda(lhat_stale, problem, 1e-300)
        phi = _step_phi(lam, prop)
        assert np.max(np.abs(phi[0] - canonical.phi0)) > 1e-6

    def test_sweep_requires_positive_phi0_on_support(self):
        problem = random_feasible_problem(4, nx=15, nt=15)
        bad = np.zeros(problem.grid.nx)
        with pytest.raises(InfeasibleError):
            fs_sweep(Potentials(phi0=bad), problem)


class TestSolve:
    def test_example_problem_converges_with_tight_couplings(self, coarse_solution):
        problem, pot, trace = coarse_solution
        assert trace.converged
        assert trace.residual_ok
        assert trace.residual_rho0[-1] < 1e-6
        assert trace.residual_q[-1] < 1e-6
        # couplings hold at the fixed point
        assert integrate_space(np.abs(pot.phi0 * pot.phihat0 - problem.rho0), problem.grid) < 1e-6
        assert integrate_spacetime(np.abs(pot.Lambda * pot.Lambdahat - problem.Q), problem.grid) < 1e-10

    def test_trace_is_contractive(self, coarse_solution):
        _, _, trace = coarse_solution
        d = np.asarray(trace.hilbert)
        assert np.all(np.diff(d[1:]) <= 1e-14)
        assert d[-1] / d[-2] < 1.0

    def test_gauge_convention_and_invariance(self):
        problem = build_example_problem(nx=41, nt=61)
        cfg = SolverConfig(tol_hilbert=1e-12)
        pot1, _ = solve(problem, cfg)
        pot10, _ = solve(problem, cfg, phi0_init=10.0 * np.ones(problem.grid.nx))
        supp = problem.support
        assert np.max(pot1.phi0[supp]) == pytest.approx(1.0, abs=1e-13)
        assert np.max(pot10.phi0[supp]) == pytest.approx(1.0, abs=1e-13)
        P1, P10 = marginals(pot1, problem.grid), marginals(pot10, problem.grid)
        assert np.max(np.abs(P1 - P10)) < 1e-10
        a1, _ = killing(pot1, problem.prior, problem.grid)
        a10, _ = killing(pot10, problem.prior, problem.grid)
        assert np.max(np.abs(a1 - a10)) < 1e-10

    def test_gauge_rescaling_preserves_reported_quantities(self, coarse_solution):
        problem, pot, _ = coarse_solution
        scaled = pot.rescaled(3.7)
        assert np.max(np.abs(marginals(scaled, problem.grid) - marginals(pot, problem.grid))) < 1e-12
        a, qh = killing(pot, problem.prior, problem.grid)
        a2, qh2 = killing(scaled, problem.prior, problem.grid)
        assert np.max(np.abs(a - a2)) < 1e-12
        assert np.max(np.abs(qh - qh2)) < 1e-12

    def test_max_iter_raises_with_trace(self):
        problem = build_example_problem(nx=31, nt=41)
        with pytest.raises(ConvergenceError) as exc:
            solve(problem, SolverConfig(tol_hilbert=1e-10, max_iter=2))
        assert exc.value.trace is not None
        assert exc.value.trace.iterations == 2

    def test_trace_stream_format(self):
        problem = build_example_problem(nx=31, nt=41)
        buf = io.StringIO()
        _, trace = solve(problem, SolverConfig(tol_hilbert=1e-8), trace_stream=buf)
        lines = buf.getvalue().strip().splitlines()
        assert lines[0] == TRACE_HEADER
        assert len(lines) == trace.iterations + 1
        first = lines[1].split(",")
        assert int(first[0]) == 1
        assert float(first[1]) == trace.hilbert[0]

    @pytest.mark.parametrize("seed", [0, 1])
    def test_randomized_feasible_problems_converge(self, seed):
        problem = random_feasible_problem(seed)
        pot, trace = solve(problem, SolverConfig(tol_hilbert=1e-10))
        assert trace.converged
        d = np.asarray(trace.hilbert)
        assert np.all(np.diff(d[1:]) <= 1e-14)
        assert trace.residual_rho0[-1] < 1e-6
