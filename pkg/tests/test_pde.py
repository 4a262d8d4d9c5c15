import numpy as np
import pytest

from kbridge.errors import UndershootWarning
from kbridge.grid import SpaceTimeGrid, integrate_space
from kbridge.pde import (
    Propagator,
    conservation_defect,
    duality_pairing,
    solve_backward,
    solve_forward,
)
from kbridge.prior import PriorSpec, delta_field


def example_prior():
    return PriorSpec(b=0.0, sigma=0.25, V=0.3)


def grid(nx=41, nt=61):
    return SpaceTimeGrid(0.0, 1.0, nx, nt)


def smooth_density(g):
    rho = 1.0 - np.cos(2 * np.pi * g.x)
    return rho / integrate_space(rho, g)


class TestBackward:
    def test_lambda_one_is_exact_fixed_point(self):
        # V*phi - V*Lambda cancels identically at phi = 1
        g = grid()
        for prior in (example_prior(), PriorSpec(b=0.2, sigma=0.3, V=lambda t, x: 0.2 + t * x)):
            phi = solve_backward(prior, g, np.ones((g.nt, g.nx))).phi
            assert np.max(np.abs(phi - 1.0)) < 1e-10

    def test_zero_lambda_constant_killing_decay(self):
        # spatially constant solution of d/dt phi = V phi: phi(0) = exp(-0.3)
        g = grid()
        res = solve_backward(example_prior(), g, np.zeros((g.nt, g.nx)))
        assert np.max(np.abs(res.phi0 - np.exp(-0.3))) < 1e-6
        assert np.allclose(res.phi[-1], 1.0)

    def test_zero_lambda_zero_killing(self):
        g = grid()
        phi = solve_backward(PriorSpec(b=0.0, sigma=0.25, V=0.0), g, np.zeros((g.nt, g.nx))).phi
        assert np.max(np.abs(phi - 1.0)) < 1e-12

    def test_rejects_bad_lambda(self):
        g = grid(11, 11)
        with pytest.raises(ValueError):
            solve_backward(example_prior(), g, np.full((g.nt, g.nx), np.nan))
        with pytest.raises(ValueError):
            solve_backward(example_prior(), g, -np.ones((g.nt, g.nx)))

    def test_monotone_in_lambda(self):
        # comparison property of the monotone scheme
        g = grid(21, 31)
        rng = np.random.default_rng(5)
        lam1 = rng.random((g.nt, g.nx))
        lam2 = lam1 + rng.random((g.nt, g.nx))
        phi1 = solve_backward(example_prior(), g, lam1).phi
        phi2 = solve_backward(example_prior(), g, lam2).phi
        assert np.min(phi2 - phi1) >= -1e-12


class TestForward:
    def test_conserves_mass_without_killing(self):
        g = grid()
        res = solve_forward(PriorSpec(b=0.0, sigma=0.25, V=0.0), g, smooth_density(g))
        masses = res.phihat @ g.wx
        assert np.max(np.abs(masses - 1.0)) < 1e-6

    def test_constant_killing_decay(self):
        g = grid()
        res = solve_forward(example_prior(), g, smooth_density(g))
        assert abs(integrate_space(res.phihat[-1], g) - np.exp(-0.3)) < 1e-4

    def test_zero_is_fixed_point(self):
        g = grid(11, 11)
        res = solve_forward(example_prior(), g, np.zeros(g.nx))
        assert np.all(res.phihat == 0.0)

    def test_rejects_negative_init(self):
        g = grid(11, 11)
        with pytest.raises(ValueError):
            solve_forward(example_prior(), g, -np.ones(g.nx))

    def test_positivity_from_positive_data(self):
        g = grid(21, 41)
        res = solve_forward(example_prior(), g, smooth_density(g) + 0.1)
        assert res.phihat.min() >= -1e-12

    def test_undershoot_warning_on_rough_data(self):
        # a discrete delta on a stiff grid makes Crank-Nicolson ring
        g = SpaceTimeGrid(0.0, 1.0, 201, 21)
        with pytest.warns(UndershootWarning):
            solve_forward(PriorSpec(b=0.0, sigma=0.5, V=0.0), g, delta_field(g, 100))


class TestConservation:
    def test_example_prior_fine_grid(self):
        assert conservation_defect(example_prior(), SpaceTimeGrid(0.0, 1.0, 201, 301)) < 1e-6

    def test_no_killing(self):
        assert conservation_defect(PriorSpec(b=0.0, sigma=0.25, V=0.0), grid(11, 11)) < 1e-10

    def test_coarse_grid_defect_finite(self):
        # the adjoint construction keeps the identity exact up to roundoff
        # even on very coarse grids
        d = conservation_defect(example_prior(), grid(11, 11))
        assert np.isfinite(d)
        assert d < 1e-10


def test_duality_pairing_constant():
    # d/dt <phi, phihat> = -<Lambda V phihat> holds exactly in the discrete
    # pairing: the accumulated quantity is constant across time nodes
    g = grid(29, 37)
    prior = PriorSpec(b=lambda t, x: 0.3 * np.sin(2 * np.pi * x), sigma=0.3, V=lambda t, x: 0.2 + 0.2 * x)
    prop = Propagator(prior, g)
    rng = np.random.default_rng(11)
    for _ in range(3):
        Lambda = rng.random((g.nt, g.nx))
        init = rng.random(g.nx)
        phi = prop.backward(Lambda)
        phihat = prop.forward(init)
        pair = duality_pairing(phi, phihat, Lambda, prior, g)
        scale = max(abs(pair[0]), 1.0)
        assert (pair.max() - pair.min()) / scale < 1e-12


def test_propagator_reuse_matches_fresh_solves():
    g = grid(21, 21)
    prior = example_prior()
    prop = Propagator(prior, g)
    init = smooth_density(g)
    a = solve_forward(prior, g, init, propagator=prop).phihat
    b = solve_forward(prior, g, init).phihat
    assert np.array_equal(a, b)
