import numpy as np
import pytest

from kbridge.grid import SpaceTimeGrid, integrate_space, integrate_spacetime, sample
from kbridge.presets import example_killed_density

# analytic antiderivatives used as oracles
SIN_PI_INTEGRAL = 2.0 / np.pi  # int_0^1 sin(pi x) dx
EXAMPLE_KILLED_MASS = 4.0 / (3.0 * np.pi)  # (2/pi) * int_{1/3}^1 (1 - cos(3 pi t - pi)) dt


def test_grid_nodes_span_domain():
    g = SpaceTimeGrid(-1.0, 3.0, 5, 4)
    assert g.dx == pytest.approx(1.0)
    assert g.x[0] == -1.0 and g.x[-1] == 3.0
    assert g.t[0] == 0.0 and g.t[-1] == 1.0
    assert g.wx.sum() == pytest.approx(4.0)
    assert g.wt.sum() == pytest.approx(1.0)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(x_min=0.0, x_max=0.0, nx=5, nt=5),
        dict(x_min=0.0, x_max=1.0, nx=2, nt=5),
        dict(x_min=0.0, x_max=1.0, nx=5, nt=1),
    ],
)
def test_grid_rejects_bad_parameters(kwargs):
    with pytest.raises(ValueError):
        SpaceTimeGrid(**kwargs)


def test_integrate_space_constant_is_exact():
    for nx in (3, 17, 201):
        g = SpaceTimeGrid(0.0, 1.0, nx, 2)
        assert integrate_space(np.ones(nx), g) == pytest.approx(1.0, abs=1e-15)


def test_integrate_space_sine():
    g = SpaceTimeGrid(0.0, 1.0, 201, 2)
    val = integrate_space(np.sin(np.pi * g.x), g)
    assert abs(val - SIN_PI_INTEGRAL) < 1e-4


def test_integrate_space_zero_field():
    g = SpaceTimeGrid(0.0, 1.0, 11, 2)
    assert integrate_space(np.zeros(11), g) == 0.0


def test_integrate_space_shape_error():
    g = SpaceTimeGrid(0.0, 1.0, 11, 2)
    with pytest.raises(ValueError):
        integrate_space(np.ones(10), g)


def test_integrate_spacetime_constant_and_zero():
    g = SpaceTimeGrid(0.0, 1.0, 7, 9)
    assert integrate_spacetime(np.ones((9, 7)), g) == pytest.approx(1.0, abs=1e-15)
    assert integrate_spacetime(np.zeros((9, 7)), g) == 0.0
    with pytest.raises(ValueError):
        integrate_spacetime(np.ones((7, 9)), g)


def test_integrate_spacetime_example_killed_mass():
    g = SpaceTimeGrid(0.0, 1.0, 201, 301)
    q = sample(example_killed_density, g)
    assert abs(integrate_spacetime(q, g) - EXAMPLE_KILLED_MASS) < 1e-3


def test_sample_tabulates_pointwise():
    g = SpaceTimeGrid(0.0, 1.0, 3, 3)
    f = sample(lambda t, x: x, g)
    assert np.allclose(f[0], [0.0, 0.5, 1.0])
    f = sample(lambda t, x: t * x, g)
    assert np.allclose(f[-1], [0.0, 0.5, 1.0])
    f = sample(lambda t, x: 0.3, g)
    assert np.all(f == 0.3)


def test_sample_rejects_nonfinite():
    g = SpaceTimeGrid(0.0, 1.0, 3, 3)
    with pytest.raises(ValueError):
        sample(lambda t, x: np.where(x > 0.4, np.inf, 1.0), g)


def test_integrate_space_linear_and_monotone():
    rng = np.random.default_rng(7)
    g = SpaceTimeGrid(0.0, 2.0, 33, 2)
    f, h = rng.random(33), rng.random(33)
    a, b = rng.random(2)
    lin = integrate_space(a * f + b * h, g)
    assert lin == pytest.approx(a * integrate_space(f, g) + b * integrate_space(h, g), rel=1e-13)
    assert integrate_space(f, g) >= 0.0


def test_trapezoid_error_quarters_under_refinement():
    # smooth integrand: halving dx should divide the quadrature error by ~4
    exact = SIN_PI_INTEGRAL
    errors = []
    for nx in (51, 101):
        g = SpaceTimeGrid(0.0, 1.0, nx, 2)
        errors.append(abs(integrate_space(np.sin(np.pi * g.x), g) - exact))
    ratio = errors[1] / errors[0]
    assert 0.2 < ratio < 0.3
