import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fblab.grid import (
    Ball,
    Grid,
    GridError,
    MatrixField,
    ScalarField,
    VectorField,
    ball_average,
    ball_integral,
    ball_max,
    discrete_gradient,
    distance_to_zero_set,
    positive_side_gradient,
    slice_average,
    unit_ball_volume,
)

from oracles import brute_distance


def test_grid_validation():
    with pytest.raises(GridError):
        Grid((3, 8), 0.1)
    with pytest.raises(GridError):
        Grid((8, 8), 0.0)
    with pytest.raises(GridError):
        Grid((8,), 0.1)
    with pytest.raises(GridError):
        Grid.box((1.0, 0.33), 0.1)
    g = Grid.box((2.0, 1.0), 0.125)
    assert g.dims == (16, 8) and g.extents == (2.0, 1.0)


def test_field_shape_and_finiteness():
    g = Grid.unit_square(8)
    with pytest.raises(GridError):
        ScalarField(g, np.zeros((8, 7)))
    with pytest.raises(GridError):
        ScalarField(g, np.full((8, 8), np.nan))
    v = VectorField(g, np.zeros((8, 8, 2)))
    assert v.component(1).values.shape == (8, 8)
    A = MatrixField.scalar_times_identity(ScalarField.constant(g, 3.0))
    assert np.all(A.entry(0, 0).values == 3.0) and np.all(A.entry(0, 1).values == 0.0)
    with pytest.raises(ValueError):
        v.values[0, 0, 0] = 1.0


def test_gradient_of_constant_and_affine():
    g = Grid.unit_square(16)
    assert np.all(discrete_gradient(ScalarField.constant(g, 2.5)).values == 0)
    du = discrete_gradient(g.sample(lambda x, y: x)).values
    assert np.allclose(du[1:-1, 1:-1, 0], 1.0, rtol=0, atol=1e-12)
    assert np.allclose(du[..., 1], 0.0, atol=1e-12)


def test_gradient_second_order_on_sine():
    errs = []
    for m in (32, 64, 128):
        g = Grid.unit_square(m)
        du = discrete_gradient(g.sample(lambda x, y: np.sin(x))).values[..., 0]
        X = g.centers()[0]
        errs.append(np.abs(du - np.cos(X))[1:-1, :].max())
    rates = [math.log2(errs[i] / errs[i + 1]) for i in range(2)]
    assert all(1.9 < r < 2.1 for r in rates)


def test_ball_average_of_one_and_resolution_guard():
    g = Grid.unit_square(32)
    b = Ball((0.5, 0.5), 0.2)
    count = g.ball_mask(b).sum()
    assert ball_integral(ScalarField.constant(g, 1.0), b) == pytest.approx(count * g.h ** 2, rel=1e-15)
    assert ball_average(ScalarField.constant(g, 1.0), b) == 1.0
    with pytest.raises(GridError):
        ball_integral(ScalarField.constant(g, 1.0), Ball((0.5, 0.5), 0.1 * g.h))


def test_ball_integral_of_x_squared_converges():
    # integral over B_{1/2}(0,0) of y1^2 restricted to the box is a quarter disc: pi r^4 / 16
    r = 0.5
    for m, tol in ((64, 0.02), (256, 0.005)):
        g = Grid.unit_square(m)
        val = ball_integral(g.sample(lambda x, y: x ** 2), Ball((0.0, 0.0), r))
        assert val == pytest.approx(math.pi * r ** 4 / 16, rel=tol)
    # centred ball, shifted integrand: integral of (x - 1/2)^2 over B_r(1/2, 1/2) -> pi r^4 / 4 = pi / 64
    g = Grid.unit_square(512)
    val = ball_integral(g.sample(lambda x, y: (x - 0.5) ** 2), Ball((0.5, 0.5), 0.5 - 1e-9))
    assert val == pytest.approx(math.pi / 64, rel=5e-3)


def test_ball_max_closed_flag():
    g = Grid.unit_square(8)
    u = g.sample(lambda x, y: x)
    c = g.center_of((4, 4))
    b = Ball(tuple(c), g.h)
    assert ball_max(u, b) == pytest.approx(c[0])
    assert ball_max(u, b, closed=True) == pytest.approx(c[0] + g.h)


def test_slice_average_examples():
    g = Grid.unit_square(64)
    layered = g.sample(lambda x, y: np.sin(5 * y) + (y > 0.3))
    for xp, r, yn in ((0.5, 0.2, 0.41), (0.3, 0.1, 0.77), (0.6, 0.35, 0.05)):
        j = int(yn / g.h)
        assert slice_average(layered, xp, r, yn) == layered.values[0, j]
    lin = g.sample(lambda x, y: x)
    assert slice_average(lin, 0.5, 0.25, 0.5) == pytest.approx(0.5, abs=1e-12)
    # (1 / 2r) integral_{-r}^{r} z^2 dz = r^2 / 3, slice centred at x' = 1/2
    g = Grid.unit_square(512)
    sq = g.sample(lambda x, y: (x - 0.5) ** 2)
    r = 0.25
    assert slice_average(sq, 0.5, r, 0.5) == pytest.approx(r * r / 3, rel=1e-3)
    with pytest.raises(GridError):
        slice_average(sq, 2.0, 0.1, 0.5)


def test_distance_examples():
    g = Grid.unit_square(32)
    assert np.all(distance_to_zero_set(ScalarField.constant(g, 0.0)).values == 0)
    assert np.all(np.isinf(distance_to_zero_set(ScalarField.constant(g, 1.0)).values))
    u = g.sample(lambda x, y: np.maximum(0.5 - y, 0))
    d = distance_to_zero_set(u).values
    Y = g.centers()[1]
    assert np.all(np.abs(d - np.maximum(0.5 - Y, 0)) <= g.h)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(0.05, 0.6))
def test_distance_matches_brute_force(seed, density):
    g = Grid((9, 7), 0.1)
    rng = np.random.default_rng(seed)
    vals = (rng.random(g.dims) > density).astype(float)
    d = distance_to_zero_set(ScalarField(g, vals)).values
    ref = brute_distance(vals, g.h)
    assert np.array_equal(np.isinf(d), np.isinf(ref))
    fin = np.isfinite(ref)
    assert np.allclose(d[fin], ref[fin], rtol=0, atol=1e-12)
    assert np.all(d[vals <= 0] == 0)


@settings(max_examples=40, deadline=None)
@given(st.floats(-5, 5), st.floats(0.1, 0.5), st.floats(0.2, 0.8), st.floats(0.2, 0.8))
def test_constant_average_is_exact(c, r, x, y):
    g = Grid.unit_square(24)
    assert ball_average(ScalarField.constant(g, c), Ball((x, y), r)) == c


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_ball_integral_additive_and_monotone(seed):
    g = Grid.unit_square(20)
    rng = np.random.default_rng(seed)
    f1, f2 = rng.random(g.dims), rng.random(g.dims)
    b = Ball(tuple(rng.uniform(0.2, 0.8, 2)), float(rng.uniform(0.1, 0.4)))
    part = rng.random(g.dims) < 0.5
    whole = ball_integral(ScalarField(g, f1), b)
    split = ball_integral(ScalarField(g, f1 * part), b) + ball_integral(ScalarField(g, f1 * ~part), b)
    assert whole == pytest.approx(split, rel=1e-12, abs=1e-15)
    assert ball_integral(ScalarField(g, f1 + f2), b) >= whole


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3))
def test_affine_gradient_exact(a, b, c):
    g = Grid.unit_square(12)
    du = discrete_gradient(g.sample(lambda x, y: a * x + b * y + c)).values
    assert np.allclose(du[1:-1, 1:-1], [a, b], rtol=0, atol=1e-9)


def test_positive_side_gradient_ignores_the_kink():
    g = Grid.unit_square(32)
    u = g.sample(lambda x, y: np.maximum(0.5 - y, 0))
    zero = u.values <= 0
    gu = positive_side_gradient(u, zero).values
    assert np.allclose(gu[~zero], [0.0, -1.0], atol=1e-12)
    assert np.all(gu[zero] == 0)
    # central differences across the kink report 3/4 in the last positive row
    assert np.abs(discrete_gradient(u).values[..., 1][~zero]).min() == pytest.approx(0.75)


def test_unit_ball_volume():
    assert unit_ball_volume(2) == pytest.approx(math.pi)
    assert unit_ball_volume(3) == pytest.approx(4 * math.pi / 3)
