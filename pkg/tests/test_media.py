import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fblab.grid import Ball, Grid, GridError, MatrixField, ScalarField, VectorField
from fblab.media import (
    MediaError,
    MediaSpec,
    admissible_lambda,
    make_dam,
    make_electrolysis,
    make_lubrication,
    make_test_family,
    validate_media,
)
from fblab.moduli import estimate_field_modulus


def media_spec(g, A, lam, f=None, f_bar=1.0):
    A = np.broadcast_to(np.asarray(A, dtype=float), g.dims + (2, 2))
    f = np.zeros(g.dims + (2,)) if f is None else f
    return MediaSpec(MatrixField(g, A), VectorField(g, f), lam, f_bar)


def test_validate_examples():
    g = Grid.unit_square(8)
    rep = validate_media(media_spec(g, np.eye(2), 0.5))
    assert rep.passed
    assert rep["bounded"].margin == pytest.approx(0.0, abs=1e-9)
    rep = validate_media(media_spec(g, np.diag([3.0, 1.0]), 0.5))
    assert not rep["bounded"].passed and rep["elliptic"].passed
    A = np.broadcast_to(np.eye(2), g.dims + (2, 2)).copy() * 0.5
    A[3, 5] = np.diag([0.1, 0.5])
    rep = validate_media(media_spec(g, A, 0.2))
    assert not rep["elliptic"].passed and rep["elliptic"].worst_cell == (3, 5)


def test_validate_checks_f_bound_and_grid():
    g = Grid.unit_square(8)
    f = np.zeros(g.dims + (2,))
    f[2, 2] = (0.5, 0.7)
    assert not validate_media(media_spec(g, np.eye(2), 0.5, f, f_bar=1.0))["f_bounded"].passed
    assert validate_media(media_spec(g, np.eye(2), 0.5, f, f_bar=1.2)).passed
    other = Grid.unit_square(16)
    m = MediaSpec(MatrixField(g, np.broadcast_to(np.eye(2), g.dims + (2, 2))), VectorField(other, np.zeros(other.dims + (2,))), 0.5, 1.0)
    with pytest.raises(GridError):
        validate_media(m)


def test_symmetric_part_is_checked():
    g = Grid.unit_square(8)
    skew = np.array([[0.3, 0.2], [-0.2, 0.3]])
    assert validate_media(media_spec(g, skew, 0.25)).passed
    assert admissible_lambda(np.broadcast_to(skew, g.dims + (2, 2))) == pytest.approx(0.3)


def test_make_dam_examples():
    g = Grid.unit_square(16)
    m = make_dam(g, ScalarField.constant(g, 1.0))
    assert np.all(m.f.values == [0.0, 1.0])
    assert m.lam == 0.5 and m.f_bar == 1.0
    lay = make_test_family(g, "layered", {"k_low": 1.0, "k_high": 2.0})
    Y = g.centers()[1]
    assert np.array_equal(lay.f.values[..., 1], np.where(Y < 0.5, 1.0, 2.0))
    assert np.all(lay.f.values[..., 0] == 0)
    with pytest.raises(MediaError):
        make_dam(g, ScalarField.constant(g, 0.0))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(0.1, 0.5))
def test_random_layered_dam_validates(seed, lam):
    g = Grid.unit_square(16)
    rng = np.random.default_rng(seed)
    k_layers = rng.uniform(lam, 1 / (lam * 2), size=g.dims[1])
    k = ScalarField(g, np.broadcast_to(k_layers, g.dims))
    m = make_dam(g, k, lam=lam)
    assert validate_media(m).passed
    assert np.array_equal(m.f.values, np.einsum("...ij,j->...i", m.A.values, [0.0, 1.0]))


def test_lubrication_examples():
    g = Grid.unit_square(16)
    m = make_lubrication(g, ScalarField.constant(g, 1.0))
    assert np.all(m.A.values == np.eye(2)) and np.all(m.f.values == [0.0, 1.0])
    h = g.sample(lambda x, y: 1 + y / 2)
    m = make_lubrication(g, h)
    assert np.allclose(m.A.values[..., 0, 0], h.values ** 3)
    assert np.all(m.A.values[..., 0, 1] == 0)
    with pytest.raises(MediaError):
        make_lubrication(g, g.sample(lambda x, y: y - 0.5))


def test_piecewise_film_has_zero_modulus():
    g = Grid.unit_square(64)
    h = g.sample(lambda x, y: np.where(y < 0.4, 1.0, 1.3))
    for m in (make_lubrication(g, h), make_electrolysis(g, g.sample(lambda x, y: 1 + (y > 0.6)), h)):
        mod = estimate_field_modulus(m.A, Ball((0.5, 0.5), 0.2), [0.05, 0.1])
        assert np.all(mod.values == 0)
        assert validate_media(m).passed


def test_electrolysis_examples():
    g = Grid.unit_square(16)
    m = make_electrolysis(g, ScalarField.constant(g, 1.0), ScalarField.constant(g, 1.0))
    assert np.all(m.A.values == np.eye(2)) and np.all(m.f.values == [0.0, 1.0])
    with pytest.raises(MediaError):
        make_electrolysis(g, ScalarField.constant(g, 0.0), ScalarField.constant(g, 1.0))


@pytest.mark.parametrize("kind", ["layered", "holder_xprime", "sign_x1", "checkerboard"])
def test_families_validate(kind):
    g = Grid.unit_square(32)
    m = make_test_family(g, kind)
    assert validate_media(m).passed
    assert m.provenance["generator"] == kind


def test_family_errors():
    g = Grid.unit_square(16)
    with pytest.raises(MediaError):
        make_test_family(g, "nope")
    with pytest.raises(MediaError):
        make_test_family(g, "holder_xprime", {"alpha": 1.5})
    with pytest.raises(MediaError):
        make_test_family(g, "layered", {"k_low": -1.0})
    with pytest.raises(MediaError):
        make_dam(g, ScalarField.constant(g, 1.0), lam=0.9)
