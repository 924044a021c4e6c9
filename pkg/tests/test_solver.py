import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fblab.grid import Grid, MatrixField, ScalarField, VectorField
from fblab.instances import get_problem
from fblab.media import MediaSpec, make_dam, make_test_family
from fblab.solver import (
    BoundaryError,
    BoundarySpec,
    FluxOperator,
    SolverConfig,
    SolverError,
    default_eps_penal,
    linear_solve,
    refine_study,
    solve_problem_P,
)

from oracles import harmonic, two_layer_profile


def identity(g):
    return make_dam(g, ScalarField.constant(g, 1.0))


def test_affine_exactness():
    g = Grid.unit_square(24)
    m = identity(g)
    for func in (lambda x, y: x, lambda x, y: 0.3 * x - 2 * y + 1):
        u = linear_solve(m, None, BoundarySpec.from_function(g, func))
        assert np.allclose(u.values, func(*g.centers()), rtol=0, atol=1e-10)


def test_affine_exact_with_constant_anisotropic_matrix():
    g = Grid.unit_square(16)
    A = np.broadcast_to(np.array([[0.4, 0.1], [0.1, 0.3]]), g.dims + (2, 2))
    m = make_dam(g, MatrixField(g, A))
    func = lambda x, y: 1 + x + 0.5 * y
    u = linear_solve(m, None, BoundarySpec.from_function(g, func))
    assert np.allclose(u.values, func(*g.centers()), atol=1e-10)


def test_harmonic_second_order():
    errs = []
    for m in (32, 64):
        g = Grid.unit_square(m)
        u = linear_solve(identity(g), None, BoundarySpec.from_function(g, harmonic))
        errs.append(np.abs(u.values - harmonic(*g.centers())).max())
    assert 3.4 <= errs[0] / errs[1] <= 4.6


def test_two_layer_profile_exact():
    g = Grid.unit_square(32)
    k = g.sample(lambda x, y: np.where(y < 0.5, 1.0, 2.0))
    m = make_dam(g, k)
    prof = lambda x, y: two_layer_profile(y, 0.5, 1.0, 2.0, 1.0, 0.0)
    u = linear_solve(m, None, BoundarySpec.from_function(g, prof))
    assert np.allclose(u.values, prof(*g.centers()), atol=1e-10)
    # flux continuity: k du/dy is the same on both sides of the interface
    j = g.dims[1] // 2
    below = (u.values[:, j - 1] - u.values[:, j - 2]) / g.h * 1.0
    above = (u.values[:, j + 1] - u.values[:, j]) / g.h * 2.0
    assert np.allclose(below, above, atol=1e-8)


def test_linear_solve_with_forcing_balances_flux():
    g = Grid.unit_square(16)
    m = make_test_family(g, "checkerboard")
    bc = BoundarySpec.from_function(g, lambda x, y: 1 + x * y)
    u = linear_solve(m, m.f, bc)
    op = FluxOperator(m, bc)
    assert np.abs(op.residual(u.values, m.f.values)).max() < 1e-8


@pytest.mark.parametrize("method", ["cg", "bicgstab"])
def test_krylov_agrees_with_direct(method):
    g = Grid.unit_square(16)
    m = make_test_family(g, "layered")
    bc = BoundarySpec.from_function(g, lambda x, y: 1 + x)
    direct = linear_solve(m, m.f, bc)
    iterative = linear_solve(m, m.f, bc, SolverConfig(linear_method=method, linear_tol=1e-12))
    assert np.allclose(direct.values, iterative.values, atol=1e-8)


@pytest.mark.parametrize("m_cells", [64, 128])
def test_dam_exact(m_cells):
    g = Grid.unit_square(m_cells)
    exact = lambda x, y: np.maximum(0.5 - y, 0)
    bc = BoundarySpec.from_function(g, exact)
    for cfg in (SolverConfig(eps_penal=g.h / 2), SolverConfig()):
        sol = solve_problem_P(identity(g), bc, cfg)
        err = np.abs(sol.u.values - exact(*g.centers())).max()
        assert err <= 2 * g.h
        assert sol.residual_comp <= 2 * sol.eps_penal
        Y = g.centers()[1]
        assert np.all(sol.chi.values[Y < 0.5 - 2 * g.h] == 1.0)
    assert sol.eps_penal == pytest.approx(default_eps_penal(g, bc))


def test_positive_data_without_forcing():
    g = Grid.unit_square(32)
    m = identity(g)
    m = MediaSpec(m.A, VectorField(g, np.zeros(g.dims + (2,))), m.lam, 1e-300)
    bc = BoundarySpec.from_function(g, lambda x, y: 1 + x)
    sol = solve_problem_P(m, bc)
    assert np.all(sol.chi.values == 1.0)
    ref = linear_solve(m, None, bc)
    assert np.allclose(sol.u.values, ref.values, atol=1e-8)


def test_zero_data_gives_zero():
    g = Grid.unit_square(16)
    sol = solve_problem_P(make_test_family(g, "layered"), BoundarySpec.constant(g, 0.0))
    assert np.all(sol.u.values == 0) and sol.residual_comp == 0


def test_errors():
    g = Grid.unit_square(16)
    with pytest.raises(BoundaryError):
        solve_problem_P(identity(g), BoundarySpec.constant(g, -0.1))
    bad = identity(g)
    bad = MediaSpec(bad.A, bad.f, 0.9, 1.0)
    with pytest.raises(SolverError):
        solve_problem_P(bad, BoundarySpec.constant(g, 1.0))
    with pytest.raises(SolverError) as info:
        solve_problem_P(identity(g), BoundarySpec.from_function(g, lambda x, y: np.maximum(0.5 - y, 0)),
                        SolverConfig(method="picard", max_outer=2, eps_penal=g.h))
    assert info.value.trace
    with pytest.raises(ValueError):
        SolverConfig(theta=0.0)
    with pytest.raises(BoundaryError):
        BoundarySpec(g, {})


def test_picard_converges_without_free_boundary():
    g = Grid.unit_square(16)
    bc = BoundarySpec.from_function(g, lambda x, y: 2 + x)
    sol = solve_problem_P(identity(g), bc, SolverConfig(method="picard", eps_penal=0.01))
    ref = solve_problem_P(identity(g), bc)
    assert np.allclose(sol.u.values, ref.u.values, atol=1e-7)


def test_monotone_in_boundary_data():
    g = Grid.unit_square(32)
    m = identity(g)
    lo = solve_problem_P(m, BoundarySpec.from_function(g, lambda x, y: np.maximum(0.4 - y, 0)))
    hi = solve_problem_P(m, BoundarySpec.from_function(g, lambda x, y: np.maximum(0.6 - y, 0)))
    assert hi.u.values.max() >= lo.u.values.max()


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_solution_bounds_property(seed):
    g = Grid.unit_square(16)
    rng = np.random.default_rng(seed)
    k = ScalarField(g, np.broadcast_to(rng.uniform(0.5, 1.0, g.dims[1]), g.dims))
    m = make_dam(g, k)
    level = float(rng.uniform(0.2, 0.9))
    sol = solve_problem_P(m, BoundarySpec.from_function(g, lambda x, y: np.maximum(level - y, 0)))
    assert sol.u.values.min() >= 0
    assert 0 <= sol.chi.values.min() and sol.chi.values.max() <= 1
    assert math.isfinite(sol.residual_div) and sol.residual_div < 1e-6


def test_refine_study_examples():
    h_list = [1 / 32, 1 / 64, 1 / 128]
    dam = refine_study(get_problem("dam_exact"), h_list, delta=0.1)
    assert [r["h"] for r in dam.rows] == h_list
    assert np.allclose(dam.column("sup_grad"), 1.0, atol=1e-9)
    zero = refine_study(get_problem("trivial"), h_list)
    assert all(r["sup_grad"] == 0 for r in zero.rows)
    har = refine_study(get_problem("harmonic"), [1 / 64, 1 / 128, 1 / 256], delta=0.1)
    for row, sol in zip(har.rows, har.solutions):
        X, Y = sol.grid.centers()
        inner = sol.grid.boundary_distance() > 0.1
        c = math.pi / math.sinh(math.pi)
        exact = c * np.hypot(np.cos(math.pi * X) * np.sinh(math.pi * Y), np.sin(math.pi * X) * np.cosh(math.pi * Y))
        assert row["sup_grad"] == pytest.approx(exact[inner].max(), rel=0.02)
    with pytest.raises(ValueError):
        refine_study(get_problem("dam_exact"), [1 / 32, 1 / 64])
