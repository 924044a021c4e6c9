"""Quantitative regularity checks on computed solutions of (P).

Each check returns an ``EstimateReport``. Constants the theory leaves
inexplicit (the linear-growth constant, the gradient-estimate constant) are
fitted on one sweep and asserted on held-out probes or refinements.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .grid import Ball, Grid, ScalarField, VectorField, distance_to_zero_set, positive_side_gradient, unit_ball_volume
from .media import MediaSpec
from .moduli import Modulus, ModulusError, phi
from .reports import EstimateReport
from .solver import Solution

# quadrature slack c_q h / r for the midpoint-rule ball integrals
DEFAULT_CQ = 2.0
DEFAULT_C0_STAR = 1e-2


class PreconditionError(ValueError):
    """A geometric or smallness hypothesis of a check does not hold."""


@dataclass
class EmpiricalConstants:
    C2_hat: float = 0.0
    C1_hat: float = 0.0
    C0_star: float = DEFAULT_C0_STAR
    t0_hat: float | None = None

    def __post_init__(self):
        for name in ("C2_hat", "C1_hat", "C0_star"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.t0_hat is not None and not 0 < self.t0_hat <= 1:
            raise ValueError("t0_hat must lie in (0, 1]")


def gradient(sol: Solution) -> VectorField:
    return positive_side_gradient(sol.u, sol.zero_mask())


@functools.lru_cache(maxsize=8)
def grad_norm(sol: Solution) -> np.ndarray:
    """|grad_h u| per cell, cached per solution (solutions hash by identity)."""
    g = np.linalg.norm(gradient(sol).values, axis=-1)
    g.flags.writeable = False
    return g


def _masked(grid: Grid, ball: Ball, closed=False):
    mask = grid.ball_mask(ball, closed)
    if not mask.any():
        raise PreconditionError(f"ball of radius {ball.radius:g} contains no cell centres")
    return mask


def _require_interior(grid: Grid, ball: Ball, what: str):
    if not grid.ball_interior(ball):
        raise PreconditionError(f"{what}: ball B_{ball.radius:g}({ball.center}) is not compactly inside the grid")


def _require_positive(sol: Solution, ball: Ball, what: str):
    mask = _masked(sol.grid, ball, closed=True)
    if np.any(sol.zero_mask()[mask]):
        raise PreconditionError(f"{what}: ball B_{ball.radius:g}({ball.center}) enters the zero set {{u = 0}}")


def _touches_zero(sol: Solution, ball: Ball) -> bool:
    mask = sol.grid.ball_mask(ball, closed=True)
    return bool(np.any(sol.zero_mask()[mask])) or interpolate(sol.u, [ball.center])[0] <= sol.zero_threshold()


def caccioppoli_rhs(sol: Solution, m: MediaSpec, x0, r) -> float:
    grid = sol.grid
    n, lam, fb = grid.n, m.lam, m.f_bar
    big = _masked(grid, Ball(x0, 2 * r))
    u = sol.u.values[big]
    dv = grid.cell_volume
    return (32 / (lam ** 4 * r * r) * float((u * u).sum()) * dv
            + 8 * fb / (lam * r) * float(np.abs(u).sum()) * dv
            + 2 ** (n + 1) * fb * fb * unit_ball_volume(n) * r ** n / lam ** 2)


def check_caccioppoli(sol: Solution, m: MediaSpec, x0, r: float, c_q: float = DEFAULT_CQ) -> EstimateReport:
    """Energy on B_r bounded by u^2, |u| on B_2r plus the forcing term, with explicit constants.

    A ball on which u vanishes identically is accepted (both sides are trivially
    ordered); a ball that straddles {u = 0} is not.
    """
    grid = sol.grid
    if 2 * r <= 2 * grid.h:
        raise PreconditionError(f"2r = {2 * r:g} is below grid resolution")
    _require_interior(grid, Ball(x0, 2 * r), "caccioppoli")
    big = _masked(grid, Ball(x0, 2 * r), closed=True)
    if not np.all(sol.u.values[big] == 0):
        _require_positive(sol, Ball(x0, 2 * r), "caccioppoli")
    g2 = grad_norm(sol) ** 2
    lhs = float(g2[_masked(grid, Ball(x0, r))].sum() * grid.cell_volume)
    return EstimateReport("caccioppoli", x0, r, lhs, caccioppoli_rhs(sol, m, x0, r), c_q * grid.h / r)


def interpolate(u: ScalarField, points) -> np.ndarray:
    """(Multi)linear interpolant of the cell values, extended linearly past the outer centres."""
    grid = u.grid
    axes = tuple(grid.axis_centers(d) for d in range(grid.n))
    it = RegularGridInterpolator(axes, u.values, bounds_error=False, fill_value=None)
    return it(np.atleast_2d(np.asarray(points, dtype=float)))


def _sphere_points(n: int, count: int) -> np.ndarray:
    if n == 2:
        a = 2 * np.pi * np.arange(count) / count
        return np.stack([np.cos(a), np.sin(a)], axis=1)
    k = np.arange(count) + 0.5
    z = 1 - 2 * k / count
    a = np.pi * (1 + 5 ** 0.5) * k
    s = np.sqrt(1 - z * z)
    return np.stack([s * np.cos(a), s * np.sin(a), z], axis=1)


def closed_ball_max(u: ScalarField, x0, r: float) -> float:
    """Max over the closed ball of the linear interpolant (centres inside plus a dense boundary sample)."""
    grid = u.grid
    inside = grid.ball_mask(Ball(x0, r), closed=True)
    best = float(u.values[inside].max()) if inside.any() else -math.inf
    per = max(64, int(16 * 2 * math.pi * r / grid.h))
    count = per if grid.n == 2 else per * per // 4
    pts = np.asarray(x0, dtype=float) + r * _sphere_points(grid.n, count)
    best = max(best, float(interpolate(u, pts).max()), float(interpolate(u, [x0])[0]))
    return best


def check_linear_growth(sol: Solution, x0, r: float, C2: float | None = None, c_q: float = 0.0) -> EstimateReport:
    """max of u over the closed ball B_r(x0) against C2 r, for x0 with the ball touching {u = 0}.

    Without ``C2`` the report's rhs is r itself, so ``ratio`` is the observed growth constant.
    """
    grid = sol.grid
    _require_interior(grid, Ball(x0, 5 * r), "linear growth")
    if not _touches_zero(sol, Ball(x0, r)):
        raise PreconditionError(f"linear growth: closed ball B_{r:g}({x0}) misses the zero set")
    lhs = max(closed_ball_max(sol.u, x0, r), 0.0)
    rhs = r if C2 is None else C2 * r
    return EstimateReport("linear_growth", x0, r, lhs, rhs, c_q * grid.h / r)


def free_boundary_points(sol: Solution) -> np.ndarray:
    """Points where u, extrapolated from the positive side, reaches zero between a positive and a zero cell."""
    grid = sol.grid
    U = sol.u.values
    zero = sol.zero_mask()
    pos = ~zero
    h = grid.h
    pts = []
    centers = np.stack(grid.centers(), axis=-1)
    for d in range(grid.n):
        for direction in (1, -1):
            # P positive, Q = P + dir e_d zero, P' = P - dir e_d positive
            P = np.zeros(grid.dims, dtype=bool)
            core = [slice(1, -1)] * grid.n
            P[tuple(core)] = True
            P &= pos
            Q = np.roll(zero, -direction, axis=d)
            Pp = np.roll(pos, direction, axis=d)
            Up = np.roll(U, direction, axis=d)
            sel = P & Q & Pp & (Up > U)
            idx = np.argwhere(sel)
            for i in idx:
                i = tuple(i)
                delta = np.clip(U[i] * h / (Up[i] - U[i]), 0.0, h)
                x = centers[i].copy()
                x[d] += direction * delta
                pts.append(x)
    if not pts:
        return np.zeros((0, grid.n))
    pts = np.unique(np.round(np.array(pts), 14), axis=0)
    return pts


@dataclass
class GrowthFit:
    C2_hat: float
    exponent: float
    reports: list = field(default_factory=list)


def fixed_effects_slope(groups: Iterable[Sequence[tuple[float, float]]]) -> float:
    """Pooled least-squares slope of log y on log x with one intercept per group."""
    xs, ys = [], []
    for g in groups:
        if len(g) < 2:
            continue
        lx = np.log([p[0] for p in g])
        ly = np.log([p[1] for p in g])
        xs.append(lx - lx.mean())
        ys.append(ly - ly.mean())
    if not xs:
        raise PreconditionError("need at least one probe with two radii for a slope")
    x, y = np.concatenate(xs), np.concatenate(ys)
    return float((x * y).sum() / (x * x).sum())


def fit_linear_growth(sol: Solution, probes: np.ndarray, radii: Sequence[float]) -> GrowthFit:
    """Fit C2_hat = sup max u / r and the growth exponent over admissible (probe, r) pairs."""
    reports, groups = [], []
    for x0 in probes:
        g = []
        for r in radii:
            try:
                rep = check_linear_growth(sol, tuple(x0), r)
            except PreconditionError:
                continue
            reports.append(rep)
            if rep.lhs > 0:
                g.append((r, rep.lhs))
        groups.append(g)
    if not reports:
        raise PreconditionError("no admissible linear-growth probes")
    C2 = max(rep.ratio for rep in reports)
    try:
        expo = fixed_effects_slope(groups)
    except PreconditionError:
        expo = math.nan
    return GrowthFit(C2, expo, reports)


def c3_constant(C2: float, lam: float, f_bar: float, n: int) -> float:
    """omega_n 2^((n+1)/2) / lam^2 * sqrt(16 C2^2 + 4 C2 f_bar lam^3 + f_bar^2 lam^2)."""
    return (unit_ball_volume(n) * 2 ** ((n + 1) / 2) / lam ** 2
            * math.sqrt(16 * C2 ** 2 + 4 * C2 * f_bar * lam ** 3 + f_bar ** 2 * lam ** 2))


def c3_energy_constant(C2: float, lam: float, f_bar: float, n: int) -> float:
    """Same bound with the coefficients 64 and 8 that the energy estimate on B_r actually yields."""
    return (unit_ball_volume(n) * 2 ** ((n + 1) / 2) / lam ** 2
            * math.sqrt(64 * C2 ** 2 + 8 * C2 * f_bar * lam ** 3 + f_bar ** 2 * lam ** 2))


def check_l1_gradient(sol: Solution, m: MediaSpec, consts: EmpiricalConstants, x0, r: float,
                      c_q: float = DEFAULT_CQ) -> EstimateReport:
    """integral of |grad u| over B_r against C3 r^n near the free boundary."""
    grid = sol.grid
    _require_interior(grid, Ball(x0, 10 * r), "L1 gradient")
    if not _touches_zero(sol, Ball(x0, 2 * r)):
        raise PreconditionError(f"L1 gradient: closed ball B_{2 * r:g}({x0}) misses the zero set")
    g = grad_norm(sol)
    lhs = float(g[_masked(grid, Ball(x0, r))].sum() * grid.cell_volume)
    C3 = c3_constant(consts.C2_hat, m.lam, m.f_bar, grid.n)
    rep = EstimateReport("l1_gradient", x0, r, lhs, C3 * r ** grid.n, c_q * grid.h / r)
    rep.extra.update(C3=C3, C3_energy=c3_energy_constant(consts.C2_hat, m.lam, m.f_bar, grid.n))
    return rep


def gradient_bracket(sol: Solution, m: MediaSpec, moduli_f: Modulus, x0, rho: float) -> dict:
    grid = sol.grid
    g = grad_norm(sol)
    big = _masked(grid, Ball(x0, 3 * rho))
    l1 = float(g[big].sum() * grid.cell_volume)
    fn = float(np.abs(m.f.values[..., -1][big]).max())
    Phi_f = phi(moduli_f, rho)
    return {"l1": l1, "f_n": fn, "Phi_f": Phi_f, "bracket": rho ** (-grid.n) * l1 + fn + 4 * Phi_f}


def _phi_A_gate(moduli_A, consts: EmpiricalConstants, rho: float) -> float:
    """Phi_A(rho) from the given modulus, or via t0_hat (Phi_A is nondecreasing) when none is given."""
    if moduli_A is not None:
        Phi_A = phi(moduli_A, rho)
        if Phi_A > consts.C0_star:
            raise PreconditionError(
                f"smallness condition violated: Phi_A({rho:g}) = {Phi_A:g} > C0* = {consts.C0_star:g}")
        return Phi_A
    if consts.t0_hat is None:
        raise PreconditionError("smallness condition unchecked: pass moduli_A or set consts.t0_hat")
    if rho > consts.t0_hat:
        raise PreconditionError(f"smallness condition violated: rho = {rho:g} exceeds t0_hat = {consts.t0_hat:g}")
    return math.nan


def check_gradient_estimate(sol: Solution, m: MediaSpec, moduli_f: Modulus, consts: EmpiricalConstants,
                            x0, rho: float, moduli_A: Modulus | None = None) -> EstimateReport:
    """sup |grad u| on B_rho against 3^(2n) C1 (rho^-n |grad u|_L1(B_3rho) + |f_n|_inf + 4 Phi_f(rho)).

    With ``consts.C1_hat == 0`` the rhs uses C1 = 1, so ``ratio`` is the observed constant.
    """
    grid = sol.grid
    _require_interior(grid, Ball(x0, 3 * rho), "gradient estimate")
    _require_positive(sol, Ball(x0, 3 * rho), "gradient estimate")
    Phi_A = _phi_A_gate(moduli_A, consts, rho)
    g = grad_norm(sol)
    lhs = float(g[_masked(grid, Ball(x0, rho))].max())
    br = gradient_bracket(sol, m, moduli_f, x0, rho)
    C1 = consts.C1_hat or 1.0
    rep = EstimateReport("gradient_estimate", x0, rho, lhs, 3 ** (2 * grid.n) * C1 * br["bracket"])
    rep.extra.update(br, Phi_A=Phi_A, C0_star=consts.C0_star)
    return rep


def fit_gradient_constant(sol, m, moduli_f, consts, probes, rhos, moduli_A=None) -> tuple[float, list]:
    """C1_hat = sup over admissible (x0, rho) of sup|grad u| / (3^(2n) bracket)."""
    probe_consts = EmpiricalConstants(consts.C2_hat, 0.0, consts.C0_star, consts.t0_hat)
    reports = []
    for x0 in probes:
        for rho in rhos:
            try:
                reports.append(check_gradient_estimate(sol, m, moduli_f, probe_consts, tuple(x0), rho, moduli_A))
            except PreconditionError:
                continue
    if not reports:
        raise PreconditionError("no admissible gradient-estimate probes")
    return max(r.ratio for r in reports), reports


def constant_spread(values: Sequence[float]) -> float:
    """max/min - 1 over fitted constants from successive refinements."""
    v = np.asarray(values, dtype=float)
    return float(v.max() / v.min() - 1)


def estimate_t0(moduli_A: Modulus, C0_star: float, iters: int = 200) -> float:
    """Largest t in (0, 1] with Phi_A(t) <= C0_star, by bisection on the interpolant."""
    if not C0_star > 0:
        raise ValueError("C0_star must be positive")
    if phi(moduli_A, 1.0) <= C0_star:
        return 1.0
    lo = float(moduli_A.radii[0])
    if phi(moduli_A, lo) > C0_star:
        raise ModulusError("no admissible scale: Phi_A exceeds C0* already at the smallest radius")
    hi = 1.0
    for _ in range(iters):
        mid = math.sqrt(lo * hi) if hi / lo > 4 else 0.5 * (lo + hi)
        if phi(moduli_A, mid) <= C0_star:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * hi:
            break
    return lo


@dataclass
class CoveringResult:
    eps: float
    rows: list
    sup_grad: float

    @property
    def geometry_ok(self) -> bool:
        return all(row["geometry_ok"] for row in self.rows)

    def count(self, case: str) -> int:
        return sum(1 for row in self.rows if row["case"] == case)


def interior_mask(grid: Grid, delta: float) -> np.ndarray:
    """Cells whose centre is farther than ``delta`` from the boundary."""
    return grid.boundary_distance() > delta


def interior_sup_gradient(sol: Solution, delta: float) -> float:
    mask = interior_mask(sol.grid, delta)
    if not mask.any():
        raise PreconditionError(f"no cells at distance > {delta:g} from the boundary")
    return float(grad_norm(sol)[mask].max())


def covering_diagnostic(sol: Solution, m: MediaSpec | None, eps: float, t0_hat: float | None = None,
                        stride: int = 1) -> CoveringResult:
    """Split interior probes by whether B_3eps(x0) meets {u = 0} and verify the case-ii geometry.

    For case-ii probes every positive cell centre x in B_eps(x0) must satisfy
    r(x) < 4 eps and |x - x0| + 10 r(x) < 41 eps, i.e. B_10r(x)(x) inside B_41eps(x0).
    """
    grid = sol.grid
    if not eps > 0:
        raise PreconditionError("eps must be positive")
    if t0_hat is not None and eps >= 0.75 * t0_hat:
        raise PreconditionError(f"eps = {eps:g} is not below 3/4 t0 = {0.75 * t0_hat:g}")
    inner = interior_mask(grid, 41 * eps)
    if not inner.any():
        raise PreconditionError(f"Omega_41eps is empty for eps = {eps:g}")
    if eps < grid.h / 2:
        raise PreconditionError(f"eps = {eps:g} is below grid resolution")
    zero = sol.zero_mask()
    pos = ~zero
    dist = distance_to_zero_set(sol.u, sol.zero_threshold()).values
    g = grad_norm(sol)
    centers = np.stack(grid.centers(), axis=-1)
    probe_idx = np.argwhere(inner)
    if stride > 1:
        probe_idx = probe_idx[np.all(probe_idx % stride == 0, axis=1)]
    zero_pts = centers[zero]
    k3 = math.ceil(3 * eps / grid.h) + 1
    rows = []
    for idx in probe_idx:
        x0 = centers[tuple(idx)]
        win = tuple(slice(max(i - k3, 0), i + k3 + 1) for i in idx)
        wc = centers[win].reshape(-1, grid.n)
        wd = np.sqrt(((wc - x0) ** 2).sum(axis=1))
        wz = zero[win].ravel()
        case_ii = bool(np.any(wz & (wd < 3 * eps)))
        near = wd < eps
        samples = near & pos[win].ravel()
        local = float(g[win].ravel()[near].max()) if near.any() else 0.0
        row = {"x0": tuple(float(c) for c in x0), "case": "ii" if case_ii else "i",
               "samples": int(samples.sum()), "max_r": 0.0, "geometry_ok": True, "local_sup_grad": local,
               "bound": "free_boundary" if case_ii else "interior"}
        if case_ii and samples.any():
            r = dist[win].ravel()[samples]
            reach = wd[samples] + 10 * r
            row["max_r"] = float(r.max())
            row["geometry_ok"] = bool(np.all(r < 4 * eps) and np.all(reach < 41 * eps))
        rows.append(row)
    sup = float(g[inner].max())
    return CoveringResult(eps, rows, sup)


def dyadic_ball_sweep(grid: Grid, count: int = 50, seed: int = 0, k_min: int = 2, k_max: int | None = None,
                      margin: float = 0.0) -> list[tuple[tuple[float, ...], float]]:
    """Seeded (centre, r) pairs with r = 2^-k, k_min <= k <= k_max, centres uniform over the box.

    ``k_max`` defaults to the finest k with 2^-k >= 2h. Centres are drawn so that
    B_{(1 + margin) r} stays inside the box whenever that is possible.
    """
    if k_max is None:
        k_max = int(math.floor(-math.log2(2 * grid.h)))
    if k_max < k_min:
        raise PreconditionError(f"no dyadic radius in [2h, 2^-{k_min}]")
    rng = np.random.default_rng(seed)
    L = np.array(grid.extents)
    out = []
    for _ in range(count):
        r = 2.0 ** -int(rng.integers(k_min, k_max + 1))
        pad = np.minimum((1 + margin) * r, 0.5 * L)
        c = pad + rng.random(grid.n) * (L - 2 * pad)
        out.append((tuple(float(v) for v in c), r))
    return out
