"""Cell-centred finite volumes for div(A grad u + F) = 0 and the free-boundary fixed point.

The linear operator uses two-point fluxes with harmonic-mean normal
coefficients; off-diagonal entries of A couple through averaged cell
gradients. Dirichlet data sit on boundary faces, half a cell from the
adjacent centre.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid import Grid, GridError, MatrixField, ScalarField, VectorField, positive_side_gradient
from .media import MediaSpec, validate_media

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    def __init__(self, msg, residual=None, trace=None):
        super().__init__(msg)
        self.residual = residual
        self.trace = trace or []


class BoundaryError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class BoundarySpec:
    """Dirichlet values on boundary faces.

    ``faces[(axis, side)]`` (side 0 = low, 1 = high) holds one value per boundary
    face, shaped like the grid with ``axis`` removed.
    """

    grid: Grid
    faces: dict

    def __post_init__(self):
        for (axis, side), vals in self.faces.items():
            shape = tuple(d for i, d in enumerate(self.grid.dims) if i != axis)
            if np.shape(vals) != shape:
                raise BoundaryError(f"face ({axis},{side}) needs shape {shape}")
            if not np.all(np.isfinite(vals)):
                raise BoundaryError("boundary data must be finite")
        if len(self.faces) != 2 * self.grid.n:
            raise BoundaryError("every side of the box needs data")

    @classmethod
    def from_function(cls, grid: Grid, g: Callable[..., np.ndarray]) -> "BoundarySpec":
        faces = {}
        for axis in range(grid.n):
            for side in (0, 1):
                coords = []
                for d in range(grid.n):
                    if d == axis:
                        coords.append(np.array([0.0 if side == 0 else grid.extents[d]]))
                    else:
                        coords.append(grid.axis_centers(d))
                mesh = np.meshgrid(*coords, indexing="ij")
                vals = np.asarray(g(*mesh), dtype=float)
                vals = np.broadcast_to(vals, mesh[0].shape)
                faces[(axis, side)] = np.take(vals, 0, axis=axis).copy()
        return cls(grid, faces)

    @classmethod
    def constant(cls, grid: Grid, c: float) -> "BoundarySpec":
        return cls.from_function(grid, lambda *x: np.full(x[0].shape, float(c)))

    @property
    def min_value(self) -> float:
        return min(float(np.min(v)) for v in self.faces.values())

    @property
    def max_value(self) -> float:
        return max(float(np.max(v)) for v in self.faces.values())


@dataclass
class SolverConfig:
    eps_penal: float | None = None  # None: 2 h times the boundary-data gradient scale
    theta: float = 0.5
    tol: float = 1e-8
    max_outer: int = 2000
    linear_tol: float = 1e-10
    linear_maxiter: int = 20000
    linear_method: str = "direct"  # or "cg", "bicgstab"
    method: str = "newton"  # or "picard"
    continuation: float = 4.0  # newton: eps_p starts this many times larger, halving down
    warm_start: bool = True  # newton: start from the solution on the 2x coarser grid

    def __post_init__(self):
        if self.eps_penal is not None and not self.eps_penal > 0:
            raise ValueError("eps_penal must be positive")
        if self.method not in ("newton", "picard"):
            raise ValueError(f"unknown outer method {self.method!r}")
        if not 0 < self.theta <= 1:
            raise ValueError("theta must lie in (0, 1]")
        for name in ("tol", "max_outer", "linear_tol", "linear_maxiter"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass(eq=False)
class Solution:
    u: ScalarField
    chi: ScalarField
    residual_div: float
    residual_comp: float
    outer_iters: int
    eps_penal: float = 0.0
    tol: float = 0.0
    trace: list = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def grid(self) -> Grid:
        return self.u.grid

    @classmethod
    def exact(cls, u: ScalarField, chi: ScalarField | None = None, eps_penal: float = 0.0, tol: float = 0.0) -> "Solution":
        """Wrap a known pair (u, chi) so the regularity checks can run on it."""
        if chi is None:
            chi = ScalarField(u.grid, (u.values > 0).astype(float))
        comp = float(np.max(u.values * (1 - chi.values)))
        return cls(u, chi, 0.0, comp, 0, eps_penal, tol)

    def zero_mask(self) -> np.ndarray:
        return self.u.values <= self.zero_threshold()

    def zero_threshold(self) -> float:
        """Level below which u counts as zero: max(eps_p, 10 tol) * max u."""
        return max(self.eps_penal, 10 * self.tol) * max(float(self.u.values.max()), 0.0)


def _lin(grid: Grid) -> np.ndarray:
    return np.arange(grid.size).reshape(grid.dims)


def _slices(axis, n, lo, hi):
    s = [slice(None)] * n
    s[axis] = slice(lo, hi)
    return tuple(s)


def _gradient_operators(grid: Grid) -> list[sp.csr_matrix]:
    """Sparse matrices reproducing ``discrete_gradient`` component by component."""
    idx = _lin(grid)
    h = grid.h
    ops = []
    for axis in range(grid.n):
        m = grid.dims[axis]
        rows, cols, vals = [], [], []
        pos = np.moveaxis(idx, axis, 0)
        for k in range(m):
            r = pos[k].ravel()
            if k == 0:
                terms = [(1, 1 / h), (0, -1 / h)]
            elif k == m - 1:
                terms = [(m - 1, 1 / h), (m - 2, -1 / h)]
            else:
                terms = [(k + 1, 0.5 / h), (k - 1, -0.5 / h)]
            for kk, w in terms:
                rows.append(r)
                cols.append(pos[kk].ravel())
                vals.append(np.full(r.size, w))
        ops.append(sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                                 shape=(grid.size, grid.size)))
    return ops


class FluxOperator:
    """Discrete ``u -> div(A grad u)`` plus the boundary and forcing contributions.

    ``apply(u) + boundary_term + forcing(F)`` is the cellwise net outward flux
    divided by cell volume.
    """

    def __init__(self, media: MediaSpec, bc: BoundarySpec):
        grid = media.grid
        if bc.grid != grid:
            raise GridError("boundary data and media live on different grids")
        self.grid = grid
        n, h, N = grid.n, grid.h, grid.size
        A = media.A.values
        idx = _lin(grid)
        grads = _gradient_operators(grid) if self._has_cross(A) else None

        rows, cols, vals = [], [], []
        cross = sp.csr_matrix((N, N))
        b = np.zeros(grid.dims)
        for d in range(n):
            lo = _slices(d, n, 0, grid.dims[d] - 1)
            hi = _slices(d, n, 1, None)
            P, Q = idx[lo].ravel(), idx[hi].ravel()
            aP, aQ = A[lo][..., d, d].ravel(), A[hi][..., d, d].ravel()
            t = 2 * aP * aQ / (aP + aQ) / h ** 2
            # interior faces: +t(uQ-uP) into P, -t(uQ-uP) into Q
            rows += [P, P, Q, Q]
            cols += [Q, P, P, Q]
            vals += [t, -t, t, -t]
            for side in (0, 1):
                sl = _slices(d, n, 0, 1) if side == 0 else _slices(d, n, grid.dims[d] - 1, None)
                cells = idx[sl].ravel()
                a = A[sl][..., d, d].ravel()
                g = bc.faces[(d, side)].ravel()
                w = 2 * a / h ** 2
                rows.append(cells)
                cols.append(cells)
                vals.append(-w)
                np.add.at(b.reshape(-1), cells, w * g)
            if grads is not None:
                cross = cross + self._cross_terms(A, d, idx, grads)
        L = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(N, N))
        self.matrix = (L + cross).tocsr()
        self.symmetric = grads is None
        self.boundary_term = b.ravel()
        self._div = [self._forcing_divergence(d) for d in range(n)]
        self._lu = None

    @staticmethod
    def _has_cross(A):
        off = A.copy()
        n = A.shape[-1]
        off[..., range(n), range(n)] = 0
        return bool(np.any(off != 0))

    def _cross_terms(self, A, d, idx, grads):
        """Sum over j != d of a_dj d_j u on the faces normal to axis d."""
        grid = self.grid
        n, h, N = grid.n, grid.h, grid.size
        total = sp.csr_matrix((N, N))
        for j in range(n):
            if j == d or not np.any(A[..., d, j]):
                continue
            a = A[..., d, j]
            m = grid.dims[d]
            # face values of a_dj * d_j u: interior faces average the two cells
            cellwise = sp.diags(a.ravel()) @ grads[j]
            rows, cols, vals = [], [], []
            pos = np.moveaxis(idx, d, 0)
            # div contribution = (q_{k+1/2} - q_{k-1/2}) / h, q = half-sum of neighbouring cell fluxes
            for k in range(m):
                r = pos[k].ravel()
                up = [k, k + 1] if k < m - 1 else [k, k]
                dn = [k - 1, k] if k > 0 else [k, k]
                for kk in up:
                    rows.append(r); cols.append(pos[kk].ravel()); vals.append(np.full(r.size, 0.5 / h))
                for kk in dn:
                    rows.append(r); cols.append(pos[kk].ravel()); vals.append(np.full(r.size, -0.5 / h))
            S = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(N, N))
            total = total + S @ cellwise
        return total

    def _forcing_divergence(self, d):
        """Sparse map from component d of a cell vector field to its face-averaged divergence."""
        grid = self.grid
        n, h, N = grid.n, grid.h, grid.size
        idx = _lin(grid)
        pos = np.moveaxis(idx, d, 0)
        m = grid.dims[d]
        rows, cols, vals = [], [], []
        for k in range(m):
            r = pos[k].ravel()
            # high face of cell k
            for kk in ([k, k + 1] if k < m - 1 else [k, k]):
                rows.append(r); cols.append(pos[kk].ravel()); vals.append(np.full(r.size, 0.5 / h))
            for kk in ([k - 1, k] if k > 0 else [k, k]):
                rows.append(r); cols.append(pos[kk].ravel()); vals.append(np.full(r.size, -0.5 / h))
        return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(N, N))

    def forcing(self, F: np.ndarray) -> np.ndarray:
        return sum(self._div[d] @ F[..., d].ravel() for d in range(self.grid.n))

    def residual(self, u: np.ndarray, F: np.ndarray | None = None) -> np.ndarray:
        r = self.matrix @ u.ravel() + self.boundary_term
        if F is not None:
            r = r + self.forcing(F)
        return r.reshape(self.grid.dims)

    def solve(self, rhs: np.ndarray, cfg: SolverConfig) -> np.ndarray:
        """Solve ``matrix @ u = rhs`` and certify the residual against ``cfg.linear_tol``."""
        M = self.matrix
        scale = max(np.abs(rhs).max(), 1.0)
        if cfg.linear_method == "direct":
            if self._lu is None:
                self._lu = spla.splu(M.tocsc())
            u = self._lu.solve(rhs)
        elif cfg.linear_method in ("cg", "bicgstab"):
            method = spla.cg if cfg.linear_method == "cg" and self.symmetric else spla.bicgstab
            # the operator is negative definite; CG runs on its negation
            u, info = method(-M, -rhs, rtol=cfg.linear_tol, atol=0.0, maxiter=cfg.linear_maxiter)
            if info != 0:
                res = float(np.abs(M @ u - rhs).max())
                raise SolverError(f"{cfg.linear_method} did not converge (info={info})", residual=res)
        else:
            raise ValueError(f"unknown linear method {cfg.linear_method!r}")
        res = float(np.abs(M @ u - rhs).max())
        if res > cfg.linear_tol * scale * 1e3 and cfg.linear_method == "direct":
            raise SolverError("direct solve lost accuracy", residual=res)
        return u


def linear_solve(m: MediaSpec, F: VectorField | None, bc: BoundarySpec,
                 cfg: SolverConfig | None = None, op: FluxOperator | None = None) -> ScalarField:
    """Solve div(A grad u + F) = 0 with Dirichlet data ``bc``."""
    cfg = cfg or SolverConfig()
    report = validate_media(m)
    if not report.passed:
        raise SolverError(f"invalid media: {[c.name for c in report.checks if not c.passed]}")
    op = op or FluxOperator(m, bc)
    rhs = -op.boundary_term
    if F is not None:
        rhs = rhs - op.forcing(F.values)
    u = op.solve(rhs, cfg)
    return ScalarField(m.grid, u.reshape(m.grid.dims))


def default_eps_penal(grid: Grid, bc: BoundarySpec) -> float:
    """2 h times the gradient scale of the data: the steepest slope of g along the boundary."""
    slope = 0.0
    for vals in bc.faces.values():
        for ax in range(vals.ndim):
            if vals.shape[ax] > 1:
                slope = max(slope, float(np.abs(np.diff(vals, axis=ax)).max()) / grid.h)
    if slope == 0.0:
        diam = math.sqrt(sum(L * L for L in grid.extents))
        slope = bc.max_value / diam or 1.0
    return 2 * grid.h * slope


def _heaviside(u, eps):
    return np.clip(u / eps, 0.0, 1.0)


def _picard(op, m, bc, cfg, eps, trace):
    grid = m.grid
    f = m.f.values
    chi = np.ones(grid.dims)
    u = None
    for it in range(1, cfg.max_outer + 1):
        u_new = linear_solve(m, VectorField(grid, chi[..., None] * f), bc, cfg, op).values
        u_new = np.maximum(u_new, 0.0)
        chi_new = (1 - cfg.theta) * chi + cfg.theta * _heaviside(u_new, eps)
        du = np.inf if u is None else float(np.abs(u_new - u).max())
        dchi = float(np.abs(chi_new - chi).max())
        trace.append((du, dchi))
        u, chi = u_new, chi_new
        if du <= cfg.tol * max(1.0, float(u.max())) and dchi <= cfg.tol:
            return u, chi, it
    raise SolverError(f"outer iteration hit cap {cfg.max_outer}", residual=trace[-1], trace=trace)


def _coarsen_blocks(a: np.ndarray, axes) -> np.ndarray:
    for ax in axes:
        a = np.moveaxis(a, ax, 0)
        a = 0.5 * (a[0::2] + a[1::2])
        a = np.moveaxis(a, 0, ax)
    return a


def _coarse_problem(m: MediaSpec, bc: BoundarySpec):
    """Cell-averaged media and face-averaged data on the grid with twice the spacing."""
    grid = m.grid
    n = grid.n
    coarse = Grid(tuple(d // 2 for d in grid.dims), 2 * grid.h)
    axes = range(n)
    A = MatrixField(coarse, _coarsen_blocks(m.A.values, axes))
    f = VectorField(coarse, _coarsen_blocks(m.f.values, axes))
    faces = {}
    for (axis, side), vals in bc.faces.items():
        faces[(axis, side)] = _coarsen_blocks(vals, range(n - 1))
    return MediaSpec(A, f, m.lam, m.f_bar, m.provenance), BoundarySpec(coarse, faces)


def _warm_start(m, bc, cfg, eps):
    grid = m.grid
    if any(d % 2 or d < 32 for d in grid.dims):
        return None
    mc, bcc = _coarse_problem(m, bc)
    sub = replace(cfg, eps_penal=2 * eps)
    uc = _newton(FluxOperator(mc, bcc), mc, bcc, sub, 2 * eps, [])[3]
    for ax in range(grid.n):
        uc = np.repeat(uc, 2, axis=ax)
    return uc.ravel()


def _newton(op, m, bc, cfg, eps, trace):
    """Semismooth Newton on div(A grad u + H(u) f) = 0, H(u) = clamp(u/eps, 0, 1).

    eps_p is approached from ``continuation * eps`` by halving; every stage is
    warm started from the previous one.
    """
    grid = m.grid
    f = m.f.values
    M = op.matrix
    Df = [op._div[d] @ sp.diags(f[..., d].ravel()) for d in range(grid.n)]
    Df = sum(Df[1:], Df[0]).tocsr()

    def F(u):
        return M @ u + op.boundary_term + Df @ _heaviside(u, eps_k)

    u = _warm_start(m, bc, cfg, eps) if cfg.warm_start else None
    if u is None:
        u = linear_solve(m, m.f, bc, cfg, op).values.ravel()
        e = eps * max(cfg.continuation, 1.0)
    else:
        e = eps
    stages = []
    while e > eps * (1 + 1e-12):
        stages.append(e)
        e /= 2
    stages.append(eps)
    scale = max(1.0, float(np.abs(op.boundary_term).max()) * grid.h ** 2)
    it = 0
    for eps_k in stages:
        r = F(u)
        rnorm = float(np.linalg.norm(r))
        for _ in range(cfg.max_outer):
            if it >= cfg.max_outer:
                raise SolverError(f"newton hit iteration cap {cfg.max_outer}", residual=rnorm, trace=trace)
            it += 1
            active = ((u > 0) & (u < eps_k)).astype(float) / eps_k
            J = (M + Df @ sp.diags(active)).tocsc()
            du = spla.spsolve(J, -r)
            step = 1.0
            while True:
                u_try = u + step * du
                r_try = F(u_try)
                n_try = float(np.linalg.norm(r_try))
                if n_try < (1 - 1e-4 * step) * rnorm or step < 1e-3:
                    break
                step /= 2
            dmax = float(np.abs(step * du).max())
            u, r, rnorm = u_try, r_try, n_try
            trace.append((dmax, float(np.abs(r).max()) * grid.h ** 2))
            if dmax <= cfg.tol * max(1.0, float(u.max())) and np.abs(r).max() * grid.h ** 2 <= cfg.linear_tol * scale * 1e2:
                break
        else:
            raise SolverError(f"newton stage eps={eps_k:g} did not converge", residual=rnorm, trace=trace)
    u = u.reshape(grid.dims)
    return np.maximum(u, 0.0), _heaviside(u, eps), it, u


def solve_problem_P(m: MediaSpec, bc: BoundarySpec, cfg: SolverConfig | None = None) -> Solution:
    """Solve (P) with chi regularised as clamp(u / eps_p, 0, 1) and u projected onto u >= 0.

    ``method="newton"`` (default) solves the regularised system exactly by
    semismooth Newton with eps continuation. ``method="picard"`` is the plain
    fixed point: chi starts at 1, each sweep solves the linear problem with
    forcing chi f, projects u and relaxes chi by ``theta``.
    """
    cfg = cfg or SolverConfig()
    if bc.min_value < 0:
        raise BoundaryError(f"boundary data must be nonnegative, min is {bc.min_value:g}")
    report = validate_media(m)
    if not report.passed:
        raise SolverError(f"invalid media: {[c.name for c in report.checks if not c.passed]}")
    t0 = time.perf_counter()
    grid = m.grid
    eps = cfg.eps_penal if cfg.eps_penal is not None else default_eps_penal(grid, bc)
    op = FluxOperator(m, bc)
    trace: list = []
    if bc.max_value == 0:
        # u = 0, chi = 0 solves the regularised system exactly; iterating only adds round-off
        u, chi, it = np.zeros(grid.dims), np.zeros(grid.dims), 0
    elif cfg.method == "picard":
        u, chi, it = _picard(op, m, bc, cfg, eps, trace)
    else:
        try:
            u, chi, it = _newton(op, m, bc, cfg, eps, trace)[:3]
        except SolverError:
            if not cfg.warm_start:
                raise
            log.warning("warm-started newton failed; retrying with eps continuation")
            trace.clear()
            u, chi, it = _newton(op, m, bc, replace(cfg, warm_start=False), eps, trace)[:3]
    chi = np.clip(chi, 0.0, 1.0)
    res = op.residual(u, chi[..., None] * m.f.values)
    sol = Solution(
        u=ScalarField(grid, u),
        chi=ScalarField(grid, chi),
        residual_div=float(np.abs(res).max()),
        residual_comp=float(np.max(u * (1 - chi))),
        outer_iters=it,
        eps_penal=eps,
        tol=cfg.tol,
        trace=trace,
        wall_time=time.perf_counter() - t0,
    )
    log.info("problem P solved in %d iterations, comp residual %.3e", it, sol.residual_comp)
    return sol


@dataclass
class RefineTable:
    rows: list
    solutions: list

    def column(self, key: str) -> list:
        return [row[key] for row in self.rows]


def interior_sup_grad(sol: Solution, delta: float) -> float:
    """max |grad_h u| over cells farther than ``delta`` from the boundary (positive-side stencils)."""
    inner = sol.grid.boundary_distance() > delta
    if not inner.any():
        raise GridError(f"no cells at distance > {delta:g} from the boundary")
    g = np.linalg.norm(positive_side_gradient(sol.u, sol.zero_mask()).values, axis=-1)
    return float(g[inner].max())


def refine_study(problem, h_list: Sequence[float], delta: float = 0.1, cfg: SolverConfig | None = None) -> RefineTable:
    """Solve ``problem`` at each spacing and tabulate the interior gradient and residuals.

    ``problem.setup(h, cfg)`` must return (media, boundary, config).
    """
    if len(h_list) < 3:
        raise ValueError("a refinement study needs at least three grid levels")
    rows, sols = [], []
    for h in h_list:
        m, bc, c = problem.setup(h, cfg)
        sol = solve_problem_P(m, bc, c)
        rows.append({
            "h": float(h),
            "sup_grad": interior_sup_grad(sol, delta),
            "residual_div": sol.residual_div,
            "residual_comp": sol.residual_comp,
            "outer_iters": sol.outer_iters,
            "eps_penal": sol.eps_penal,
        })
        sols.append(sol)
    return RefineTable(rows, sols)
