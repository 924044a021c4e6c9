"""Coefficient data (A, f) for problem (P): structural checks and generators.

A ``MediaSpec`` carries a declared ellipticity constant ``lam`` and a declared
bound ``f_bar``; every downstream estimate uses these declared values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import Grid, GridError, MatrixField, ScalarField, VectorField


class MediaError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class MediaSpec:
    A: MatrixField
    f: VectorField
    lam: float
    f_bar: float
    provenance: dict = field(default_factory=dict)

    @property
    def grid(self) -> Grid:
        return self.A.grid


@dataclass
class CheckResult:
    name: str
    passed: bool
    margin: float  # min over cells of (allowed - observed); negative on failure
    worst_cell: tuple[int, ...]


@dataclass
class MediaReport:
    checks: list[CheckResult]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name: str) -> CheckResult:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)


def entry_sum(A: np.ndarray) -> np.ndarray:
    return np.abs(A).sum(axis=(-2, -1))


def min_sym_eig(A: np.ndarray) -> np.ndarray:
    """Smallest eigenvalue of the symmetric part, cellwise."""
    sym = 0.5 * (A + np.swapaxes(A, -1, -2))
    return np.linalg.eigvalsh(sym)[..., 0]


def _check(name, margins):
    k = np.unravel_index(int(np.argmin(margins)), margins.shape)
    worst = float(margins[k])
    return CheckResult(name, worst >= 0, worst, tuple(int(i) for i in k))


def validate_media(m: MediaSpec) -> MediaReport:
    """Cellwise checks of the bound on sum |a_ij|, ellipticity, and the bound on f."""
    if m.A.grid != m.f.grid:
        raise GridError("A and f live on different grids")
    A = m.A.values
    # tiny relative tolerance so that a lambda computed from the data itself validates
    rel = 1e-12
    bound = entry_sum(A)
    return MediaReport([
        _check("bounded", 1.0 / m.lam * (1 + rel) - bound),
        _check("elliptic", min_sym_eig(A) - m.lam * (1 - rel)),
        _check("f_bounded", m.f_bar * (1 + rel) - np.abs(m.f.values).sum(axis=-1)),
    ])


def admissible_lambda(A: np.ndarray) -> float:
    """Largest lambda for which both structural conditions on A hold."""
    eig = float(min_sym_eig(A).min())
    if eig <= 0:
        raise MediaError(f"ellipticity lost: min eigenvalue of symmetric part is {eig:g}")
    return min(eig, 1.0 / float(entry_sum(A).max()), 1.0)


def _finish(A: MatrixField, f: VectorField, lam, f_bar, provenance) -> MediaSpec:
    if lam is None:
        lam = admissible_lambda(A.values)
    if f_bar is None:
        f_bar = float(np.abs(f.values).sum(axis=-1).max())
        if f_bar == 0:
            f_bar = np.finfo(float).tiny
    m = MediaSpec(A, f, float(lam), float(f_bar), provenance)
    report = validate_media(m)
    if not report.passed:
        bad = [c.name for c in report.checks if not c.passed]
        raise MediaError(f"media violates {bad} with lambda={lam}, f_bar={f_bar}")
    return m


def _as_matrix(permeability) -> MatrixField:
    if isinstance(permeability, MatrixField):
        return permeability
    if isinstance(permeability, ScalarField):
        return MatrixField.scalar_times_identity(permeability)
    raise TypeError("permeability must be a ScalarField or MatrixField")


def make_dam(grid: Grid, permeability, lam=None, f_bar=None) -> MediaSpec:
    """Heterogeneous dam: f = A e with e the last coordinate direction."""
    A = _as_matrix(permeability)
    if A.grid != grid:
        raise GridError("permeability lives on a different grid")
    f = VectorField(grid, A.values[..., :, -1])
    return _finish(A, f, lam, f_bar, {"generator": "dam"})


def _positive(field: ScalarField, what: str):
    lo = float(field.values.min())
    if lo <= 0:
        raise MediaError(f"{what} must stay away from 0, min is {lo:g}")


def _vertical(grid: Grid, scalar: np.ndarray) -> VectorField:
    f = np.zeros(grid.dims + (grid.n,))
    f[..., -1] = scalar
    return VectorField(grid, f)


def make_lubrication(grid: Grid, h_field: ScalarField, lam=None, f_bar=None) -> MediaSpec:
    """Reynolds lubrication: A = h^3 I, f = h e."""
    if grid.n != 2:
        raise MediaError("lubrication media are two-dimensional")
    _positive(h_field, "film thickness h")
    A = MatrixField.scalar_times_identity(ScalarField(grid, h_field.values ** 3))
    return _finish(A, _vertical(grid, h_field.values), lam, f_bar, {"generator": "lubrication"})


def make_electrolysis(grid: Grid, k_field: ScalarField, h_field: ScalarField, lam=None, f_bar=None) -> MediaSpec:
    """Aluminium electrolysis: A = k I, f = h e."""
    if grid.n != 2:
        raise MediaError("electrolysis media are two-dimensional")
    _positive(k_field, "conductivity k")
    A = MatrixField.scalar_times_identity(k_field)
    return _finish(A, _vertical(grid, h_field.values), lam, f_bar, {"generator": "electrolysis"})


FAMILIES = ("layered", "holder_xprime", "sign_x1", "checkerboard")


def make_test_family(grid: Grid, kind: str, params: dict | None = None, lam=None, f_bar=None) -> MediaSpec:
    """Dam-type media (f = A e) from a named coefficient family.

    layered        k(x_n) = k_low below ``interface`` (fraction of L_n), k_high above; A = k I
    holder_xprime  a_11 = base + c |x_1 - L_1/2|^alpha, a_22 = base; the x'-modulus of a_11 is <= 2 c r^alpha
    sign_x1        a_11 = base (2 + sign(x_1 - L_1/2)), a_22 = base; jump across x_1 = L_1/2, not Dini
    checkerboard   A = k I with k alternating k_low/k_high on square blocks of side ``block``
    """
    p = dict(params or {})
    X = grid.centers()
    L = grid.extents
    n = grid.n
    if kind == "layered":
        lo, hi = p.get("k_low", 1.0), p.get("k_high", 2.0)
        interfaces = np.atleast_1d(p.get("interface", 0.5)) * L[-1]
        layer = np.searchsorted(np.sort(interfaces), X[-1], side="right")
        k = np.where(layer % 2 == 0, lo, hi)
        A = np.eye(n) * k[..., None, None]
    elif kind == "holder_xprime":
        base, c, alpha = p.get("base", 1.0), p.get("c", 0.5), p.get("alpha", 0.5)
        if not 0 < alpha <= 1:
            raise MediaError("alpha must lie in (0, 1]")
        A = np.broadcast_to(np.eye(n) * base, grid.dims + (n, n)).copy()
        A[..., 0, 0] += c * np.abs(X[0] - L[0] / 2) ** alpha
    elif kind == "sign_x1":
        base = p.get("base", 0.5)
        A = np.broadcast_to(np.eye(n) * base, grid.dims + (n, n)).copy()
        A[..., 0, 0] = base * (2 + np.sign(X[0] - L[0] / 2))
    elif kind == "checkerboard":
        lo, hi, block = p.get("k_low", 1.0), p.get("k_high", 2.0), p.get("block", 0.25)
        parity = sum(np.floor(x / block).astype(int) for x in X) % 2
        k = np.where(parity == 0, lo, hi)
        A = np.eye(n) * k[..., None, None]
    else:
        raise MediaError(f"unknown family {kind!r}; expected one of {FAMILIES}")
    if float(min_sym_eig(A).min()) <= 0:
        raise MediaError(f"{kind} parameters {p} lose ellipticity")
    m = make_dam(grid, MatrixField(grid, A), lam, f_bar)
    m.provenance.update({"generator": kind, "params": p})
    return m
