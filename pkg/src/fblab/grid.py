"""Uniform box grids, cell-centred fields and the discrete calculus on them.

Fields are piecewise constant on cells: every integral is a midpoint rule over
the cells whose centres fall inside the integration region.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, ClassVar, Sequence

import numpy as np
from scipy import ndimage


class GridError(ValueError):
    """Raised for degenerate grids, empty balls/slices and mismatched fields."""


@dataclass(frozen=True)
class Grid:
    """Uniform lattice of ``dims`` cells of side ``h`` covering ``[0, L_1] x ... x [0, L_n]``."""

    dims: tuple[int, ...]
    h: float

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if not (self.h > 0 and math.isfinite(self.h)):
            raise GridError(f"grid spacing must be positive, got {self.h}")
        if len(self.dims) not in (2, 3):
            raise GridError(f"only n = 2 or 3 supported, got n = {len(self.dims)}")
        if min(self.dims) < 4:
            raise GridError(f"need at least 4 cells per axis, got {self.dims}")

    @classmethod
    def box(cls, extents: Sequence[float], h: float) -> "Grid":
        dims = []
        for L in extents:
            m = int(round(L / h))
            if m < 1 or abs(m * h - L) > 1e-9 * max(L, 1.0):
                raise GridError(f"extent {L} is not a multiple of h = {h}")
            dims.append(m)
        return cls(tuple(dims), float(h))

    @classmethod
    def unit_square(cls, m: int) -> "Grid":
        return cls((m, m), 1.0 / m)

    @property
    def n(self) -> int:
        return len(self.dims)

    @property
    def extents(self) -> tuple[float, ...]:
        return tuple(d * self.h for d in self.dims)

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    @property
    def cell_volume(self) -> float:
        return self.h ** self.n

    def axis_centers(self, axis: int) -> np.ndarray:
        return (np.arange(self.dims[axis]) + 0.5) * self.h

    def centers(self) -> tuple[np.ndarray, ...]:
        """Cell-centre coordinate arrays, one per axis, each of shape ``dims``."""
        return tuple(np.meshgrid(*(self.axis_centers(d) for d in range(self.n)), indexing="ij"))

    def sample(self, func: Callable[..., np.ndarray]) -> "ScalarField":
        """Evaluate ``func(x_1, ..., x_n)`` at cell centres."""
        vals = np.broadcast_to(np.asarray(func(*self.centers()), dtype=float), self.dims)
        return ScalarField(self, vals)

    def index_of(self, x: Sequence[float]) -> tuple[int, ...]:
        """Index of the cell containing point ``x`` (clipped to the grid)."""
        return tuple(int(np.clip(math.floor(xi / self.h), 0, d - 1)) for xi, d in zip(x, self.dims))

    def center_of(self, idx: Sequence[int]) -> np.ndarray:
        return (np.asarray(idx, dtype=float) + 0.5) * self.h

    def boundary_distance(self) -> np.ndarray:
        """Distance from every cell centre to the boundary of the box."""
        d = np.full(self.dims, np.inf)
        for axis, x in enumerate(self.centers()):
            d = np.minimum(d, np.minimum(x, self.extents[axis] - x))
        return d

    def ball_mask(self, ball: "Ball", closed: bool = False) -> np.ndarray:
        """Cells whose centre lies in ``ball`` (open unless ``closed``)."""
        d2 = np.zeros(self.dims)
        for axis in range(self.n):
            shape = [1] * self.n
            shape[axis] = self.dims[axis]
            d2 = d2 + ((self.axis_centers(axis) - ball.center[axis]) ** 2).reshape(shape)
        r2 = ball.radius ** 2
        return d2 <= r2 if closed else d2 < r2

    def ball_inside(self, ball: "Ball") -> bool:
        """True when the closed ball lies in the closed box."""
        return all(ball.radius <= c <= L - ball.radius for c, L in zip(ball.center, self.extents))

    def ball_interior(self, ball: "Ball", margin: float = 0.0) -> bool:
        """True when the ball plus ``margin`` is compactly inside the open box."""
        R = ball.radius + margin
        return all(R < c < L - R for c, L in zip(ball.center, self.extents))


@dataclass(frozen=True)
class Ball:
    center: tuple[float, ...]
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        if not self.radius > 0:
            raise GridError(f"ball radius must be positive, got {self.radius}")

    def scaled(self, factor: float) -> "Ball":
        return Ball(self.center, self.radius * factor)


@dataclass(frozen=True, eq=False)
class Field:
    """Cell-centred field; ``values`` has shape ``dims`` plus ``rank`` trailing axes of length n."""

    grid: Grid
    values: np.ndarray
    rank: ClassVar[int] = 0

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        expected = self.grid.dims + (self.grid.n,) * self.rank
        if vals.shape != expected:
            raise GridError(f"{type(self).__name__} needs shape {expected}, got {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise GridError(f"{type(self).__name__} has non-finite entries")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def __repr__(self):
        return f"{type(self).__name__}(dims={self.grid.dims}, h={self.grid.h})"


class ScalarField(Field):
    rank = 0

    @classmethod
    def constant(cls, grid: Grid, c: float) -> "ScalarField":
        return cls(grid, np.full(grid.dims, float(c)))


class VectorField(Field):
    rank = 1

    def component(self, i: int) -> ScalarField:
        return ScalarField(self.grid, self.values[..., i])

    @classmethod
    def from_components(cls, comps: Sequence[ScalarField]) -> "VectorField":
        grid = comps[0].grid
        return cls(grid, np.stack([c.values for c in comps], axis=-1))


class MatrixField(Field):
    rank = 2

    def entry(self, i: int, j: int) -> ScalarField:
        return ScalarField(self.grid, self.values[..., i, j])

    @classmethod
    def scalar_times_identity(cls, k: ScalarField) -> "MatrixField":
        n = k.grid.n
        return cls(k.grid, k.values[..., None, None] * np.eye(n))


def discrete_gradient(u: ScalarField) -> VectorField:
    """Central differences inside, one-sided differences on boundary cells."""
    grads = np.gradient(u.values, u.grid.h, edge_order=1)
    return VectorField(u.grid, np.stack(grads, axis=-1))


def _nonempty(mask: np.ndarray, what: str) -> int:
    count = int(mask.sum())
    if count == 0:
        raise GridError(f"{what} contains no cell centres (radius below resolution?)")
    return count


def ball_integral(f: ScalarField | np.ndarray, ball: Ball, grid: Grid | None = None, closed: bool = False) -> float:
    vals, grid = _values_and_grid(f, grid)
    mask = grid.ball_mask(ball, closed)
    _nonempty(mask, "ball")
    return float(vals[mask].sum() * grid.cell_volume)


def ball_average(f: ScalarField | np.ndarray, ball: Ball, grid: Grid | None = None, closed: bool = False) -> float:
    vals, grid = _values_and_grid(f, grid)
    mask = grid.ball_mask(ball, closed)
    count = _nonempty(mask, "ball")
    sel = vals[mask]
    # offset by one member so that constant data averages to itself bit-for-bit
    ref = sel[0]
    return float(ref + (sel - ref).sum() / count)


def ball_max(f: ScalarField | np.ndarray, ball: Ball, grid: Grid | None = None, closed: bool = False) -> float:
    vals, grid = _values_and_grid(f, grid)
    mask = grid.ball_mask(ball, closed)
    _nonempty(mask, "ball")
    return float(vals[mask].max())


def _values_and_grid(f, grid):
    if isinstance(f, Field):
        return f.values, f.grid
    if grid is None:
        raise GridError("raw arrays need an explicit grid")
    return np.asarray(f), grid


def slice_average(f: ScalarField, x_prime: Sequence[float] | float, r: float, y_n: float) -> float:
    """Average of ``f`` over ``{(z', y_n) : |z' - x'| < r}`` on the cell layer nearest ``y_n``."""
    grid = f.grid
    xp = np.atleast_1d(np.asarray(x_prime, dtype=float))
    if xp.shape != (grid.n - 1,):
        raise GridError(f"x' must have {grid.n - 1} coordinates")
    layer = int(np.clip(math.floor(y_n / grid.h), 0, grid.dims[-1] - 1))
    vals = f.values[..., layer]
    d2 = np.zeros(grid.dims[:-1])
    tangential = np.meshgrid(*(grid.axis_centers(d) for d in range(grid.n - 1)), indexing="ij")
    for axis, z in enumerate(tangential):
        d2 = d2 + (z - xp[axis]) ** 2
    mask = d2 < r * r
    count = _nonempty(mask, "slice")
    sel = vals[mask]
    ref = sel[0]
    return float(ref + (sel - ref).sum() / count)


def distance_to_zero_set(u: ScalarField, threshold: float = 0.0) -> "DistanceField":
    """Exact Euclidean distance from each cell centre to the nearest centre with ``u <= threshold``.

    Returns ``+inf`` everywhere when that set is empty.
    """
    zero = u.values <= threshold
    if not zero.any():
        return DistanceField(u.grid, np.full(u.grid.dims, np.inf))
    dist = ndimage.distance_transform_edt(~zero, sampling=u.grid.h)
    return DistanceField(u.grid, dist)


class DistanceField(ScalarField):
    """Scalar field that may hold ``+inf`` (distance to an empty set)."""

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        if vals.shape != self.grid.dims or np.isnan(vals).any() or (vals < 0).any():
            raise GridError("distance field must be nonnegative with shape dims")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)


def unit_ball_volume(n: int) -> float:
    return math.pi ** (n / 2) / math.gamma(n / 2 + 1)


def positive_side_gradient(u: ScalarField, zero: np.ndarray) -> VectorField:
    """Gradient that never differences across the zero set.

    Cells in ``zero`` get 0. A positive cell uses central differences when both
    neighbours along an axis are positive, otherwise the one-sided difference
    towards its positive neighbour; with no positive neighbour it falls back to
    the plain discrete gradient.
    """
    grid = u.grid
    h = grid.h
    U = u.values
    pos = ~np.asarray(zero, dtype=bool)
    plain = discrete_gradient(u).values
    out = np.zeros(grid.dims + (grid.n,))
    for d in range(grid.n):
        fwd = np.full(grid.dims, np.nan)
        bwd = np.full(grid.dims, np.nan)
        hi = [slice(None)] * grid.n
        lo = [slice(None)] * grid.n
        hi[d], lo[d] = slice(1, None), slice(None, -1)
        hi, lo = tuple(hi), tuple(lo)
        diff = (U[hi] - U[lo]) / h
        ok = pos[hi] & pos[lo]
        fwd[lo] = np.where(ok, diff, np.nan)
        bwd[hi] = np.where(ok, diff, np.nan)
        both = ~np.isnan(fwd) & ~np.isnan(bwd)
        g = np.where(both, 0.5 * (np.nan_to_num(fwd) + np.nan_to_num(bwd)),
                     np.where(~np.isnan(fwd), fwd, np.where(~np.isnan(bwd), bwd, plain[..., d])))
        out[..., d] = np.where(pos, g, 0.0)
    return VectorField(grid, out)
