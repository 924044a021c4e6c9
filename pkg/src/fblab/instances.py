"""Named problem instances used by the regularity suite and the bundled configs."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .grid import Grid, ScalarField
from .media import MediaSpec, make_dam, make_lubrication, make_test_family
from .solver import BoundarySpec, SolverConfig

DAM_LEVEL = 0.5


def dam_profile(s: float = DAM_LEVEL):
    return lambda *x: np.maximum(s - x[-1], 0.0)


def two_reservoir_data(upstream: float = 0.8, downstream: float = 0.2):
    """Reservoir heads on the two vertical walls, linear along the base, dry on top."""

    def g(*x):
        L = 1.0
        y = x[-1]
        left = np.maximum(upstream - y, 0.0)
        right = np.maximum(downstream - y, 0.0)
        base = upstream + (downstream - upstream) * np.clip(x[0] / L, 0, 1)
        out = np.where(np.isclose(x[0], 0.0), left, np.where(np.isclose(x[0], L), right, 0.0))
        return np.where(np.isclose(y, 0.0), base, out)

    return g


def harmonic_profile(*x):
    return np.sin(np.pi * x[0]) * np.sinh(np.pi * x[1]) / np.sinh(np.pi)


@dataclass
class Problem:
    """A media/boundary-data pair that can be built at any spacing of the unit box.

    ``eps_factor`` sets eps_p = eps_factor * h; None keeps the solver default.
    ``exact`` is the known solution, when there is one.
    """

    name: str
    media: Callable[[Grid], MediaSpec]
    boundary: Callable
    extents: tuple = (1.0, 1.0)
    eps_factor: float | None = None
    exact: Callable | None = None
    params: dict = field(default_factory=dict)

    def grid(self, h: float) -> Grid:
        return Grid.box(self.extents, h)

    def setup(self, h: float, cfg: SolverConfig | None = None):
        grid = self.grid(h)
        m = self.media(grid)
        bc = BoundarySpec.from_function(grid, self.boundary)
        cfg = cfg or SolverConfig()
        if self.eps_factor is not None and cfg.eps_penal is None:
            cfg = SolverConfig(**{**cfg.__dict__, "eps_penal": self.eps_factor * h})
        return m, bc, cfg


def _identity(grid: Grid) -> MediaSpec:
    return make_dam(grid, ScalarField.constant(grid, 1.0))


def _no_forcing(grid: Grid) -> MediaSpec:
    m = make_dam(grid, ScalarField.constant(grid, 1.0))
    f = np.zeros_like(m.f.values)
    return MediaSpec(m.A, type(m.f)(grid, f), m.lam, np.finfo(float).tiny, {"generator": "laplace"})


def _lubrication(grid: Grid) -> MediaSpec:
    return make_lubrication(grid, grid.sample(lambda x, y: 1 + 0.5 * y))


PROBLEMS = {
    "dam_exact": Problem("dam_exact", _identity, dam_profile(), eps_factor=0.5, exact=dam_profile()),
    "layered_dam": Problem("layered_dam", lambda g: make_test_family(g, "layered", {"k_low": 1.0, "k_high": 2.0}),
                           two_reservoir_data(), eps_factor=0.5),
    "lubrication_smooth": Problem("lubrication_smooth", _lubrication, two_reservoir_data(), eps_factor=0.5),
    "harmonic": Problem("harmonic", _no_forcing, harmonic_profile, exact=harmonic_profile),
    "sign_x1": Problem("sign_x1", lambda g: make_test_family(g, "sign_x1"), two_reservoir_data(), eps_factor=0.5),
    "trivial": Problem("trivial", _identity, lambda *x: np.zeros_like(x[0]), eps_factor=0.5),
}


def get_problem(name: str) -> Problem:
    try:
        return PROBLEMS[name]
    except KeyError:
        raise KeyError(f"unknown instance {name!r}; known: {sorted(PROBLEMS)}") from None
