"""Experiment configuration: INI files with one section per pipeline stage."""

from __future__ import annotations

import configparser
import os
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .grid import Grid, ScalarField
from .instances import dam_profile, harmonic_profile, two_reservoir_data
from .media import FAMILIES, MediaSpec, make_dam, make_electrolysis, make_lubrication, make_test_family
from .solver import BoundarySpec, SolverConfig

OUTPUT_ROOT_ENV = "FBLAB_OUTPUT_ROOT"
MEDIA_KINDS = ("identity", "laplace", "lubrication", "electrolysis", "file") + FAMILIES
BOUNDARY_KINDS = ("dam", "two_reservoir", "harmonic", "constant")
CHECKS = ("caccioppoli", "linear_growth", "l1_gradient", "gradient_estimate", "covering")


class ConfigError(ValueError):
    pass


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"expected numbers, got {text!r}") from None


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    extents: tuple = (1.0, 1.0)
    h: float = 1 / 128
    media_kind: str = "identity"
    media_params: dict = field(default_factory=dict)
    media_path: str | None = None
    lam: float | None = None
    f_bar: float | None = None
    boundary_kind: str = "dam"
    boundary_params: dict = field(default_factory=dict)
    solver: SolverConfig = field(default_factory=SolverConfig)
    eps_factor: float | None = None  # eps_p = eps_factor * h when eps_penal is unset
    eps_ladder: tuple = (0.01,)
    k_min: int = 3  # radii 2^-k, k >= k_min
    sweep_balls: int = 50
    rho_list: tuple = (1 / 32, 1 / 16)
    probe_stride: int = 4
    fb_probes: int = 40
    checks: tuple = CHECKS
    record_only: bool = False
    C0_star: float = 1e-2
    seed: int = 0
    output: str = "runs/experiment"

    def __post_init__(self):
        if self.media_kind not in MEDIA_KINDS:
            raise ConfigError(f"unknown media generator {self.media_kind!r}; expected one of {MEDIA_KINDS}")
        if self.media_kind == "file" and not self.media_path:
            raise ConfigError("media generator 'file' needs a path")
        if self.boundary_kind not in BOUNDARY_KINDS:
            raise ConfigError(f"unknown boundary kind {self.boundary_kind!r}; expected one of {BOUNDARY_KINDS}")
        bad = set(self.checks) - set(CHECKS)
        if bad:
            raise ConfigError(f"unknown checks {sorted(bad)}")
        if not self.h > 0 or not self.C0_star > 0:
            raise ConfigError("h and C0_star must be positive")
        if any(e <= 0 for e in self.eps_ladder):
            raise ConfigError("eps values must be positive")
        if self.sweep_balls < 1 or self.probe_stride < 1 or self.fb_probes < 2:
            raise ConfigError("sweep sizes must be positive")

    def grid(self) -> Grid:
        try:
            return Grid.box(self.extents, self.h)
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def build_media(self, grid: Grid) -> MediaSpec:
        p = dict(self.media_params)
        kind = self.media_kind
        if kind == "file":
            from .fieldio import load_media

            m = load_media(self.media_path)
            if m.grid != grid:
                raise ConfigError(f"stored media grid {m.grid} does not match the configured grid {grid}")
            return m
        if kind == "identity":
            return make_dam(grid, ScalarField.constant(grid, p.get("k", 1.0)), self.lam, self.f_bar)
        if kind == "laplace":
            m = make_dam(grid, ScalarField.constant(grid, p.get("k", 1.0)), self.lam)
            f = type(m.f)(grid, np.zeros_like(m.f.values))
            return MediaSpec(m.A, f, m.lam, self.f_bar or np.finfo(float).tiny, {"generator": "laplace"})
        film = grid.sample(lambda *x: p.get("film_base", 1.0) + p.get("film_slope", 0.5) * x[-1])
        if kind == "lubrication":
            return make_lubrication(grid, film, self.lam, self.f_bar)
        if kind == "electrolysis":
            return make_electrolysis(grid, ScalarField.constant(grid, p.get("k", 1.0)), film, self.lam, self.f_bar)
        return make_test_family(grid, kind, p, self.lam, self.f_bar)

    def boundary_function(self):
        p = self.boundary_params
        kind = self.boundary_kind
        if kind == "dam":
            return dam_profile(p.get("level", 0.5))
        if kind == "two_reservoir":
            return two_reservoir_data(p.get("upstream", 0.8), p.get("downstream", 0.2))
        if kind == "harmonic":
            return harmonic_profile
        value = p.get("value", 0.0)
        return lambda *x: np.full(x[0].shape, value)

    def build_boundary(self, grid: Grid) -> BoundarySpec:
        return BoundarySpec.from_function(grid, self.boundary_function())

    def solver_config(self) -> SolverConfig:
        cfg = self.solver
        if cfg.eps_penal is None and self.eps_factor is not None:
            cfg = SolverConfig(**{**asdict(cfg), "eps_penal": self.eps_factor * self.h})
        return cfg

    def output_dir(self) -> Path:
        out = Path(self.output)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not out.is_absolute():
            out = Path(root) / out
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["solver"] = asdict(self.solver)
        return d


def _section(cp, name):
    return cp[name] if cp.has_section(name) else {}


def _params(sec, reserved) -> dict:
    return {k: float(v) for k, v in sec.items() if k not in reserved}


def parse_config(text: str, name: str = "experiment") -> ExperimentConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from None
    try:
        g, md, bc, sv, pr, ck, rn = (_section(cp, s) for s in ("grid", "media", "boundary", "solver", "probes",
                                                               "checks", "run"))
        kw: dict = {"name": rn.get("name", name)}
        if "extents" in g:
            kw["extents"] = tuple(_floats(g["extents"]))
        if "h" in g:
            kw["h"] = float(g["h"])
        elif "cells" in g:
            kw["h"] = kw.get("extents", (1.0,))[0] / int(g["cells"])
        kw["media_kind"] = md.get("generator", "identity")
        kw["media_path"] = md.get("path")
        kw["lam"] = float(md["lambda"]) if "lambda" in md else None
        kw["f_bar"] = float(md["f_bar"]) if "f_bar" in md else None
        kw["media_params"] = _params(md, {"generator", "path", "lambda", "f_bar"})
        kw["boundary_kind"] = bc.get("kind", "dam")
        kw["boundary_params"] = _params(bc, {"kind"})
        s = {}
        for key, conv in (("eps_penal", float), ("theta", float), ("tol", float), ("max_outer", int),
                          ("linear_tol", float), ("linear_maxiter", int), ("linear_method", str), ("method", str),
                          ("continuation", float)):
            if key in sv:
                s[key] = conv(sv[key])
        if "warm_start" in sv:
            s["warm_start"] = cp.getboolean("solver", "warm_start")
        kw["solver"] = SolverConfig(**s)
        if "eps_factor" in sv:
            kw["eps_factor"] = float(sv["eps_factor"])
        if "eps" in pr:
            kw["eps_ladder"] = tuple(_floats(pr["eps"]))
        for key, conv in (("k_min", int), ("sweep_balls", int), ("probe_stride", int), ("fb_probes", int)):
            if key in pr:
                kw[key] = conv(pr[key])
        if "rho" in pr:
            kw["rho_list"] = tuple(_floats(pr["rho"]))
        if ck:
            kw["checks"] = tuple(c for c in CHECKS if cp.getboolean("checks", c, fallback=True))
            kw["record_only"] = cp.getboolean("checks", "record_only", fallback=False)
        if "c0_star" in rn:
            kw["C0_star"] = float(rn["c0_star"])
        if "seed" in rn:
            kw["seed"] = int(rn["seed"])
        kw["output"] = rn.get("output", f"runs/{kw['name']}")
        return ExperimentConfig(**kw)
    except ConfigError:
        raise
    except (ValueError, TypeError, KeyError) as e:
        raise ConfigError(f"invalid config value: {e}") from None


def bundled_configs() -> list[str]:
    return sorted(p.name[:-4] for p in resources.files("fblab.configs").iterdir() if p.name.endswith(".ini"))


def load_config(ref: str) -> ExperimentConfig:
    """Read a config file, or a bundled config by name (e.g. ``dam_exact``)."""
    path = Path(ref)
    if path.is_file():
        return parse_config(path.read_text(), path.stem)
    if ref in bundled_configs():
        return parse_config(resources.files("fblab.configs").joinpath(f"{ref}.ini").read_text(), ref)
    raise ConfigError(f"no config file or bundled config named {ref!r}")
