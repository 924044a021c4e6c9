"""Experiment pipeline: media -> validate -> solve -> moduli -> checks, with manifests on disk."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import platform
import time
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path

import numpy as np
import scipy

from . import regularity as reg
from .config import ConfigError, ExperimentConfig
from .fieldio import save_media, save_solution
from .grid import Ball, Grid, GridError
from .media import MediaError, MediaSpec
from .moduli import NON_DINI, Modulus, ModulusError, dini_classify, estimate_field_modulus, write_modulus_csv
from .reports import EstimateReport, reports_to_csv
from .solver import BoundaryError, Solution, SolverError, solve_problem_P

log = logging.getLogger(__name__)

EXIT_PASS, EXIT_CHECK, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2, 3
MANIFEST = "manifest.json"
COVERING_COLUMNS = ("eps", "x0", "case", "samples", "max_r", "geometry_ok", "local_sup_grad", "bound")


@dataclass
class RunResult:
    status: int
    out: Path
    manifest: dict
    stage: str | None = None
    message: str = ""


@dataclass
class ModuliResult:
    f: Modulus
    A: Modulus
    f_class: str
    A_class: str
    t0_hat: float | None
    t0_error: str = ""


@dataclass
class CheckOutcome:
    reports: list
    constants: reg.EmpiricalConstants
    covering: list = field(default_factory=list)  # (eps, CoveringResult)
    summary: dict = field(default_factory=dict)


def versions() -> dict:
    try:
        pkg = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        pkg = "unknown"
    return {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__, "fblab": pkg}


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def moduli_radii(grid: Grid) -> np.ndarray:
    r_max = min(grid.extents) / 8
    if 4 * grid.h >= r_max:
        raise ConfigError(f"grid too coarse for modulus estimation: 4h = {4 * grid.h:g} >= {r_max:g}")
    return np.geomspace(4 * grid.h, r_max, 12)


def estimate_moduli(m: MediaSpec, C0_star: float, stride: int = 1) -> ModuliResult:
    """PDMO moduli of f and A on the central ball, their Dini classes and t0_hat."""
    grid = m.grid
    radii = moduli_radii(grid)
    centre = tuple(L / 2 for L in grid.extents)
    ball = Ball(centre, min(grid.extents) / 2 - radii[-1] - grid.h)
    mf = estimate_field_modulus(m.f, ball, radii, stride)
    mA = estimate_field_modulus(m.A, ball, radii, stride)
    t0, err = None, ""
    try:
        t0 = reg.estimate_t0(mA, C0_star)
    except ModulusError as e:
        err = str(e)
    return ModuliResult(mf, mA, dini_classify(mf), dini_classify(mA), t0, err)


def _dyadic(grid: Grid, k_min: int, r_min: float) -> list[float]:
    out = []
    k = k_min
    while 2.0 ** -k >= r_min:
        out.append(2.0 ** -k)
        k += 1
    return sorted(out)


def _summary_row(reports, name):
    rows = [r for r in reports if r.check == name]
    return {"rows": len(rows), "failed": sum(not r.passed for r in rows),
            "max_ratio": max((r.ratio for r in rows), default=0.0)}


def run_checks(cfg: ExperimentConfig, m: MediaSpec, sol: Solution, mod: ModuliResult) -> CheckOutcome:
    """The regularity suite on one solution; inadmissible probes are skipped and counted."""
    grid = sol.grid
    consts = reg.EmpiricalConstants(C0_star=cfg.C0_star, t0_hat=mod.t0_hat)
    reports: list[EstimateReport] = []
    summary: dict = {}

    if "caccioppoli" in cfg.checks:
        sweep = reg.dyadic_ball_sweep(grid, cfg.sweep_balls, cfg.seed, k_min=cfg.k_min, margin=1.0)
        skipped = 0
        for x0, r in sweep:
            try:
                reports.append(reg.check_caccioppoli(sol, m, x0, r))
            except reg.PreconditionError:
                skipped += 1
        summary["caccioppoli_skipped"] = skipped

    fb = reg.free_boundary_points(sol)
    summary["free_boundary_points"] = int(len(fb))
    probes_train = probes_test = np.zeros((0, grid.n))
    if len(fb):
        rng = np.random.default_rng(cfg.seed + 1)
        pick = np.sort(rng.choice(len(fb), size=min(cfg.fb_probes, len(fb)), replace=False))
        chosen = fb[pick]
        probes_train, probes_test = chosen[0::2], chosen[1::2]
    growth_radii = _dyadic(grid, cfg.k_min, 2 * grid.h)

    if "linear_growth" in cfg.checks and len(fb):
        try:
            fit = reg.fit_linear_growth(sol, probes_train, growth_radii)
            consts.C2_hat = fit.C2_hat
            held = []
            for x0 in probes_test:
                for r in growth_radii:
                    try:
                        held.append(reg.check_linear_growth(sol, tuple(x0), r, C2=fit.C2_hat, c_q=reg.DEFAULT_CQ))
                    except reg.PreconditionError:
                        continue
            reports.extend(held)
            expo = reg.fixed_effects_slope(_growth_groups(fit.reports + held))
            summary["growth_exponent"] = expo
            reports.append(EstimateReport("growth_exponent", (), 0.0, abs(expo - 1.0), 0.2))
        except reg.PreconditionError as e:
            summary["linear_growth_skipped"] = str(e)

    if "l1_gradient" in cfg.checks and len(fb) and consts.C2_hat > 0:
        for x0 in np.concatenate([probes_train, probes_test]):
            for r in _dyadic(grid, cfg.k_min, 2 * grid.h):
                try:
                    reports.append(reg.check_l1_gradient(sol, m, consts, tuple(x0), r))
                except reg.PreconditionError:
                    continue

    if "gradient_estimate" in cfg.checks:
        step = 2 * min(cfg.rho_list)
        axes = [np.arange(step, L - step / 2, step) for L in grid.extents]
        lattice = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, grid.n)
        try:
            C1, reps = reg.fit_gradient_constant(sol, m, mod.f, consts, lattice, cfg.rho_list, moduli_A=mod.A)
            consts.C1_hat = C1
            # fit-mode rows carry C1 = 1, so each ratio is that probe's observed constant
            reports.extend(reps)
        except reg.PreconditionError as e:
            summary["gradient_estimate_skipped"] = str(e)

    covering = []
    if "covering" in cfg.checks:
        sup = {}
        for eps in cfg.eps_ladder:
            res = reg.covering_diagnostic(sol, m, eps, mod.t0_hat, stride=cfg.probe_stride)
            covering.append((eps, res))
            sup[f"{eps:.17g}"] = res.sup_grad
            bad = sum(not row["geometry_ok"] for row in res.rows)
            reports.append(EstimateReport("covering_geometry", (), eps, float(bad), 0.0))
        summary["sup_grad"] = sup
    return CheckOutcome(reports, consts, covering, summary)


def _growth_groups(reps) -> list:
    by_probe: dict = {}
    for rep in reps:
        if rep.lhs > 0:
            by_probe.setdefault(rep.x0, []).append((rep.r, rep.lhs))
    return list(by_probe.values())


def covering_csv(covering) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COVERING_COLUMNS)
    for eps, res in covering:
        for row in res.rows:
            w.writerow([f"{eps:.17g}", " ".join(f"{c:.17g}" for c in row["x0"]), row["case"], row["samples"],
                        f"{row['max_r']:.17g}", int(row["geometry_ok"]), f"{row['local_sup_grad']:.17g}",
                        row["bound"]])
    return buf.getvalue()


def _fail(out: Path, manifest: dict, status: int, stage: str, message: str) -> RunResult:
    manifest.update(status=status, failed_stage=stage, message=message)
    out.mkdir(parents=True, exist_ok=True)
    (out / "FAILED").write_text(f"{stage}: {message}\n")
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    log.error("stage %s failed: %s", stage, message)
    return RunResult(status, out, manifest, stage, message)


def run_experiment(cfg: ExperimentConfig, out: Path | None = None) -> RunResult:
    """Full pipeline. Exit status: 0 pass, 1 check failure, 2 configuration error, 3 solver failure."""
    out = Path(out) if out is not None else cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    (out / "FAILED").unlink(missing_ok=True)
    manifest: dict = {"name": cfg.name, "config": cfg.to_dict(), "versions": versions(), "timings": {}}
    timings = manifest["timings"]

    t = time.perf_counter()
    try:
        grid = cfg.grid()
        m = cfg.build_media(grid)
        bc = cfg.build_boundary(grid)
        if bc.min_value < 0:
            raise BoundaryError(f"boundary data must be nonnegative, min is {bc.min_value:g}")
        scfg = cfg.solver_config()
    except (ConfigError, MediaError, BoundaryError, GridError, ValueError) as e:
        return _fail(out, manifest, EXIT_CONFIG, "config", str(e))
    save_media(out / "media", m)
    manifest.update(h=grid.h, dims=list(grid.dims), **{"lambda": m.lam, "f_bar": m.f_bar})
    timings["media"] = time.perf_counter() - t

    t = time.perf_counter()
    try:
        sol = solve_problem_P(m, bc, scfg)
    except SolverError as e:
        return _fail(out, manifest, EXIT_SOLVER, "solve", f"{e} (final residual {e.residual})")
    save_solution(out / "solution", sol, manifest["config"]["solver"])
    manifest.update(eps_penal=sol.eps_penal, residual_div=sol.residual_div, residual_comp=sol.residual_comp,
                    outer_iters=sol.outer_iters, u_tol=sol.zero_threshold())
    timings["solve"] = time.perf_counter() - t

    t = time.perf_counter()
    try:
        mod = estimate_moduli(m, cfg.C0_star, cfg.probe_stride)
    except (ConfigError, ModulusError, GridError) as e:
        return _fail(out, manifest, EXIT_CONFIG, "moduli", str(e))
    write_modulus_csv(out / "moduli_f.csv", mod.f)
    write_modulus_csv(out / "moduli_A.csv", mod.A)
    record_only = cfg.record_only or NON_DINI in (mod.f_class, mod.A_class) or mod.t0_hat is None
    manifest.update(moduli={"f": mod.f_class, "A": mod.A_class}, t0_hat=mod.t0_hat, C0_star=cfg.C0_star,
                    record_only=record_only)
    if mod.t0_error:
        manifest["t0_error"] = mod.t0_error
    if mod.t0_hat is not None:
        too_big = [e for e in cfg.eps_ladder if e >= 0.75 * mod.t0_hat]
        if too_big:
            return _fail(out, manifest, EXIT_CONFIG, "moduli", f"eps {too_big} not below 3/4 t0_hat = {0.75 * mod.t0_hat:g}")
    timings["moduli"] = time.perf_counter() - t

    t = time.perf_counter()
    try:
        outcome = run_checks(cfg, m, sol, mod)
    except reg.PreconditionError as e:
        return _fail(out, manifest, EXIT_CONFIG, "checks", str(e))
    timings["checks"] = time.perf_counter() - t
    (out / "reports.csv").write_text(reports_to_csv(outcome.reports))
    (out / "covering.csv").write_text(covering_csv(outcome.covering))
    c = outcome.constants
    checks = {name: _summary_row(outcome.reports, name) for name in sorted({r.check for r in outcome.reports})}
    failed = sum(v["failed"] for v in checks.values())
    status = EXIT_CHECK if failed and not record_only else EXIT_PASS
    manifest.update(
        constants={"C2_hat": c.C2_hat, "C1_hat": c.C1_hat, "C0_star": c.C0_star, "t0_hat": c.t0_hat},
        checks=checks,
        summary=outcome.summary,
        sup_grad=outcome.summary.get("sup_grad", {}),
        hashes={name: sha256(out / name) for name in ("reports.csv", "covering.csv", "moduli_f.csv", "moduli_A.csv")},
        status=status,
    )
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    msg = f"{failed} failed check rows" + (" (record only)" if record_only else "")
    return RunResult(status, out, manifest, None, msg)


@dataclass
class Comparison:
    rows: list  # (quantity, a, b, diff b - a, ratio b / a)

    def _row(self, quantity):
        for row in self.rows:
            if row[0] == quantity:
                return row
        raise KeyError(quantity)

    def ratio(self, quantity: str) -> float:
        return self._row(quantity)[4]

    def diff(self, quantity: str) -> float:
        return self._row(quantity)[3]

    @property
    def identical(self) -> bool:
        return all(row[3] == 0 for row in self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("quantity", "a", "b", "diff", "ratio"))
        for q, a, b, d, r in self.rows:
            w.writerow((q, f"{a:.17g}", f"{b:.17g}", f"{d:.17g}", f"{r:.17g}"))
        return buf.getvalue()


_REQUIRED = ("constants", "sup_grad", "residual_div", "residual_comp", "h")


def read_manifest(path) -> dict:
    p = Path(path)
    if p.is_dir():
        p = p / MANIFEST
    try:
        data = json.loads(p.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read manifest {p}: {e}") from None
    missing = [k for k in _REQUIRED if k not in data]
    if missing:
        raise ConfigError(f"manifest {p} lacks {missing}")
    return data


def _ratio(a, b):
    if a == 0:
        return 1.0 if b == 0 else math.inf
    return b / a


def compare_runs(manifest_a, manifest_b) -> Comparison:
    """Side-by-side constants, interior gradients and residuals with ratios b/a."""
    a = manifest_a if isinstance(manifest_a, dict) else read_manifest(manifest_a)
    b = manifest_b if isinstance(manifest_b, dict) else read_manifest(manifest_b)
    for man in (a, b):
        missing = [k for k in _REQUIRED if k not in man]
        if missing:
            raise ConfigError(f"manifest lacks {missing}")
    if set(a["constants"]) != set(b["constants"]) or set(a["sup_grad"]) != set(b["sup_grad"]):
        raise ConfigError("manifests disagree on constants or eps ladder")
    rows = []

    def add(q, va, vb):
        rows.append((q, va, vb, vb - va, _ratio(va, vb)))

    add("h", a["h"], b["h"])
    for k in sorted(a["constants"]):
        va, vb = a["constants"][k], b["constants"][k]
        if va is None or vb is None:
            continue
        add(k, va, vb)
    for eps in sorted(a["sup_grad"], key=float):
        va, vb = a["sup_grad"][eps], b["sup_grad"][eps]
        add(f"sup_grad@{eps}", va, vb)
    for k in ("residual_div", "residual_comp"):
        add(k, a[k], b[k])
    return Comparison(rows)
