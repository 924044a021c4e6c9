"""Command line entry point: ``fblab {validate,solve,moduli,check,run,compare}``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import harness
from .config import ConfigError, ExperimentConfig, bundled_configs, load_config
from .fieldio import load_solution, save_media, save_solution
from .grid import GridError
from .media import MediaError, validate_media
from .moduli import ModulusError, write_modulus_csv
from .regularity import PreconditionError
from .reports import reports_to_csv
from .solver import BoundaryError, SolverError, solve_problem_P

EXIT_PASS, EXIT_CHECK, EXIT_CONFIG, EXIT_SOLVER = (harness.EXIT_PASS, harness.EXIT_CHECK, harness.EXIT_CONFIG,
                                                   harness.EXIT_SOLVER)


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    kw = {}
    if getattr(args, "h", None) is not None:
        kw["h"] = args.h
    if getattr(args, "media", None):
        if Path(args.media).is_dir():
            kw.update(media_kind="file", media_path=args.media)
        else:
            kw.update(media_kind=args.media, media_params={})
    if getattr(args, "bc", None):
        kw.update(boundary_kind=args.bc)
    solver = {}
    for flag, key in (("eps_penal", "eps_penal"), ("theta", "theta"), ("tol", "tol"), ("max_outer", "max_outer")):
        v = getattr(args, flag, None)
        if v is not None:
            solver[key] = v
    if solver:
        kw["solver"] = dataclasses.replace(cfg.solver, **solver)
    if getattr(args, "seed", None) is not None:
        kw["seed"] = args.seed
    if getattr(args, "out", None):
        kw["output"] = args.out
    return dataclasses.replace(cfg, **kw) if kw else cfg


def _setup(cfg: ExperimentConfig):
    grid = cfg.grid()
    m = cfg.build_media(grid)
    bc = cfg.build_boundary(grid)
    if bc.min_value < 0:
        raise BoundaryError(f"boundary data must be nonnegative, min is {bc.min_value:g}")
    return grid, m, bc


def cmd_validate(cfg: ExperimentConfig, args) -> int:
    grid, m, bc = _setup(cfg)
    report = validate_media(m)
    for c in report.checks:
        print(f"{c.name:10s} {'ok' if c.passed else 'FAIL'}  margin {c.margin:.3e}  worst cell {c.worst_cell}")
    print(f"lambda = {m.lam:.17g}  f_bar = {m.f_bar:.17g}  grid {grid.dims} h = {grid.h:g}")
    return EXIT_PASS if report.passed else EXIT_CONFIG


def cmd_solve(cfg: ExperimentConfig, args) -> int:
    _, m, bc = _setup(cfg)
    sol = solve_problem_P(m, bc, cfg.solver_config())
    out = cfg.output_dir()
    save_media(out / "media", m)
    save_solution(out / "solution", sol, dataclasses.asdict(cfg.solver_config()))
    print(f"solved in {sol.outer_iters} iterations: residual_div {sol.residual_div:.3e}, "
          f"residual_comp {sol.residual_comp:.3e}, eps_p {sol.eps_penal:.3e} -> {out}")
    return EXIT_PASS


def cmd_moduli(cfg: ExperimentConfig, args) -> int:
    _, m, _ = _setup(cfg)
    mod = harness.estimate_moduli(m, cfg.C0_star, cfg.probe_stride)
    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    write_modulus_csv(out / "moduli_f.csv", mod.f)
    write_modulus_csv(out / "moduli_A.csv", mod.A)
    print(f"f: {mod.f_class}  A: {mod.A_class}  t0_hat: {mod.t0_hat if mod.t0_hat is not None else mod.t0_error}")
    return EXIT_PASS


def cmd_check(cfg: ExperimentConfig, args) -> int:
    _, m, _ = _setup(cfg)
    src = Path(args.solution)
    # accept either the output of 'solve' or the solution directory inside it
    sol = load_solution(src / "solution" if (src / "solution").is_dir() else src)
    if sol.grid != m.grid:
        raise ConfigError("solution and configured media live on different grids")
    mod = harness.estimate_moduli(m, cfg.C0_star, cfg.probe_stride)
    outcome = harness.run_checks(cfg, m, sol, mod)
    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    (out / "reports.csv").write_text(reports_to_csv(outcome.reports))
    (out / "covering.csv").write_text(harness.covering_csv(outcome.covering))
    failed = sum(not r.passed for r in outcome.reports)
    c = outcome.constants
    print(f"{len(outcome.reports)} rows, {failed} failed; C2_hat {c.C2_hat:.6g}  C1_hat {c.C1_hat:.6g}  "
          f"C0* {c.C0_star:g}")
    record_only = cfg.record_only or mod.t0_hat is None or "non_dini" in (mod.f_class, mod.A_class)
    return EXIT_CHECK if failed and not record_only else EXIT_PASS


def cmd_run(cfg: ExperimentConfig, args) -> int:
    res = harness.run_experiment(cfg)
    where = f"stage {res.stage}: " if res.stage else ""
    print(f"{cfg.name}: exit {res.status} {where}{res.message} -> {res.out}")
    return res.status


def cmd_compare(args) -> int:
    comp = harness.compare_runs(args.a, args.b)
    text = comp.to_csv()
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_PASS


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fblab", description="Free-boundary regularity laboratory.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def with_config(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("config", help=f"config file or bundled name ({', '.join(bundled_configs())})")
        sp.add_argument("--out", help="output directory (relative paths honour $FBLAB_OUTPUT_ROOT)")
        sp.add_argument("--h", type=float, help="grid spacing")
        sp.add_argument("--seed", type=int)
        return sp

    with_config("validate", "build and validate media and boundary data")
    s = with_config("solve", "solve problem (P) and dump u, chi")
    s.add_argument("--media", help="generator name or directory of stored media")
    s.add_argument("--bc", help="boundary kind (dam, two_reservoir, harmonic, constant)")
    s.add_argument("--eps-penal", type=float)
    s.add_argument("--theta", type=float)
    s.add_argument("--tol", type=float)
    s.add_argument("--max-outer", type=int)
    with_config("moduli", "estimate partial mean-oscillation moduli of A and f")
    c = with_config("check", "run the regularity suite on a stored solution")
    c.add_argument("--solution", required=True, help="output directory of 'solve' (or its solution/ subdirectory)")
    with_config("run", "full pipeline")
    cmp_ = sub.add_parser("compare", help="compare two run manifests")
    cmp_.add_argument("a")
    cmp_.add_argument("b")
    cmp_.add_argument("--out", help="write the comparison CSV here as well")
    return p


COMMANDS = {"validate": cmd_validate, "solve": cmd_solve, "moduli": cmd_moduli, "check": cmd_check, "run": cmd_run}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.verb == "compare":
            return cmd_compare(args)
        cfg = _apply_overrides(load_config(args.config), args)
        return COMMANDS[args.verb](cfg, args)
    except SolverError as e:
        print(f"error: solver: {e}", file=sys.stderr)
        return EXIT_SOLVER
    except (ConfigError, MediaError, BoundaryError, GridError, ModulusError, PreconditionError, OSError,
            ValueError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
