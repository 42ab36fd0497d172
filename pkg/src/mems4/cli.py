"""Command-line entry point ``mems4``.

Each subcommand reads an optional scenario file, applies flag overrides,
writes CSV/JSON under the output directory and prints a one-line summary.
Exit status: 0 success, 1 usage or validation error, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import cli_io
from .cli_io import ParseError, RunConfigFile, ValidationError
from .experiments import (
    BracketInvalid,
    InsufficientSamples,
    ModelKind,
    estimate_ls_exponent,
    fit_trajectory_rate,
    lambda_sweep,
    monotonicity_report,
    pullin_bisect,
)
from .hyperbolic import HyperbolicRunConfig, energy_identity_residual
from .mesh_ops import h2d_norm, l2_norm
from .model import TouchdownDomain
from .parabolic import OutcomeKind, ParabolicRunConfig
from .steady import NewtonFailed, continuation_sweep, solve_steady

log = logging.getLogger("mems4")

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 1, 2

# lambda grids and profile times of the reference study
FIGURE_PRESETS = {
    "parabolic": {"step": 0.04539, "count": 10, "times": (0.5, 78.39, 10000.0)},
    "hyperbolic": {"step": 0.42864, "count": 10, "times": (0.4, 2.5, 10000.0)},
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit code 1 instead of argparse's 2
        raise UsageError(f"{self.prog}: {message}")


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mems4", description="Fourth-order MEMS flows: steady states, dynamics, thresholds.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, with_case=False):
        p.add_argument("--config", type=Path, help="TOML scenario file")
        p.add_argument("--lambda", dest="lam", type=float, help="override lambda")
        p.add_argument("--N", dest="N", type=int, help="override number of cells")
        p.add_argument("--dt", type=float, help="override time step")
        p.add_argument("--t-end", dest="t_end", type=float, help="override final time")
        p.add_argument("--out", type=Path, help="output directory")
        p.add_argument("--probe", type=float, help="probe coordinate")
        if with_case:
            p.add_argument("--case", choices=("parabolic", "hyperbolic"), help="model (defaults to the config's)")
        return p

    common(sub.add_parser("steady", help="stationary solution at one lambda"), True)
    common(sub.add_parser("branch", help="continuation of the minimal branch to the fold"), True)
    common(sub.add_parser("parabolic", help="integrate the parabolic flow"))
    common(sub.add_parser("hyperbolic", help="integrate the damped wave flow"))
    p = common(sub.add_parser("pullin", help="bisect the dynamic pull-in threshold"), True)
    p.add_argument("--lo", type=float)
    p.add_argument("--hi", type=float)
    p = common(sub.add_parser("sweep", help="runs over a lambda list plus a monotonicity check"), True)
    p.add_argument("--lambdas", type=lambda s: [float(v) for v in s.split(",") if v.strip()], help="comma-separated")
    common(sub.add_parser("rate", help="fit the decay rate of ||u - psi||"), True)
    p = common(sub.add_parser("ls-exponent", help="Lojasiewicz exponent from a trajectory"), True)
    p.add_argument("--snapshot-stride", type=int, default=20)
    common(sub.add_parser("figures", help="profile and probe data of the reference study"), True)
    return parser


def _load(args) -> RunConfigFile:
    model = getattr(args, "case", None) or (args.command if args.command in ("parabolic", "hyperbolic") else None)
    if args.config is not None:
        cfg = cli_io.parse_config(args.config)
        if model is not None and model != cfg.model:
            cfg = cfg.with_overrides(model=model)
    else:
        cfg = cli_io.default_config(model or "parabolic")
    probes = None if args.probe is None else (args.probe,)
    return cfg.with_overrides(
        lam=args.lam, N=args.N, dt=args.dt, t_end=args.t_end,
        output_dir=None if args.out is None else str(args.out), probes=probes,
    )


def _run_config(cfg: RunConfigFile, lam: Optional[float] = None, **extra):
    p = cfg.params if lam is None else cfg.params.with_lambda(lam)
    common = dict(
        params=p, grid=cfg.grid, u0=cfg.initial_u(), dt=cfg.dt, t_end=cfg.t_end,
        steady_tol=cfg.steady_tol, quench_floor=cfg.quench_floor, snapshot_times=cfg.snapshot_times,
        probe=cfg.probes[0], sample_stride=cfg.sample_stride,
    )
    common.update(extra)
    if cfg.model == "hyperbolic":
        return HyperbolicRunConfig(u1=cfg.initial_v(), **common)
    return ParabolicRunConfig(**common)


def _try_steady(cfg: RunConfigFile, lam: float):
    try:
        return solve_steady(cfg.params.with_lambda(lam), cfg.grid, with_eig=True)
    except NewtonFailed:
        return None


def _lam_dir(out: Path, command: str, lam: float) -> Path:
    return out / f"{command}_lambda{cli_io.time_label(lam)}"


# ------------------------------------------------------------------ commands


def cmd_steady(cfg: RunConfigFile, args) -> tuple[str, dict]:
    sol = solve_steady(cfg.params, cfg.grid, with_eig=True)
    out = _lam_dir(Path(cfg.output_dir), "steady", cfg.lam)
    cli_io.write_profile(out / "profile.csv", cfg.grid, sol.psi)
    results = {
        "lambda": sol.lam, "min_psi": sol.min_value, "residual_norm": sol.residual_norm,
        "smallest_eig": sol.smallest_eig, "newton_iterations": sol.newton.iterations, "tol_used": sol.newton.tol_used,
    }
    cli_io.write_json(out / "report.json", cli_io.report("steady", cfg, results))
    return f"steady lambda={cfg.lam:g}: min psi={sol.min_value:.10g}, smallest eig={sol.smallest_eig:.6g}", results


def cmd_branch(cfg: RunConfigFile, args) -> tuple[str, dict]:
    from .experiments import DEFAULT_BRACKETS

    lam_max = cfg.lambda_max if cfg.lambda_max is not None else DEFAULT_BRACKETS[ModelKind(cfg.model)][1]
    branch = continuation_sweep(cfg.params, cfg.grid, lam_max, cfg.dlambda)
    out = Path(cfg.output_dir) / f"branch_{cfg.model}"
    cli_io.write_branch(out / "branch.csv", branch)
    results = {"points": len(branch.points), "fold_estimate": branch.fold_estimate, "monotone": branch.is_monotone()}
    cli_io.write_json(out / "report.json", cli_io.report("branch", cfg, results))
    fold = "none below lambda_max" if branch.fold_estimate is None else f"{branch.fold_estimate:.8g}"
    return f"branch: {len(branch.points)} points, fold {fold}", results


def _outcome_dict(outcome) -> dict:
    return {"outcome": outcome.kind.value, "t_event": outcome.t_event, "certificate": outcome.certificate, "note": outcome.note}


def cmd_run(cfg: RunConfigFile, args) -> tuple[str, dict]:
    from .experiments import run_any

    steady = _try_steady(cfg, cfg.lam)
    run_cfg = _run_config(cfg, steady=steady)
    traj, outcome = run_any(run_cfg)
    out = _lam_dir(Path(cfg.output_dir), cfg.model, cfg.lam)
    hyper = cfg.model == "hyperbolic"
    cli_io.write_trajectory(out / "trajectory.csv", traj, hyperbolic=hyper)
    cli_io.write_snapshots(out, cfg.grid, traj.snapshots)
    results = _outcome_dict(outcome)
    results.update(steps_sampled=len(traj), max_asymmetry=traj.max_asymmetry(), min_u_final=float(np.min(traj.final_u)))
    if steady is not None:
        results["dist_to_steady_final"] = l2_norm(traj.final_u - steady.psi, cfg.grid)
        results["h2d_dist_to_steady_final"] = h2d_norm(traj.final_u - steady.psi, cfg.grid, run_cfg.operator())
    if cfg.sample_stride == 1 and len(traj) > 1:
        results["energy_identity_residual"] = energy_identity_residual(traj)
    cli_io.write_json(out / "report.json", cli_io.report(cfg.model, cfg, results))
    return f"{cfg.model} lambda={cfg.lam:g}: {outcome.kind.value} at t={outcome.t_event:.10g}", results


def cmd_pullin(cfg: RunConfigFile, args) -> tuple[str, dict]:
    lo, hi = cfg.bracket if cfg.bracket is not None else (None, None)
    lo = args.lo if args.lo is not None else lo
    hi = args.hi if args.hi is not None else hi
    base = _run_config(cfg, 0.0, sample_stride=10**9, snapshot_times=())
    result = pullin_bisect(base, lo, hi, cfg.rel_tol)
    results = result.as_dict()
    cli_io.write_json(Path(cfg.output_dir) / f"pullin_{cfg.model}" / "report.json", cli_io.report("pullin", cfg, results))
    flag = f" ({len(result.timeouts)} timeouts counted as stabilizing)" if result.timeouts else ""
    return f"pullin {cfg.model}: lambda*={result.lambda_star:.6g} in [{result.bracket[0]:.6g}, {result.bracket[1]:.6g}]{flag}", results


def _sweep(cfg: RunConfigFile, lambdas, times, command: str):
    base = _run_config(cfg, 0.0, snapshot_times=tuple(times))
    table = lambda_sweep(base, lambdas, cfg.probes[0], times)
    root = Path(cfg.output_dir) / f"{command}_{cfg.model}"
    entries = []
    for e in table.entries:
        d = _lam_dir(root, "run", e.lam)
        cli_io.write_trajectory(d / "trajectory.csv", e.trajectory, hyperbolic=cfg.model == "hyperbolic")
        cli_io.write_snapshots(d, cfg.grid, e.trajectory.snapshots)
        held = []
        if e.outcome.kind is OutcomeKind.STABILIZED:
            taken = {t for t, _ in e.trajectory.snapshots}
            for t in times:
                if t > e.outcome.t_event and not any(abs(t - s) <= 1e-9 * max(1.0, t) for s in taken):
                    cli_io.write_profile(d / f"snap_t{cli_io.time_label(t)}.csv", cfg.grid, e.final_profile)
                    held.append(t)
        cli_io.write_profile(d / "final.csv", cfg.grid, e.final_profile)
        entries.append({"lambda": e.lam, **_outcome_dict(e.outcome), "profiles_held_at_stabilized_state": held})
    mono = monotonicity_report(table, times, cfg.grid)
    results = {
        "entries": entries,
        "monotonicity": {"violations": mono.violations, "checked_pairs": mono.checked_pairs, "first_violation_lambda": mono.first_violation_lambda},
    }
    cli_io.write_json(root / "report.json", cli_io.report(command, cfg, results))
    return table, mono, results


def _preset_lambdas(model: str) -> list:
    pre = FIGURE_PRESETS[model]
    return [round(pre["step"] * k, 10) for k in range(1, pre["count"] + 1)]


def cmd_sweep(cfg: RunConfigFile, args) -> tuple[str, dict]:
    lambdas = args.lambdas or list(cfg.lambdas) or _preset_lambdas(cfg.model)
    table, mono, results = _sweep(cfg, lambdas, cfg.snapshot_times, "sweep")
    return f"sweep {cfg.model}: {len(table)} runs, {mono.count} monotonicity violations", results


def cmd_figures(cfg: RunConfigFile, args) -> tuple[str, dict]:
    times = FIGURE_PRESETS[cfg.model]["times"]
    if args.t_end is None and cfg.t_end < max(times):
        cfg = cfg.with_overrides(t_end=max(times))
    table, mono, results = _sweep(cfg, _preset_lambdas(cfg.model), times, "figures")
    return f"figures {cfg.model}: {len(table)} runs at t in {list(times)}", results


def cmd_rate(cfg: RunConfigFile, args) -> tuple[str, dict]:
    from .experiments import run_any

    steady = solve_steady(cfg.params, cfg.grid, with_eig=True)
    traj, outcome = run_any(_run_config(cfg, steady=steady, steady_tol=min(cfg.steady_tol, 1e-12)))
    fit = fit_trajectory_rate(traj)
    results = {**_outcome_dict(outcome), "fit": fit.__dict__, "smallest_eig": steady.smallest_eig}
    cli_io.write_json(_lam_dir(Path(cfg.output_dir), "rate", cfg.lam) / "report.json", cli_io.report("rate", cfg, results))
    return f"rate lambda={cfg.lam:g}: exponential rate={fit.alt_exponential_rate:.6g}, smallest eig={steady.smallest_eig:.6g}", results


def cmd_ls(cfg: RunConfigFile, args) -> tuple[str, dict]:
    from .experiments import run_any

    steady = solve_steady(cfg.params, cfg.grid)
    run_cfg = _run_config(cfg, steady=steady, steady_tol=min(cfg.steady_tol, 1e-12), snapshot_stride=max(1, args.snapshot_stride))
    traj, outcome = run_any(run_cfg)
    fit = estimate_ls_exponent(traj, steady, cfg.params, cfg.grid, ModelKind(cfg.model))
    results = {**_outcome_dict(outcome), "fit": fit.__dict__}
    cli_io.write_json(_lam_dir(Path(cfg.output_dir), "ls-exponent", cfg.lam) / "report.json", cli_io.report("ls-exponent", cfg, results))
    return f"ls-exponent lambda={cfg.lam:g}: slope={fit.slope:.6g}, theta={fit.theta_hat:.6g}", results


COMMANDS = {
    "steady": cmd_steady,
    "branch": cmd_branch,
    "parabolic": cmd_run,
    "hyperbolic": cmd_run,
    "pullin": cmd_pullin,
    "sweep": cmd_sweep,
    "rate": cmd_rate,
    "ls-exponent": cmd_ls,
    "figures": cmd_figures,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load(args)
        summary, _ = COMMANDS[args.command](cfg, args)
    except (ParseError, ValidationError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NewtonFailed, BracketInvalid, InsufficientSamples, TouchdownDomain) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(summary)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
