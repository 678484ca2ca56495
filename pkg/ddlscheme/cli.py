"""Command line entry point: ``run``, ``check`` and ``verify``."""

import argparse
import logging
import math
import os
import sys
import time
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv

from ddlscheme import __version__, output, paths, verification
from ddlscheme.assembly import SolverContext, SourceSpec
from ddlscheme.config import VERBOSITY, load_config
from ddlscheme.constitutive import PHASES, Phase, certify_constants
from ddlscheme.dd_solver import SchemeParams, suggest_lambda
from ddlscheme.exceptions import (
    AdmissibilityError,
    CatalogError,
    ConfigError,
    ConstitutiveError,
    MeshError,
    NoAdmissibleTimeStepError,
    OracleError,
)
from ddlscheme.mesh import SUBDOMAINS, build_mesh
from ddlscheme.timestepper import (
    SimulationConfig,
    TimeGrid,
    check_admissibility,
    constant_initial_states,
    max_stable_tau,
    run_simulation,
    suggest_L,
)

logger = logging.getLogger(__name__)

TEMPORAL_WINDOW = verification.ORDER_WINDOW


class ExitCode(IntEnum):
    OK = 0
    CONFIG_ERROR = 2
    NONCONVERGENCE = 3
    ADMISSIBILITY_ERROR = 4
    ORACLE_FAILURE = 5
    VERIFICATION_FAILED = 6
    IO_ERROR = 7


def _configure_logging(level):
    """Configure root logging once and route warnings through it."""
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger().setLevel(level)
    logging.captureWarnings(True)


def _fail(code, message):
    print(f"ddlscheme: error: {message}", file=sys.stderr)
    return code


@dataclass
class Scenario:
    """
    A scenario file resolved into solver inputs.

    Attributes:
        config (ScenarioConfig): The parsed file.
        context (SolverContext): Mesh, laws, sources and boundary data.
        simulation (SimulationConfig): Time grid, parameters, constants and initial data.
        resolved (dict): Derived values echoed into the manifest.
    """

    config: object
    context: SolverContext
    simulation: SimulationConfig
    resolved: dict

    @property
    def constants(self):
        return self.simulation.constants

    @property
    def params(self):
        return self.simulation.params


def _constant_boundary(p_w, p_g):
    def boundary(phase, x, y, t):
        return p_w if Phase(phase) is Phase.WETTING else p_g

    return boundary


def build_scenario(cfg):
    """
    Resolves a ScenarioConfig into a solver context and simulation inputs.

    With ``problem.case`` set, the layers, fluids, sources, Dirichlet and initial data come
    from the manufactured catalog; otherwise constant pressures serve as initial and Dirichlet
    data and the layer sections supply constant sources.

    Raises:
        ConstitutiveError: If constants cannot be certified.
        MeshError: If the geometry is invalid.
        ValueError: If the resolved scheme parameters are invalid.
    """
    geo, scheme = cfg.geometry, cfg.scheme
    options = dict(
        mass_lumping=scheme.mass_lumping,
        interface_lumping=scheme.interface_lumping,
        linear_solver=scheme.linear_solver,
        workers=scheme.workers,
    )
    if cfg.problem.case is not None:
        case = verification.make_manufactured(
            cfg.problem.case, geo.lx, geo.ly, x_interface=geo.split_index * geo.lx / geo.nx
        )
        context = verification.build_context(case, geo.nx, geo.ny, geo.split_index, **options)
        initial = verification.exact_states(case, context, 0.0, 0)
        ranges = (case.pc_range, case.pc_range)
    else:
        problem = cfg.problem
        context = SolverContext(
            mesh=build_mesh(geo.lx, geo.ly, geo.nx, geo.ny, geo.split_index),
            layers=tuple(layer.params for layer in cfg.layers),
            phases=cfg.phases,
            gravity=cfg.gravity,
            sources=SourceSpec.constant(
                cfg.layers[0].source_w,
                cfg.layers[0].source_g,
                cfg.layers[1].source_w,
                cfg.layers[1].source_g,
            ),
            boundary=_constant_boundary(problem.initial_p_w, problem.initial_p_g),
            **options,
        )
        initial = constant_initial_states(problem.initial_p_w, problem.initial_p_g, context)
        ranges = tuple(layer.pc_range for layer in cfg.layers)

    constants = tuple(
        certify_constants(context.layer(s), context.phases, ranges[s - 1], cfg.layers[s - 1].samples)
        for s in SUBDOMAINS
    )
    grid = TimeGrid(cfg.time.T, cfg.time.N)
    common = dict(
        tol=scheme.tol, max_iter=scheme.max_iter, tau=grid.tau, g_init_mode=scheme.g_init_mode
    )
    if scheme.L is None:
        L = suggest_L(constants)
    else:
        L = SchemeParams.from_values(scheme.L, (1.0, 1.0), **common).L
    if scheme.lam is None:
        provisional = SchemeParams(L=L, lam={p: 1.0 for p in PHASES}, **common)
        lam = suggest_lambda(context, provisional, initial)
    else:
        lam = dict(zip(PHASES, scheme.lam))
    params = SchemeParams(L=L, lam=lam, **common)

    simulation = SimulationConfig(
        grid=grid,
        params=params,
        constants=constants,
        M=scheme.M,
        initial=initial,
        override_admissibility=scheme.override_admissibility,
    )
    resolved = {
        "mode": "case" if cfg.problem.case is not None else "constant",
        "case": cfg.problem.case or "",
        "T": grid.T,
        "N": grid.N,
        "tau": grid.tau,
        "M": scheme.M,
        "gravity": context.gravity,
    }
    for phase in PHASES:
        for subdomain in SUBDOMAINS:
            resolved[f"L_{phase.value}{subdomain}"] = params.L_for(phase, subdomain)
    for phase in PHASES:
        resolved[f"lambda_{phase.value}"] = params.lam_for(phase)
    logger.info("Resolved scenario %s: %s", cfg.path, resolved)
    return Scenario(config=cfg, context=context, simulation=simulation, resolved=resolved)


def _load_scenario(config_path):
    """Returns ``(scenario, None)`` or ``(None, exit_code)`` after reporting the problem."""
    try:
        cfg = load_config(config_path)
    except ConfigError as exc:
        return None, _fail(ExitCode.CONFIG_ERROR, exc.message)
    try:
        return build_scenario(cfg), None
    except (ConstitutiveError, MeshError, ValueError) as exc:
        return None, _fail(ExitCode.CONFIG_ERROR, f"{config_path}: {exc}")


def _apply_verbosity(cfg, pinned):
    if cfg.output.verbosity and not pinned:
        logging.getLogger().setLevel(cfg.output.verbosity)


def cmd_run(config_path, out_dir=None, pinned_level=False):
    """
    Runs a scenario and writes fields, the convergence log and the manifest.

    Args:
        config_path (str): Scenario file.
        out_dir (str, optional): Output directory; defaults to ``[output] directory`` or ``.``.
        pinned_level (bool, optional): Ignore the scenario's verbosity.

    Returns:
        ExitCode: The exit status.
    """
    scenario, code = _load_scenario(config_path)
    if scenario is None:
        return code
    cfg = scenario.config
    _apply_verbosity(cfg, pinned_level)
    out_dir = Path(out_dir or cfg.output.directory or ".")
    simulation = scenario.simulation
    admissibility = check_admissibility(scenario.constants, scenario.params, simulation.M)
    manifest_path = paths.manifest(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        output.write_manifest(
            manifest_path,
            cfg.text,
            scenario.resolved,
            scenario.constants,
            admissibility,
            output.artifact_version(__version__, cfg.text),
        )
        output.write_key_values(paths.admissibility(out_dir), admissibility.as_dict())
    except OSError as exc:
        return _fail(ExitCode.IO_ERROR, f"cannot write to {out_dir}: {exc}")

    def write_level(level):
        if "csv" in cfg.output.formats:
            output.write_fields_csv(
                paths.field_csv(out_dir, level.time_level), scenario.context, level.states
            )
        if "vtk" in cfg.output.formats:
            output.write_fields_vtk(
                paths.field_vtk(out_dir, level.time_level), scenario.context, level.states
            )

    start = time.perf_counter()
    try:
        trajectory = run_simulation(simulation, scenario.context, on_step=write_level)
    except AdmissibilityError as exc:
        return _fail(
            ExitCode.ADMISSIBILITY_ERROR,
            f"{exc.message}; run 'ddlscheme check {config_path}' for tau_max and suggested L, "
            "or set override_admissibility = true",
        )
    except OSError as exc:
        return _fail(ExitCode.IO_ERROR, f"cannot write fields to {out_dir}: {exc}")
    elapsed = time.perf_counter() - start

    reports = trajectory.reports()
    if trajectory.failure is not None:
        reports.append(trajectory.failure.report)
    summary = {
        "levels_completed": trajectory.final.time_level,
        "levels_requested": simulation.grid.N,
        "status": "completed" if trajectory.completed else trajectory.failure.report.status.value,
        "total_iterations": sum(r.iterations_used for r in reports),
        "admissible": admissibility.passed,
        "wall_seconds": elapsed,
    }
    try:
        output.write_convergence_log(paths.convergence_log(out_dir), reports)
        output.append_summary(manifest_path, summary)
    except OSError as exc:
        return _fail(ExitCode.IO_ERROR, f"cannot write to {out_dir}: {exc}")

    if trajectory.failure is not None:
        failure = trajectory.failure
        return _fail(
            ExitCode.NONCONVERGENCE,
            f"time level {failure.time_level}: {failure.report.status.value} after "
            f"{failure.report.iterations_used} iterations ({failure.report.message})",
        )
    print(
        f"completed {simulation.grid.N} time steps, {summary['total_iterations']} iterations, "
        f"output in {out_dir}"
    )
    return ExitCode.OK


def cmd_check(config_path, pinned_level=False):
    """
    Prints the admissibility report, ``tau_max`` and the suggested ``L`` without running.

    Returns:
        ExitCode: ``OK`` if admissible, ``ADMISSIBILITY_ERROR`` otherwise.
    """
    scenario, code = _load_scenario(config_path)
    if scenario is None:
        return code
    _apply_verbosity(scenario.config, pinned_level)
    params, constants, M = scenario.params, scenario.constants, scenario.simulation.M
    report = check_admissibility(constants, params, M)

    print(f"tau = {report.tau:.6g}, M = {report.M_used:.6g}")
    for item, c in zip(report.layers, constants):
        print(
            f"layer {item.layer}: L_S = {c.lipschitz_S:.6g}, L_kw = {c.lipschitz_kw:.6g}, "
            f"L_kg = {c.lipschitz_kg:.6g}, m = {c.mobility_lower:.6g}"
        )
        print(
            f"  parameter condition 1/L_S - sum 1/(2L) = {item.parameter_value:.6g} "
            f"[{'pass' if item.parameter_pass else 'FAIL'}]"
        )
        print(f"  time-step condition C = {item.c_value:.6g} [{'pass' if item.time_step_pass else 'FAIL'}]")
    try:
        tau_max = max_stable_tau(constants, params, M)
        print(f"tau_max = {tau_max:.6g}")
    except NoAdmissibleTimeStepError as exc:
        tau_max = None
        print(f"tau_max = none ({exc.message})")
    suggested = suggest_L(constants)
    print(
        "suggested L = "
        + ", ".join(f"{suggested[(p, s)]:.6g}" for s in SUBDOMAINS for p in PHASES)
        + "  (Lw1, Lg1, Lw2, Lg2)"
    )
    if report.passed:
        print("admissible")
        return ExitCode.OK

    hints = []
    if not all(item.parameter_pass for item in report.layers):
        hints.append("increase L to at least the suggested values")
    elif tau_max is not None:
        steps = math.floor(scenario.config.time.T / tau_max) + 1
        hints.append(f"reduce tau below {tau_max:.6g} (N >= {steps})")
    hints.append("or lower M if the gradient bound allows it")
    return _fail(ExitCode.ADMISSIBILITY_ERROR, "not admissible: " + "; ".join(hints))


def _print_study(study):
    print(f"case '{study.case_id}', tol = {study.tol:g}")
    header = ["level", "h", "L2_w", "L2_g", "order_w", "order_g", "oracle", "iterations"]
    print("  ".join(f"{name:>11}" for name in header))
    for row in study.rows:
        e = row.errors
        cells = [
            str(row.level),
            f"{e.h:.4g}",
            f"{e.l2[Phase.WETTING]:.3e}",
            f"{e.l2[Phase.NONWETTING]:.3e}",
            f"{e.orders.get('L2_w', math.nan):.3f}",
            f"{e.orders.get('L2_g', math.nan):.3f}",
            "n/a" if row.oracle_difference is None else f"{row.oracle_difference:.3e}",
            str(row.iterations),
        ]
        print("  ".join(f"{cell:>11}" for cell in cells))


def cmd_verify(
    case_id,
    levels,
    out_dir=None,
    T=0.25,
    tol=1e-10,
    with_oracle=True,
    temporal=False,
    workers=1,
):
    """
    Runs the refinement study of a catalog case and checks its acceptance thresholds.

    Returns:
        ExitCode: ``OK``, ``VERIFICATION_FAILED``, ``ORACLE_FAILURE`` or ``CONFIG_ERROR``.
    """
    try:
        case = verification.make_manufactured(case_id)
    except CatalogError as exc:
        return _fail(ExitCode.CONFIG_ERROR, exc.message)
    try:
        study = verification.refinement_study(
            case_id, levels, T=T, tol=tol, with_oracle=with_oracle, workers=workers, case=case
        )
        temporal_study = verification.temporal_order(case_id) if temporal else None
    except OracleError as exc:
        return _fail(ExitCode.ORACLE_FAILURE, exc.message)
    except ValueError as exc:
        return _fail(ExitCode.CONFIG_ERROR, str(exc))

    _print_study(study)
    if out_dir is not None:
        try:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            output.write_error_report(
                paths.error_report(out_dir, case_id), case_id, [row.errors for row in study.rows]
            )
        except OSError as exc:
            return _fail(ExitCode.IO_ERROR, f"cannot write to {out_dir}: {exc}")

    failures = verification.evaluate_study(study, exact=case.exact)
    if temporal_study is not None:
        print(
            "temporal orders: "
            + ", ".join(f"{order:.3f}" for order in temporal_study.orders)
        )
        observed = temporal_study.orders[-1] if temporal_study.orders else math.nan
        if not abs(observed - verification.EXPECTED_TEMPORAL_ORDER) <= TEMPORAL_WINDOW:
            failures.append(f"temporal order {observed:.3f}")
    if failures:
        for failure in failures:
            print(f"  {failure}", file=sys.stderr)
        return _fail(ExitCode.VERIFICATION_FAILED, f"{len(failures)} acceptance check(s) failed")
    print("all acceptance checks passed")
    return ExitCode.OK


def _levels(text):
    try:
        levels = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"'{text}' is not a comma-separated list of integers")
    if not levels:
        raise argparse.ArgumentTypeError("at least one level is required")
    return levels


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ddlscheme",
        description="L-scheme domain decomposition for two-phase flow in a two-layer medium",
    )
    parser.add_argument("--version", action="version", version=f"ddlscheme {__version__}")
    parser.add_argument(
        "-v",
        "--verbose",
        action="count",
        default=0,
        help="INFO with -v, DEBUG with -vv; overrides DDLSCHEME_LOG_LEVEL",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="run a scenario and write its output")
    run.add_argument("config", type=Path, help="scenario file")
    run.add_argument("--out", type=Path, default=None, help="output directory")

    check = commands.add_parser("check", help="check admissibility without running")
    check.add_argument("config", type=Path, help="scenario file")

    verify = commands.add_parser("verify", help="refinement study of a manufactured case")
    verify.add_argument("--case", required=True, help="catalog case id")
    verify.add_argument("--levels", type=_levels, default=[8, 16, 32], help="e.g. 8,16,32")
    verify.add_argument("--out", type=Path, default=None, help="directory for the error report")
    verify.add_argument("--T", type=float, default=0.25, help="final time")
    verify.add_argument("--tol", type=float, default=1e-10, help="DD stopping tolerance")
    verify.add_argument("--no-oracle", action="store_true", help="skip the monolithic oracle")
    verify.add_argument("--temporal", action="store_true", help="also measure the temporal order")
    verify.add_argument("--workers", type=int, default=1, help="threads for subdomain solves")
    return parser


def _log_level(verbose):
    if verbose >= 2:
        return logging.DEBUG, True
    if verbose == 1:
        return logging.INFO, True
    value = os.getenv(paths.log_level_variable())
    if value and value.strip().upper() in VERBOSITY:
        return value.strip().upper(), True
    if value:
        print(f"ddlscheme: ignoring {paths.log_level_variable()}={value}", file=sys.stderr)
    return logging.WARNING, False


def main(argv: Optional[list] = None):
    """Command line entry point; returns the exit status."""
    parser = build_parser()
    args = parser.parse_args(argv)
    load_dotenv(paths.env_file())
    level, pinned = _log_level(args.verbose)
    _configure_logging(level)

    if args.command == "run":
        return int(cmd_run(args.config, args.out, pinned_level=pinned))
    if args.command == "check":
        return int(cmd_check(args.config, pinned_level=pinned))
    return int(
        cmd_verify(
            args.case,
            args.levels,
            out_dir=args.out,
            T=args.T,
            tol=args.tol,
            with_oracle=not args.no_oracle,
            temporal=args.temporal,
            workers=args.workers,
        )
    )


__all__ = [
    "ExitCode",
    "Scenario",
    "build_scenario",
    "cmd_run",
    "cmd_check",
    "cmd_verify",
    "build_parser",
    "main",
]
