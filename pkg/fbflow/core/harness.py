"""
Batch front-end: build a problem from a RunConfig, integrate it, run the
enabled checks and write the artifacts of the run
"""

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from jinja2 import Environment, FileSystemLoader

from fbflow.config import settings
from fbflow.core.analysis import (
    analysis_trace_rows,
    check_subgradient_bound,
    energy_trace,
    fit_rate,
    limit_report,
    tail_length,
    velocity_decay,
)
from fbflow.core.dynamics import CRITICALITY_TOL, check_field_lipschitz, criticality_residual, fb_sequence, fb_solve
from fbflow.core.integrator import TerminationReason, Trajectory, integrate
from fbflow.core.prox_catalog import check_gradient_lipschitz
from fbflow.exceptions import (
    ConvergenceFailureError,
    DegenerateWindowError,
    DimensionMismatchError,
    InvalidConfigError,
    InvalidParameterError,
)
from fbflow.models.problem import CompositeProblem, objective
from fbflow.models.reports import AnalysisReport, CheckResult, DiscreteComparison
from fbflow.models.run_config import (
    AnalysisToggles,
    BoxProxSpec,
    CosineSmoothSpec,
    IntegratorConfig,
    L1ProxSpec,
    ProblemSpec,
    QuadraticSmoothSpec,
    QuarticSmoothSpec,
    Regime,
    RunConfig,
    ZeroProxSpec,
)
from fbflow.utils.helpers import format_row, sanitize_filename

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG_ERROR = 2

DISCRETE_TOL = 1e-13
DISCRETE_MAX_ITER = 200_000
DISCRETE_CSV_MAX_ROWS = 10_000
SAME_LIMIT_TOL = 1e-6
SAME_OBJECTIVE_TOL = 1e-8

TEMPLATE_DIR = Path(__file__).parent.parent / "templates"


@dataclass
class RunOutcome:
    name: str
    exit_code: int
    failed: List[str] = field(default_factory=list)
    artifacts: Dict[str, Path] = field(default_factory=dict)
    report: Optional[AnalysisReport] = None
    diagnostics: List[str] = field(default_factory=list)


def build_problem(config: RunConfig) -> CompositeProblem:
    """Construct the problem of a run, mapping parameter errors to config diagnostics"""
    try:
        return config.problem.build(name=config.name)
    except (InvalidParameterError, DimensionMismatchError) as e:
        logger.error(f"Invalid problem in {config.name}: {e}")
        raise InvalidConfigError([f"{config.name}: problem: {e}"]) from e


def _check(name: str, passed: bool, detail: str = "") -> CheckResult:
    if not passed:
        logger.warning(f"Check failed: {name} ({detail})")
    return CheckResult(name=name, passed=bool(passed), detail=detail)


def _run_checks(
    problem: CompositeProblem, traj: Trajectory, config: RunConfig, report: AnalysisReport
) -> List[List[float]]:
    toggles = config.analysis
    integrator = config.integrator
    rng = np.random.default_rng(config.seed)
    checks = report.checks

    if toggles.lipschitz:
        grad_ratio = check_gradient_lipschitz(problem.g, toggles.lipschitz_pairs, rng)
        field_ratio = check_field_lipschitz(problem, toggles.lipschitz_pairs, rng)
        checks.append(_check("gradient_lipschitz", grad_ratio <= 1.0 + 1e-10, f"max ratio {grad_ratio:.6g}"))
        checks.append(_check("field_lipschitz", field_ratio <= 1.0 + 1e-9, f"max ratio {field_ratio:.6g}"))

    energy = energy_trace(problem, traj)
    report.energy = energy.report(problem)
    if toggles.energy:
        checks.append(_check("energy_dissipation", energy.nonincreasing, f"{len(energy.violations)} violations"))

    if toggles.subgradient:
        failures = check_subgradient_bound(problem, traj)
        checks.append(_check("subgradient_bound", not failures, f"{len(failures)} samples above the bound"))

    decay = velocity_decay(traj)
    report.velocity = decay.report()
    if toggles.velocity:
        # tails are monotone by construction; the final supremum is what can fail
        passed = decay.monotone
        if traj.terminated_by == TerminationReason.RESIDUAL:
            passed = passed and decay.sup_tail[-1] <= integrator.stop_residual
        checks.append(_check("velocity_decay", passed, f"final sup {decay.sup_tail[-1]:.3e}"))

    tail = tail_length(traj)
    report.tail = tail.report()
    if toggles.tail_length:
        checks.append(_check("trajectory_length", not tail.violations, f"{len(tail.violations)} violations"))

    limit = limit_report(problem, traj)
    report.limit = limit
    if toggles.criticality:
        tol = integrator.stop_residual if traj.terminated_by == TerminationReason.RESIDUAL else CRITICALITY_TOL
        passed = limit.residual <= max(tol, 0.0)
        if limit.sublevel_bound_holds is not None:
            passed = passed and limit.sublevel_bound_holds
        checks.append(_check("criticality", passed, f"residual {limit.residual:.3e}"))

        if math.isfinite(limit.objective):
            passed = abs(limit.energy_gap) <= limit.energy_gap_allowance
            detail = f"|H(T) - (f+g)(x(T))| = {abs(limit.energy_gap):.3e}, allowed {limit.energy_gap_allowance:.3e}"
        else:
            passed, detail = True, "x(T) outside dom f; skipped"
        checks.append(_check("terminal_energy", passed, detail))

    reference = problem.known_minimizer if problem.known_minimizer is not None else traj.final_state
    if toggles.rate:
        try:
            report.rate = fit_rate(problem, traj, reference)
            detail = f"regime {report.rate.regime.value}"
            passed = toggles.expected_regime is None or report.rate.regime == toggles.expected_regime
        except DegenerateWindowError as e:
            detail = str(e)
            passed = toggles.expected_regime is None
        checks.append(_check("rate", passed, detail))

    trace_rows = analysis_trace_rows(problem, traj, energy, tail, reference)
    report.trajectory["trace_rows"] = len(trace_rows)
    return trace_rows


def _compare_discrete(problem: CompositeProblem, traj: Trajectory, out_dir: Path, report: AnalysisReport) -> Path:
    """Run the discrete forward-backward iteration from x0 and compare limits"""
    path = out_dir / "discrete.csv"
    try:
        x_fb, iterations, _ = fb_solve(problem, problem.x0, tol=DISCRETE_TOL, max_iter=DISCRETE_MAX_ITER)
        converged = True
    except ConvergenceFailureError as e:
        logger.warning(f"{problem.name}: discrete iteration did not converge ({e})")
        iterations, converged = DISCRETE_MAX_ITER, False
        x_fb = None

    rows = fb_sequence(problem, problem.x0, max(1, min(iterations, DISCRETE_CSV_MAX_ROWS)))
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["k"] + [f"x_{i + 1}" for i in range(problem.dim)] + ["residual"])
        for k, x in enumerate(rows):
            writer.writerow([str(k)] + format_row([*x, criticality_residual(problem, x)]))

    if not converged:
        report.checks.append(
            CheckResult(name="discrete", passed=True, detail="discrete iteration did not converge; comparison skipped")
        )
        return path

    x_flow = traj.final_state
    comparison = DiscreteComparison(
        iterations=iterations,
        discrete_limit=[float(v) for v in x_fb],
        continuous_limit=[float(v) for v in x_flow],
        distance=float(np.linalg.norm(x_fb - x_flow)),
        objective_gap=abs(objective(problem, x_fb) - objective(problem, x_flow)),
        same_limit=bool(np.linalg.norm(x_fb - x_flow) <= SAME_LIMIT_TOL),
    )
    report.discrete = comparison
    if problem.is_convex:
        passed = comparison.same_limit and comparison.objective_gap <= SAME_OBJECTIVE_TOL
        report.checks.append(
            _check("discrete", passed, f"distance {comparison.distance:.3e}, objective gap {comparison.objective_gap:.3e}")
        )
    else:
        report.checks.append(CheckResult(name="discrete", passed=True, detail="nonconvex problem; limits may differ"))
    return path


def render_summary(report: AnalysisReport, config: RunConfig) -> str:
    env = Environment(loader=FileSystemLoader(str(TEMPLATE_DIR)), keep_trailing_newline=True)
    template = env.get_template("summary.txt.j2")
    return template.render(report=report, config=config)


def run(
    config: RunConfig, compare_discrete: bool = False, output_dir: Optional[Union[str, Path]] = None
) -> RunOutcome:
    """
    Integrate one configured problem and verify it

    Exit code 0 iff every enabled check passes, 1 if a check fails, 2 if
    the configuration does not describe a valid problem.
    """
    try:
        problem = build_problem(config)
    except InvalidConfigError as e:
        return RunOutcome(name=config.name, exit_code=EXIT_CONFIG_ERROR, failed=["config"], diagnostics=e.diagnostics)

    if output_dir is None:
        output_dir = config.output_dir or settings.OUTPUT_DIR / sanitize_filename(config.name)
    out_dir = Path(output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    logger.info(f"Run {config.name}: eta={problem.eta:.6g}, beta={problem.beta:.6g}, dim={problem.dim}")
    traj = integrate(problem, config.integrator)
    report = AnalysisReport(
        name=config.name,
        eta=problem.eta,
        beta=problem.beta,
        trajectory=traj.summary().model_dump(mode="json"),
        checks=[],
    )

    artifacts: Dict[str, Path] = {"trajectory": traj.to_csv(out_dir / "trajectory.csv")}
    trace_rows = _run_checks(problem, traj, config, report)

    trace_path = out_dir / "trace.csv"
    with open(trace_path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["t", "H", "xdot_norm", "z_norm", "sigma", "dist_to_limit"])
        for row in trace_rows:
            writer.writerow(format_row(row))
    artifacts["trace"] = trace_path

    if compare_discrete:
        artifacts["discrete"] = _compare_discrete(problem, traj, out_dir, report)

    analysis_path = out_dir / "analysis.json"
    analysis_path.write_text(report.model_dump_json(indent=2), encoding="utf-8")
    artifacts["analysis"] = analysis_path

    summary_path = out_dir / "summary.txt"
    summary_path.write_text(render_summary(report, config), encoding="utf-8")
    artifacts["summary"] = summary_path

    failed = report.failed
    exit_code = EXIT_CHECK_FAILED if failed else EXIT_OK
    logger.info(f"Run {config.name} finished with exit code {exit_code}")
    return RunOutcome(name=config.name, exit_code=exit_code, failed=failed, artifacts=artifacts, report=report)


def _run_in_worker(args) -> RunOutcome:
    config, compare_discrete, output_dir = args
    return run(config, compare_discrete=compare_discrete, output_dir=output_dir)


def run_corpus(
    configs: Sequence[RunConfig],
    output_dir: Union[str, Path],
    jobs: int = 1,
    compare_discrete: bool = False,
) -> List[RunOutcome]:
    """Run every config into output_dir/<name>, one problem per worker when jobs > 1"""
    output_dir = Path(output_dir)
    tasks = [(c, compare_discrete, output_dir / sanitize_filename(c.name)) for c in configs]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_in_worker, tasks))
    else:
        outcomes = [_run_in_worker(task) for task in tasks]
    for outcome in outcomes:
        logger.info(f"Corpus {outcome.name}: exit {outcome.exit_code} {outcome.failed or ''}")
    return outcomes


def corpus() -> List[RunConfig]:
    """The six built-in problems, each small enough to finish in seconds"""
    return [
        RunConfig(
            name="quadratic",
            problem=ProblemSpec(
                f=ZeroProxSpec(),
                g=QuadraticSmoothSpec(A=[[1.0, 0.0], [0.0, 2.0]], b=[-1.0, 2.0]),
                x0=[3.0, 2.0],
                coercive=True,
                known_minimizer=[1.0, -1.0],
            ),
            analysis=AnalysisToggles(expected_regime=Regime.EXPONENTIAL),
        ),
        RunConfig(
            name="lasso",
            problem=ProblemSpec(
                f=L1ProxSpec(weight=0.5),
                g=QuadraticSmoothSpec(
                    A=[[3.0, 1.0, 0.0], [1.0, 2.0, 0.5], [0.0, 0.5, 1.0]],
                    b=[-2.0, 1.0, -0.5],
                ),
                x0=[1.0, 1.0, 1.0],
                coercive=True,
            ),
            analysis=AnalysisToggles(expected_regime=Regime.EXPONENTIAL),
        ),
        RunConfig(
            name="box_quadratic",
            problem=ProblemSpec(
                f=BoxProxSpec(lo=0.0, hi=1.0),
                g=QuadraticSmoothSpec(A=[[2.0, 0.0], [0.0, 1.0]], b=[-3.0, 0.5]),
                x0=[0.5, 0.5],
                coercive=True,
                known_minimizer=[1.0, 0.0],
            ),
        ),
        RunConfig(
            name="cosine",
            problem=ProblemSpec(
                f=L1ProxSpec(weight=0.1),
                g=CosineSmoothSpec(a=1.0, Q=[[0.5, 0.0], [0.0, 0.5]]),
                x0=[2.5, -1.0],
                coercive=True,
            ),
        ),
        RunConfig(
            name="quartic",
            problem=ProblemSpec(
                f=BoxProxSpec(lo=-1.0, hi=1.0),
                g=QuarticSmoothSpec(radius=1.0),
                x0=[0.8],
                coercive=True,
                known_minimizer=[0.0],
            ),
            integrator=IntegratorConfig(abs_tol=1e-12, rel_tol=1e-9, t_max=1e10, stop_residual=1e-13),
            analysis=AnalysisToggles(expected_regime=Regime.POLYNOMIAL),
        ),
        RunConfig(
            name="halfline",
            problem=ProblemSpec(
                f=BoxProxSpec(lo=0.0, hi=float("inf")),
                g=QuadraticSmoothSpec(A=[[1.0]], b=[1.0], c=0.5),
                x0=[1.0],
                eta=0.2,
                coercive=True,
                known_minimizer=[0.0],
            ),
        ),
    ]
