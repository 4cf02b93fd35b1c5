"""
Post-processing of trajectories

Checks the energy dissipation inequality for
H(u, v) = (f + g)(u) + ||u - v||^2 / (2 eta) along (xdot + x, x), the
bound on the subgradient witness, decay of the velocity, the trajectory
length bound ||x(t) - x(T)|| <= sigma(t), criticality of the terminal
point, and classifies the convergence rate from the Lojasiewicz exponent.
Statements about t -> infinity are checked on [0, T] with T the last
sample of a residual-terminated run.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from numpy.typing import ArrayLike
from scipy.integrate import cumulative_trapezoid
from scipy.stats import linregress

from fbflow.core.dynamics import CRITICALITY_TOL, EnergySample, energy, energy_sample, subgradient_witness
from fbflow.core.integrator import Trajectory, refined_grid, resample
from fbflow.exceptions import DegenerateWindowError, ProblemMismatchError
from fbflow.models.problem import CompositeProblem, objective
from fbflow.models.reports import EnergyReport, LimitReport, RateFit, TailReport, VelocityReport
from fbflow.models.run_config import Regime
from fbflow.utils.helpers import as_vector

logger = logging.getLogger(__name__)

QUADRATURE_MIN_POINTS = 10_000
EXPONENTIAL_BAND = (0.45, 0.55)
TRANSIENT_FRACTION = 0.2
DECAY_THRESHOLD = 1e-3
FLOOR_FACTOR = 100.0
MIN_WINDOW = 5
TERMINAL_ENERGY_FACTOR = 10.0

_EPS = float(np.finfo(np.float64).eps)


def _check_pair(problem: CompositeProblem, traj: Trajectory) -> None:
    if traj.problem is not problem:
        logger.error(f"Trajectory of {traj.problem.name} analysed against {problem.name}")
        raise ProblemMismatchError(
            f"trajectory was computed on {traj.problem.name!r}, not on {problem.name!r}"
        )


def _dense(traj: Trajectory, min_points: int) -> Tuple[Trajectory, np.ndarray]:
    """Hermite-resampled trajectory and the positions of the original samples in it"""
    dense = resample(traj, refined_grid(traj.times, min_points))
    return dense, np.searchsorted(dense.times, traj.times)


def _reverse_cumulative(values: np.ndarray, times: np.ndarray) -> np.ndarray:
    """integral from t_i to the last time, at every grid point"""
    if times.size < 2:
        return np.zeros_like(times)
    forward = cumulative_trapezoid(values, times, initial=0.0)
    return forward[-1] - forward


# ---------------------------------------------------------------------------
# Energy dissipation


@dataclass
class EnergyTrace:
    samples: List[EnergySample]
    dissipation_constant: float
    violations: List[Tuple[float, float]]
    H: np.ndarray
    dissipated: np.ndarray
    slack: float

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.samples])

    @property
    def nonincreasing(self) -> bool:
        return not self.violations

    def report(self, problem: CompositeProblem) -> EnergyReport:
        final = self.samples[-1]
        return EnergyReport(
            dissipation_constant=self.dissipation_constant,
            slack=self.slack,
            initial_energy=float(self.H[0]),
            final_energy=float(self.H[-1]),
            objective_along_flow=objective(problem, final.u),
            nonincreasing=self.nonincreasing,
            violations=list(self.violations),
        )


def energy_trace(
    problem: CompositeProblem,
    traj: Trajectory,
    slack: Optional[float] = None,
    min_points: int = QUADRATURE_MIN_POINTS,
) -> EnergyTrace:
    """
    Per-interval check of H(u_{i+1}, v_{i+1}) - H(u_i, v_i) <= -c * int ||xdot||^2

    with c = 1/eta - beta(3 + eta beta). The integral uses the trapezoid
    rule on the Hermite-refined grid. Violations are recorded as
    (t_i, excess) and never raised.
    """
    _check_pair(problem, traj)
    slack = 10.0 * traj.error_scale if slack is None else slack
    c = problem.dissipation_constant

    samples = [energy_sample(problem, t, x, v) for t, x, v in zip(traj.times, traj.states, traj.velocities)]
    H = np.array([s.H for s in samples])

    if len(traj) >= 2:
        dense, positions = _dense(traj, min_points)
        squared = np.sum(dense.velocities**2, axis=1)
        cumulative = cumulative_trapezoid(squared, dense.times, initial=0.0)
        dissipated = np.diff(cumulative[positions])
    else:
        dissipated = np.zeros(0)

    violations: List[Tuple[float, float]] = []
    for i, mass in enumerate(dissipated):
        excess = (H[i + 1] - H[i]) + c * (1.0 - slack) * mass
        allowance = (slack + 16.0 * _EPS) * max(1.0, abs(H[i]))
        if excess > allowance:
            violations.append((float(traj.times[i]), float(excess)))

    if violations:
        logger.warning(f"{problem.name}: {len(violations)} energy dissipation violations recorded")
    return EnergyTrace(
        samples=samples,
        dissipation_constant=c,
        violations=violations,
        H=H,
        dissipated=dissipated,
        slack=slack,
    )


def check_subgradient_bound(problem: CompositeProblem, traj: Trajectory) -> List[float]:
    """Times at which ||z|| > (beta + 1/eta)||xdot|| (relative slack 1e-12)"""
    _check_pair(problem, traj)
    return [float(t) for t, x in zip(traj.times, traj.states) if not subgradient_witness(problem, x).within_bound]


# ---------------------------------------------------------------------------
# Velocity and trajectory length


@dataclass
class VelocityDecay:
    """
    Tail quantities of ||xdot||. Both tails are monotone by construction
    (running maximum, and a clipped reverse integral of a nonnegative
    integrand), so `monotone` is a structural sanity flag; the decay itself
    is judged on the final supremum.
    """

    times: np.ndarray
    speeds: np.ndarray
    sup_tail: np.ndarray
    l2_tail: np.ndarray

    @property
    def monotone(self) -> bool:
        return bool(np.all(np.diff(self.sup_tail) <= 0) and np.all(np.diff(self.l2_tail) <= 0))

    def report(self) -> VelocityReport:
        return VelocityReport(
            initial_speed=float(self.speeds[0]),
            final_sup=float(self.sup_tail[-1]),
            l2_total=float(self.l2_tail[0]),
            monotone=self.monotone,
        )


def velocity_decay(traj: Trajectory, min_points: int = QUADRATURE_MIN_POINTS) -> VelocityDecay:
    """
    Running tail supremum of ||xdot|| and tail L2 mass int_t^T ||xdot||^2

    Both are nonincreasing by construction; the L2 tail is made monotone
    against quadrature rounding and clipped at zero from below.
    """
    speeds = traj.velocity_norms
    sup_tail = np.maximum.accumulate(speeds[::-1])[::-1]
    if len(traj) >= 2:
        dense, positions = _dense(traj, min_points)
        tail = _reverse_cumulative(np.sum(dense.velocities**2, axis=1), dense.times)[positions]
        l2_tail = np.maximum(np.minimum.accumulate(tail), 0.0)
    else:
        l2_tail = np.zeros(len(traj))
    return VelocityDecay(times=traj.times.copy(), speeds=speeds, sup_tail=sup_tail, l2_tail=l2_tail)


@dataclass
class TailLength:
    """sigma(t) = int_t^T ||xdot(s)|| ds and the bound ||x(t) - x(T)|| <= sigma(t)"""

    times: np.ndarray
    sigma: np.ndarray
    distance: np.ndarray
    slack: np.ndarray
    violations: List[float] = field(default_factory=list)

    @property
    def total_length(self) -> float:
        return float(self.sigma[0]) if self.sigma.size else 0.0

    def report(self) -> TailReport:
        excess = self.distance - self.sigma - self.slack
        return TailReport(
            total_length=self.total_length,
            max_violation=float(max(0.0, excess.max())) if excess.size else 0.0,
            violations=list(self.violations),
        )


def tail_length(traj: Trajectory, min_points: int = QUADRATURE_MIN_POINTS) -> TailLength:
    final = traj.final_state
    distance = np.linalg.norm(traj.states - final, axis=1)
    if len(traj) < 2:
        zeros = np.zeros(len(traj))
        return TailLength(times=traj.times.copy(), sigma=zeros, distance=distance, slack=zeros)

    dense, positions = _dense(traj, min_points)
    sigma = _reverse_cumulative(np.linalg.norm(dense.velocities, axis=1), dense.times)[positions]
    sigma = np.maximum(sigma, 0.0)
    sigma[-1] = 0.0

    # quadrature slack from the coarse/fine trapezoid difference, plus the
    # integrator's accumulated local error over the remaining steps
    coarse = _reverse_cumulative(traj.velocity_norms, traj.times)
    remaining = np.arange(len(traj) - 1, -1, -1, dtype=np.float64)
    scale = max(1.0, float(np.max(np.linalg.norm(traj.states, axis=1))))
    slack = np.abs(sigma - coarse) + 10.0 * traj.error_scale * (1.0 + remaining) * scale + 1e-12 * scale

    violations = [float(t) for t, d, s, e in zip(traj.times, distance, sigma, slack) if d > s + e]
    if violations:
        logger.warning(f"{traj.problem.name}: trajectory length bound violated at {len(violations)} samples")
    return TailLength(times=traj.times.copy(), sigma=sigma, distance=distance, slack=slack, violations=violations)


# ---------------------------------------------------------------------------
# Limit point


def limit_report(problem: CompositeProblem, traj: Trajectory, crit_tol: float = CRITICALITY_TOL) -> LimitReport:
    """
    Terminal point, its criticality residual and the energy gap
    H(xdot + x, x) - (f + g)(x) at T. With the coercive flag set, also
    checks (f + g)(xdot(t) + x(t)) <= H(xdot(0) + x0, x0) at every sample.

    The gap vanishes with r = ||xdot(T)||: with p = x + xdot and
    w = -grad g(x) - xdot / eta in the subdifferential of f at p, it is
    at most (||w|| + ||grad g(x)||) r + (beta + 1/eta) r^2 / 2 from above.
    energy_gap_allowance widens that by TERMINAL_ENERGY_FACTOR for the
    lower side and adds rounding of the objective values.
    """
    _check_pair(problem, traj)
    x_bar = traj.final_state
    v_bar = traj.velocities[-1]
    residual = float(np.linalg.norm(v_bar))
    value = objective(problem, x_bar)
    initial_energy = energy(problem, traj.velocities[0] + traj.states[0], traj.states[0])

    sublevel: Optional[bool] = None
    if problem.coercive:
        allowance = 10.0 * traj.error_scale * max(1.0, abs(initial_energy))
        sublevel = all(
            objective(problem, v + x) <= initial_energy + allowance for x, v in zip(traj.states, traj.velocities)
        )

    grad = problem.g.grad(x_bar)
    w = -grad - v_bar / problem.eta
    allowance = (
        TERMINAL_ENERGY_FACTOR * residual * (1.0 + float(np.linalg.norm(grad)) + float(np.linalg.norm(w)))
        + (problem.beta + 1.0 / problem.eta) * residual**2
        + FLOOR_FACTOR * _EPS * max(1.0, abs(value))
    )

    return LimitReport(
        final_state=[float(v) for v in x_bar],
        residual=residual,
        is_critical=residual <= crit_tol,
        objective=value,
        energy_gap=energy(problem, v_bar + x_bar, x_bar) - value,
        energy_gap_allowance=allowance,
        terminal_energy_bound=float(np.dot(v_bar, v_bar)) / (2.0 * problem.eta),
        max_norm=float(np.max(np.linalg.norm(traj.states, axis=1))),
        initial_energy=initial_energy,
        coercive=problem.coercive,
        sublevel_bound_holds=sublevel,
    )


# ---------------------------------------------------------------------------
# Rate classification


def _settle_time(times: np.ndarray, speeds: np.ndarray) -> Optional[float]:
    """First time from which ||xdot|| is exactly zero at every later sample"""
    moving = np.nonzero(speeds > 0.0)[0]
    if moving.size == 0:
        return float(times[0])
    last = int(moving[-1])
    if last + 1 < times.size:
        return float(times[last + 1])
    return None


def classify_theta(theta: float, settled: bool, band: Tuple[float, float] = EXPONENTIAL_BAND) -> Regime:
    if theta < band[0]:
        return Regime.FINITE_TIME if settled else Regime.INCONCLUSIVE_FINITE_OR_EXPONENTIAL
    if theta <= band[1]:
        return Regime.EXPONENTIAL
    return Regime.POLYNOMIAL


def fit_rate(
    problem: CompositeProblem,
    traj: Trajectory,
    limit: ArrayLike,
    transient: float = TRANSIENT_FRACTION,
    band: Tuple[float, float] = EXPONENTIAL_BAND,
) -> RateFit:
    """
    Estimate the Lojasiewicz exponent theta and the rate regime

    theta is the slope of log ||z(t)|| against log (H(u, v) - H(x_bar, x_bar)),
    i.e. the inequality |H - H*|^theta <= C ||z|| read at equality. The
    distance ||x(t) - x_bar|| is then fitted with a exp(-b t) for the
    exponential regime or (c t + d)^(-(1 - theta)/(2 theta - 1)) for the
    polynomial one.
    """
    _check_pair(problem, traj)
    limit = as_vector(limit, problem.dim, name="limit")
    times = traj.times
    distance = np.linalg.norm(traj.states - limit, axis=1)
    speeds = traj.velocity_norms
    settle = _settle_time(times, speeds)

    if distance.min() > DECAY_THRESHOLD:
        logger.warning(f"{problem.name}: distance to limit never fell below {DECAY_THRESHOLD}")
        return RateFit(regime=Regime.INCONCLUSIVE, settle_time=settle, note="insufficient decay")

    h_limit = objective(problem, limit)
    gaps = np.array([energy(problem, v + x, x) for x, v in zip(traj.states, traj.velocities)]) - h_limit
    z_norms = np.array([subgradient_witness(problem, x).norm for x in traj.states])

    start = int(math.ceil(transient * len(traj)))
    floor_x = FLOOR_FACTOR * _EPS * max(1.0, float(np.linalg.norm(limit)))
    # objective values near a zero limit value keep full relative precision
    floor_h = FLOOR_FACTOR * _EPS * abs(h_limit)
    mask = np.zeros(len(traj), dtype=bool)
    mask[start:] = True
    mask &= (distance > floor_x) & (gaps > floor_h) & (z_norms > 0.0) & (times > 0.0)

    if int(mask.sum()) < MIN_WINDOW:
        if settle is not None:
            return RateFit(regime=Regime.FINITE_TIME, settle_time=settle, note="velocity vanished exactly")
        logger.error(f"{problem.name}: only {int(mask.sum())} usable samples in the fit window")
        raise DegenerateWindowError(f"fit window holds {int(mask.sum())} usable samples, need {MIN_WINDOW}")

    loj = linregress(np.log(gaps[mask]), np.log(z_norms[mask]))
    theta = float(loj.slope)
    regime = classify_theta(theta, settle is not None, band)

    t_w, d_w = times[mask], distance[mask]
    power = linregress(np.log(t_w), np.log(d_w))
    fit_constants: Optional[Tuple[float, float]] = None
    r_squared: Optional[float] = None
    if regime == Regime.POLYNOMIAL and theta < 1.0:
        exponent = (1.0 - theta) / (2.0 * theta - 1.0)
        law = linregress(t_w, d_w ** (-1.0 / exponent))
        fit_constants = (float(law.slope), float(law.intercept))
        r_squared = float(law.rvalue**2)
    else:
        law = linregress(t_w, np.log(d_w))
        fit_constants = (float(math.exp(law.intercept)), float(-law.slope))
        r_squared = float(law.rvalue**2)

    if regime == Regime.INCONCLUSIVE_FINITE_OR_EXPONENTIAL:
        logger.warning(f"{problem.name}: theta={theta:.3f} below the exponential band without exact settling")

    return RateFit(
        theta=theta,
        C=float(math.exp(-loj.intercept)),
        regime=regime,
        fit_constants=fit_constants,
        fit_window=(float(t_w[0]), float(t_w[-1])),
        r_squared=r_squared,
        power_exponent=float(power.slope),
        settle_time=settle,
        window_size=int(mask.sum()),
    )


def analysis_trace_rows(
    problem: CompositeProblem, traj: Trajectory, energy_data: EnergyTrace, tail: TailLength, limit: ArrayLike
) -> List[List[float]]:
    """Per-sample rows t, H, ||xdot||, ||z||, sigma, dist-to-limit"""
    limit = as_vector(limit, problem.dim, name="limit")
    rows = []
    for i, (t, x) in enumerate(zip(traj.times, traj.states)):
        rows.append(
            [
                float(t),
                float(energy_data.H[i]),
                float(np.linalg.norm(traj.velocities[i])),
                subgradient_witness(problem, x).norm,
                float(tail.sigma[i]),
                float(np.linalg.norm(x - limit)),
            ]
        )
    return rows
