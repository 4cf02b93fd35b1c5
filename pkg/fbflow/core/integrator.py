"""
Numerical integration of xdot = F(x) from x0

Fixed-step euler/rk4 and adaptive Dormand-Prince (scipy RK45) share one
sampling loop: every stored sample keeps the exact field value at its
state, so velocities never come from differencing.
"""

import csv
import logging
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, List, Optional, Union

import numpy as np
from numpy.typing import ArrayLike
from pydantic import BaseModel
from scipy.integrate import RK45
from scipy.interpolate import CubicHermiteSpline

from fbflow.core.dynamics import FlowField
from fbflow.exceptions import DivergenceError, InvalidParameterError, OutOfRangeError
from fbflow.models.problem import CompositeProblem
from fbflow.models.run_config import IntegrationMethod, IntegratorConfig
from fbflow.utils.helpers import format_row

logger = logging.getLogger(__name__)


class TerminationReason(str, Enum):
    T_MAX = "t_max"
    RESIDUAL = "residual"
    SAMPLE_CAP = "sample_cap"


class TrajectorySummary(BaseModel):
    problem: str
    method: str
    terminal_time: float
    terminal_state: List[float]
    residual: float
    sample_count: int
    terminated_by: TerminationReason


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Sampled solution of xdot = F(x), x(0) = x0"""

    problem: CompositeProblem
    times: np.ndarray
    states: np.ndarray
    velocities: np.ndarray
    terminated_by: TerminationReason
    method: str
    error_scale: float

    def __len__(self) -> int:
        return int(self.times.shape[0])

    @property
    def dim(self) -> int:
        return self.problem.dim

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]

    @property
    def final_time(self) -> float:
        return float(self.times[-1]) if len(self) else 0.0

    @property
    def velocity_norms(self) -> np.ndarray:
        return np.linalg.norm(self.velocities, axis=1)

    def summary(self) -> TrajectorySummary:
        return TrajectorySummary(
            problem=self.problem.name,
            method=self.method,
            terminal_time=self.final_time,
            terminal_state=[float(v) for v in self.final_state],
            residual=float(self.velocity_norms[-1]),
            sample_count=len(self),
            terminated_by=self.terminated_by,
        )

    def to_csv(self, path: Union[str, Path]) -> Path:
        """Columns t, x_1..x_n, xdot_1..xdot_n with 17 significant digits"""
        path = Path(path)
        n = self.dim
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(
                ["t"] + [f"x_{i + 1}" for i in range(n)] + [f"xdot_{i + 1}" for i in range(n)]
            )
            for t, x, v in zip(self.times, self.states, self.velocities):
                writer.writerow(format_row([t, *x, *v]))
        logger.info(f"Trajectory written: {path} ({len(self)} samples)")
        return path


class _Sampler:
    """Collects samples and decides when integration stops"""

    def __init__(self, flow: FlowField, config: IntegratorConfig, stop_on_residual: bool = True):
        self.flow = flow
        self.config = config
        self.stop_on_residual = stop_on_residual
        self.times: List[float] = []
        self.states: List[np.ndarray] = []
        self.velocities: List[np.ndarray] = []

    def record(self, t: float, x: np.ndarray) -> Optional[TerminationReason]:
        if not np.all(np.isfinite(x)):
            logger.error(f"Divergence at t={t} on {self.flow.problem.name}")
            raise DivergenceError(t, x)
        v = self.flow(x)
        self.times.append(float(t))
        self.states.append(np.array(x, dtype=np.float64, copy=True))
        self.velocities.append(v)
        if self.stop_on_residual and float(np.linalg.norm(v)) <= self.config.stop_residual:
            return TerminationReason.RESIDUAL
        if t >= self.config.t_max:
            return TerminationReason.T_MAX
        if len(self.times) >= self.config.max_samples:
            return TerminationReason.SAMPLE_CAP
        return None


def _euler_update(flow: FlowField, x: np.ndarray, v: np.ndarray, h: float) -> np.ndarray:
    return x + h * v


def _rk4_update(flow: FlowField, x: np.ndarray, v: np.ndarray, h: float) -> np.ndarray:
    k1 = v
    k2 = flow(x + 0.5 * h * k1)
    k3 = flow(x + 0.5 * h * k2)
    k4 = flow(x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


_FIXED_UPDATES: dict = {
    IntegrationMethod.EULER: _euler_update,
    IntegrationMethod.RK4: _rk4_update,
}


def _integrate_fixed(sampler: _Sampler, update: Callable, x0: np.ndarray) -> TerminationReason:
    config = sampler.config
    h = config.step
    reason = sampler.record(0.0, x0)
    i = 0
    while reason is None:
        i += 1
        t_next = min(i * h, config.t_max)
        dt = t_next - sampler.times[-1]
        x_next = update(sampler.flow, sampler.states[-1], sampler.velocities[-1], dt)
        reason = sampler.record(t_next, x_next)
    return reason


def _integrate_adaptive(sampler: _Sampler, x0: np.ndarray) -> TerminationReason:
    config = sampler.config
    solver = RK45(
        lambda t, y: sampler.flow(y),
        0.0,
        x0,
        config.t_max,
        rtol=config.rel_tol,
        atol=config.abs_tol,
    )
    reason = sampler.record(0.0, x0)
    while reason is None:
        message = solver.step()
        if solver.status == "failed":
            logger.error(f"RK45 failed at t={solver.t}: {message}")
            raise DivergenceError(solver.t, solver.y)
        reason = sampler.record(solver.t, solver.y)
        if reason is None and solver.status == "finished":
            reason = TerminationReason.T_MAX
    return reason


def integrate(
    problem: CompositeProblem, config: Optional[IntegratorConfig] = None, fixed_horizon: bool = False
) -> Trajectory:
    """
    Integrate xdot = F(x) from problem.x0 over [0, config.t_max]

    Stops at t_max, when ||F(x)|| <= stop_residual, or at the sample cap.
    With fixed_horizon the residual stop is off and every step up to t_max
    is taken, even from an exact fixed point.
    """
    config = IntegratorConfig() if config is None else config
    flow = FlowField(problem)
    if (
        not fixed_horizon
        and config.method == IntegrationMethod.EULER
        and config.step >= 1.0 / flow.lipschitz_bound
    ):
        logger.warning(
            f"Euler step {config.step} is above the stability guidance 1/(2+eta*beta)={1.0 / flow.lipschitz_bound:.6g}"
        )

    logger.info(f"Integrating {problem.name}: method={config.method.value}, t_max={config.t_max}")
    sampler = _Sampler(flow, config, stop_on_residual=not fixed_horizon)
    x0 = np.array(problem.x0, dtype=np.float64, copy=True)
    if config.method == IntegrationMethod.ADAPTIVE_RK45:
        reason = _integrate_adaptive(sampler, x0)
    else:
        reason = _integrate_fixed(sampler, _FIXED_UPDATES[config.method], x0)

    if reason == TerminationReason.SAMPLE_CAP:
        logger.warning(f"{problem.name}: sample cap {config.max_samples} reached at t={sampler.times[-1]}")
    logger.info(
        f"{problem.name}: terminated_by={reason.value} at t={sampler.times[-1]:.6g} "
        f"after {len(sampler.times)} samples"
    )
    return Trajectory(
        problem=problem,
        times=np.asarray(sampler.times),
        states=np.vstack(sampler.states),
        velocities=np.vstack(sampler.velocities),
        terminated_by=reason,
        method=config.method.value,
        error_scale=config.error_scale,
    )


def euler_unit_steps(problem: CompositeProblem, k: int) -> np.ndarray:
    """k Euler steps of length 1 from x0, as a (k+1, n) array"""
    if k < 1:
        raise InvalidParameterError(f"k must be a positive integer, got {k!r}")
    config = IntegratorConfig(
        method=IntegrationMethod.EULER, step=1.0, t_max=float(k), stop_residual=0.0, max_samples=k + 1
    )
    traj = integrate(problem, config, fixed_horizon=True)
    return traj.states


def resample(traj: Trajectory, grid: ArrayLike) -> Trajectory:
    """
    Dense output on a new time grid by cubic Hermite interpolation

    States come from the (state, velocity) Hermite interpolant; velocities
    are field values at the interpolated states. Grid points equal to
    stored times reuse the stored samples exactly.
    """
    grid = np.asarray(grid, dtype=np.float64).reshape(-1)
    n = traj.dim
    if grid.size == 0:
        return Trajectory(
            problem=traj.problem,
            times=np.empty(0),
            states=np.empty((0, n)),
            velocities=np.empty((0, n)),
            terminated_by=traj.terminated_by,
            method=traj.method,
            error_scale=traj.error_scale,
        )
    if np.any(np.diff(grid) <= 0):
        raise InvalidParameterError("resampling grid must be strictly increasing")
    if grid[0] < traj.times[0] or grid[-1] > traj.times[-1]:
        raise OutOfRangeError(
            f"grid [{grid[0]}, {grid[-1]}] leaves the trajectory span [{traj.times[0]}, {traj.times[-1]}]"
        )

    idx = np.searchsorted(traj.times, grid)
    idx_clipped = np.minimum(idx, len(traj) - 1)
    exact = traj.times[idx_clipped] == grid

    states = np.empty((grid.size, n))
    velocities = np.empty((grid.size, n))
    states[exact] = traj.states[idx_clipped[exact]]
    velocities[exact] = traj.velocities[idx_clipped[exact]]
    if not np.all(exact):
        spline = CubicHermiteSpline(traj.times, traj.states, traj.velocities, axis=0)
        flow = FlowField(traj.problem)
        interpolated = spline(grid[~exact])
        states[~exact] = interpolated
        velocities[~exact] = np.array([flow(x) for x in interpolated])

    return Trajectory(
        problem=traj.problem,
        times=grid.copy(),
        states=states,
        velocities=velocities,
        terminated_by=traj.terminated_by,
        method=traj.method,
        error_scale=traj.error_scale,
    )


def refined_grid(times: np.ndarray, min_points: int) -> np.ndarray:
    """Subdivide every interval uniformly so the grid has at least min_points points"""
    if times.size < 2:
        return times.copy()
    intervals = times.size - 1
    parts = max(1, math.ceil((min_points - 1) / intervals))
    if parts == 1:
        return times.copy()
    fractions = np.arange(parts) / parts
    inner = times[:-1, None] + fractions[None, :] * np.diff(times)[:, None]
    # fraction 0 reproduces the stored times bit-exactly; unique drops points
    # that collapse onto a neighbour on very short intervals
    return np.unique(np.concatenate([inner.ravel(), times[-1:]]))
