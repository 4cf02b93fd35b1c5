"""
軌道の事後解析 (エネルギー散逸, 速度減衰, 軌道長, 収束率) のテスト
"""

import math

import numpy as np
import pytest

from fbflow.core.analysis import (
    analysis_trace_rows,
    check_subgradient_bound,
    classify_theta,
    energy_trace,
    fit_rate,
    limit_report,
    tail_length,
    velocity_decay,
)
from fbflow.core.dynamics import criticality_residual, fb_solve
from fbflow.core.integrator import TerminationReason, Trajectory, integrate, refined_grid, resample
from fbflow.core.prox_catalog import (
    box_indicator,
    l1_norm,
    smooth_nonconvex_cosine,
    smooth_quadratic,
    smooth_quartic,
    zero_prox,
)
from fbflow.exceptions import DegenerateWindowError, ProblemMismatchError
from fbflow.models.problem import CompositeProblem, objective
from fbflow.models.run_config import IntegrationMethod, IntegratorConfig, Regime

ETA = 0.1


@pytest.fixture(scope="module")
def linear_run():
    """f = 0, g = 1/2 x^2, eta = 0.1, x0 = 1 on [0, 50] with rk4"""
    problem = CompositeProblem(f=zero_prox(1), g=smooth_quadratic(np.eye(1)), eta=ETA, x0=[1.0])
    config = IntegratorConfig(method=IntegrationMethod.RK4, step=0.01, t_max=50.0, stop_residual=0.0)
    return problem, integrate(problem, config)


@pytest.fixture(scope="module")
def lasso_run():
    problem = CompositeProblem.build(
        l1_norm(3, 0.5),
        smooth_quadratic([[3.0, 1.0, 0.0], [1.0, 2.0, 0.5], [0.0, 0.5, 1.0]], [-2.0, 1.0, -0.5]),
        [1.0, 1.0, 1.0],
        coercive=True,
    )
    return problem, integrate(problem, IntegratorConfig(stop_residual=1e-9, t_max=1e4))


@pytest.fixture(scope="module")
def quadratic_run():
    problem = CompositeProblem.build(
        zero_prox(2),
        smooth_quadratic(np.diag([1.0, 2.0]), [-1.0, 2.0]),
        [3.0, 2.0],
        coercive=True,
        known_minimizer=[1.0, -1.0],
    )
    return problem, integrate(problem)


def test_linear_energy_follows_closed_form(linear_run):
    """H(t) = H(0) e^{-2 eta t}"""
    problem, traj = linear_run
    trace = energy_trace(problem, traj)
    expected = trace.H[0] * np.exp(-2.0 * ETA * traj.times)
    np.testing.assert_allclose(trace.H, expected, atol=1e-6)
    assert trace.nonincreasing
    assert trace.violations == []
    assert trace.dissipation_constant == pytest.approx(1.0 / ETA - 1.0 * (3.0 + ETA))
    assert np.all(trace.dissipated >= 0.0)


def test_stationary_trajectory_has_no_dissipation():
    problem = CompositeProblem(f=zero_prox(2), g=smooth_quadratic(np.eye(2), [-1.0, 2.0]), eta=0.2, x0=[1.0, -2.0])
    traj = integrate(problem)
    assert len(traj) == 1
    trace = energy_trace(problem, traj)
    assert trace.violations == []
    assert trace.dissipated.size == 0
    decay = velocity_decay(traj)
    np.testing.assert_array_equal(decay.sup_tail, [0.0])
    tail = tail_length(traj)
    np.testing.assert_array_equal(tail.sigma, [0.0])
    rate = fit_rate(problem, traj, [1.0, -2.0])
    assert rate.regime == Regime.FINITE_TIME


def test_lasso_energy_and_subgradient_bound(lasso_run):
    problem, traj = lasso_run
    trace = energy_trace(problem, traj)
    assert trace.violations == []
    assert check_subgradient_bound(problem, traj) == []
    report = trace.report(problem)
    assert report.final_energy <= report.initial_energy
    assert report.objective_along_flow == pytest.approx(objective(problem, traj.final_state), abs=1e-8)


def test_energy_violation_is_recorded_not_raised(linear_run):
    """スラックを負にすると違反が記録される (例外にはならない)"""
    problem, traj = linear_run
    trace = energy_trace(problem, traj, slack=-50.0)
    assert not trace.nonincreasing
    assert len(trace.violations) > 0
    t, excess = trace.violations[0]
    assert excess > 0.0


def test_velocity_decay_linear_problem(linear_run):
    """||xdot(t)|| = eta e^{-eta t}, L2 質量 = eta/2 (1 - e^{-2 eta T})"""
    _, traj = linear_run
    decay = velocity_decay(traj)
    np.testing.assert_allclose(decay.speeds, ETA * np.exp(-ETA * traj.times), rtol=1e-8)
    expected_l2 = 0.5 * ETA * (1.0 - math.exp(-2.0 * ETA * traj.final_time))
    assert decay.l2_tail[0] == pytest.approx(expected_l2, rel=1e-6)
    assert decay.monotone
    report = decay.report()
    assert report.l2_total == pytest.approx(expected_l2, rel=1e-6)


def test_velocity_decay_converged_run(lasso_run):
    _, traj = lasso_run
    decay = velocity_decay(traj)
    assert decay.monotone
    assert decay.sup_tail[-1] <= 1e-9


def test_velocity_tails_stay_monotone_when_speed_rises():
    """速度が増加する区間があっても裾の上限と L2 質量は単調; 判定は最終上限で行う"""
    problem = CompositeProblem(f=zero_prox(1), g=smooth_quadratic(np.eye(1)), eta=ETA, x0=[1.0])
    states = np.array([[1.0], [2.0], [3.0], [0.5]])
    traj = Trajectory(
        problem=problem,
        times=np.array([0.0, 1.0, 2.0, 3.0]),
        states=states,
        velocities=-ETA * states,
        terminated_by=TerminationReason.T_MAX,
        method="rk4",
        error_scale=1e-8,
    )
    decay = velocity_decay(traj, min_points=2)
    assert np.any(np.diff(decay.speeds) > 0)
    np.testing.assert_allclose(decay.sup_tail, [0.3, 0.3, 0.3, 0.05])
    assert decay.monotone
    assert decay.l2_tail[-1] == 0.0
    assert decay.report().final_sup == pytest.approx(0.05)


def test_tail_length_linear_problem(linear_run):
    """sigma(t) = |x0| (e^{-eta t} - e^{-eta T})"""
    _, traj = linear_run
    tail = tail_length(traj)
    expected = np.exp(-ETA * traj.times) - math.exp(-ETA * traj.final_time)
    np.testing.assert_allclose(tail.sigma, expected, atol=1e-6)
    assert tail.violations == []
    assert tail.total_length == pytest.approx(1.0 - math.exp(-5.0), abs=1e-6)


def test_tail_length_bounds_displacement(lasso_run):
    _, traj = lasso_run
    tail = tail_length(traj)
    assert tail.violations == []
    assert tail.sigma[0] + tail.slack[0] >= np.linalg.norm(traj.states[0] - traj.final_state)
    assert tail.report().max_violation == 0.0


def test_limit_of_strongly_convex_quadratic():
    """f=0, g 強凸: 極限は -A^{-1} b"""
    A = np.diag([1.0, 2.0])
    b = np.array([-1.0, 2.0])
    problem = CompositeProblem.build(zero_prox(2), smooth_quadratic(A, b), [3.0, 2.0], coercive=True)
    traj = integrate(problem, IntegratorConfig(stop_residual=1e-12))
    report = limit_report(problem, traj)
    np.testing.assert_allclose(report.final_state, -np.linalg.solve(A, b), atol=1e-8)
    assert report.is_critical
    assert report.sublevel_bound_holds
    assert report.terminal_energy_bound == pytest.approx(report.residual**2 / (2.0 * problem.eta))


def test_lasso_limit_matches_discrete_oracle(lasso_run):
    problem, traj = lasso_run
    x_oracle, _, _ = fb_solve(problem, problem.x0, tol=1e-13)
    report = limit_report(problem, traj)
    assert report.residual <= 1e-9
    assert report.objective == pytest.approx(objective(problem, x_oracle), abs=1e-8)


def test_terminal_energy_gap_vanishes_at_residual_stop(lasso_run, quadratic_run):
    """残差停止時の H(xdot + x, x) と (f + g)(x) の差は許容幅に収まる"""
    for problem, traj in (lasso_run, quadratic_run):
        assert traj.terminated_by == "residual"
        report = limit_report(problem, traj)
        assert abs(report.energy_gap) <= report.energy_gap_allowance, problem.name
        assert abs(report.energy_gap) <= 1e-8, problem.name


def test_nonconvex_limits_are_critical():
    """非凸 (cos + 二次) 問題: 二つの初期点からの極限はともに臨界点"""
    for x0 in ([2.5, -1.0], [-4.0, 3.0]):
        problem = CompositeProblem.build(
            l1_norm(2, 0.1), smooth_nonconvex_cosine(1.0, 0.5 * np.eye(2)), x0, coercive=True
        )
        traj = integrate(problem)
        report = limit_report(problem, traj)
        assert report.residual < 1e-8
        assert criticality_residual(problem, traj.final_state) < 1e-8
        assert report.sublevel_bound_holds


def test_problem_mismatch_is_rejected(linear_run):
    _, traj = linear_run
    other = CompositeProblem(f=zero_prox(1), g=smooth_quadratic(np.eye(1)), eta=ETA, x0=[1.0])
    with pytest.raises(ProblemMismatchError):
        energy_trace(other, traj)
    with pytest.raises(ProblemMismatchError):
        limit_report(other, traj)


@pytest.mark.parametrize(
    "theta, settled, regime",
    [
        (0.3, True, Regime.FINITE_TIME),
        (0.3, False, Regime.INCONCLUSIVE_FINITE_OR_EXPONENTIAL),
        (0.45, False, Regime.EXPONENTIAL),
        (0.5, False, Regime.EXPONENTIAL),
        (0.55, False, Regime.EXPONENTIAL),
        (0.75, False, Regime.POLYNOMIAL),
    ],
)
def test_classify_theta(theta, settled, regime):
    assert classify_theta(theta, settled) == regime


def test_quadratic_rate_is_exponential(quadratic_run):
    """二次関数の Lojasiewicz 指数は 1/2"""
    problem, traj = quadratic_run
    rate = fit_rate(problem, traj, problem.known_minimizer)
    assert rate.regime == Regime.EXPONENTIAL
    assert 0.45 <= rate.theta <= 0.55
    assert rate.r_squared > 0.99
    assert rate.fit_constants[1] > 0.0
    assert rate.window_size >= 5


def test_lasso_rate_is_exponential(lasso_run):
    """g が強凸な lasso は指数収束"""
    problem, traj = lasso_run
    rate = fit_rate(problem, traj, traj.final_state)
    assert rate.regime == Regime.EXPONENTIAL
    assert 0.45 <= rate.theta <= 0.55


def test_rate_is_stable_under_resampling(quadratic_run):
    """2 倍の密度で再標本化しても regime は同じで theta の差は 0.02 以内"""
    problem, traj = quadratic_run
    dense = resample(traj, refined_grid(traj.times, 2 * len(traj) - 1))
    coarse_rate = fit_rate(problem, traj, problem.known_minimizer)
    dense_rate = fit_rate(problem, dense, problem.known_minimizer)
    assert dense_rate.regime == coarse_rate.regime == Regime.EXPONENTIAL
    assert abs(dense_rate.theta - coarse_rate.theta) <= 0.02


def test_fit_window_stops_above_rounding_floor_for_zero_limit():
    problem = CompositeProblem(f=zero_prox(1), g=smooth_quadratic(np.eye(1)), eta=ETA, x0=[1.0])
    config = IntegratorConfig(method=IntegrationMethod.RK4, step=0.5, t_max=400.0, stop_residual=0.0)
    traj = integrate(problem, config)
    assert abs(traj.final_state[0]) < 1e-16
    rate = fit_rate(problem, traj, [0.0])
    assert rate.regime == Regime.EXPONENTIAL
    last = int(np.searchsorted(traj.times, rate.fit_window[1]))
    assert abs(traj.states[last, 0]) > 100.0 * np.finfo(np.float64).eps
    assert rate.fit_window[1] < traj.final_time


@pytest.mark.slow
def test_quartic_rate_is_polynomial():
    """x^4/4 (箱制約付き): theta = 3/4, 距離は t^{-1/2} で減衰"""
    problem = CompositeProblem.build(
        box_indicator([-1.0], [1.0]), smooth_quartic(1, 1.0), [0.8], coercive=True, known_minimizer=[0.0]
    )
    config = IntegratorConfig(abs_tol=1e-12, rel_tol=1e-9, t_max=1e10, stop_residual=1e-13)
    traj = integrate(problem, config)
    rate = fit_rate(problem, traj, [0.0])
    assert rate.regime == Regime.POLYNOMIAL
    assert 0.70 <= rate.theta <= 0.80
    exponent = -(1.0 - 0.75) / (2.0 * 0.75 - 1.0)
    assert abs(rate.power_exponent - exponent) <= 0.1
    assert energy_trace(problem, traj).violations == []


def test_exact_zero_velocity_is_finite_time():
    """速度がちょうど 0 になる場合は finite_time と判定する"""
    problem = CompositeProblem(
        f=box_indicator([0.0], [math.inf]), g=smooth_quadratic([[0.0]], [1.0]), eta=0.5, x0=[10.0]
    )
    config = IntegratorConfig(method=IntegrationMethod.EULER, step=1.0, t_max=100.0, stop_residual=0.0)
    traj = integrate(problem, config)
    assert traj.final_state[0] == 0.0
    rate = fit_rate(problem, traj, [0.0])
    assert rate.regime == Regime.FINITE_TIME
    assert rate.settle_time == pytest.approx(traj.final_time)


def test_insufficient_decay_is_inconclusive():
    problem = CompositeProblem(f=zero_prox(1), g=smooth_quadratic(np.eye(1)), eta=ETA, x0=[1.0])
    traj = integrate(problem, IntegratorConfig(method=IntegrationMethod.RK4, step=0.1, t_max=1.0, stop_residual=0.0))
    rate = fit_rate(problem, traj, [0.0])
    assert rate.regime == Regime.INCONCLUSIVE
    assert rate.theta is None


def test_short_window_raises():
    problem = CompositeProblem(f=zero_prox(1), g=smooth_quadratic(np.eye(1)), eta=ETA, x0=[1e-4])
    config = IntegratorConfig(method=IntegrationMethod.RK4, step=0.01, t_max=0.03, stop_residual=0.0)
    traj = integrate(problem, config)
    with pytest.raises(DegenerateWindowError):
        fit_rate(problem, traj, [0.0])


def test_trace_rows(linear_run):
    problem, traj = linear_run
    trace = energy_trace(problem, traj)
    tail = tail_length(traj)
    rows = analysis_trace_rows(problem, traj, trace, tail, [0.0])
    assert len(rows) == len(traj)
    t, H, speed, z_norm, sigma, dist = rows[10]
    assert t == traj.times[10]
    assert speed == pytest.approx(ETA * math.exp(-ETA * t), rel=1e-8)
    assert z_norm <= (1.0 + 1.0 / ETA) * speed * (1 + 1e-12)
    assert dist == pytest.approx(math.exp(-ETA * t), rel=1e-8)
    assert sigma == tail.sigma[10]
