"""
Flow field of the implicit forward-backward system

    xdot(t) + x(t) = prox_{eta f}(x(t) - eta * grad g(x(t)))

rewritten as xdot = F(x) with F = prox o (id - eta grad g) - id, a
(2 + eta*beta)-Lipschitz map. Zeros of F are exactly the critical points
of f + g.
"""

import logging
import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from numpy.typing import ArrayLike

from fbflow.exceptions import ConvergenceFailureError, InvalidParameterError
from fbflow.models.problem import CompositeProblem, objective
from fbflow.utils.helpers import as_vector

logger = logging.getLogger(__name__)

CRITICALITY_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class FlowField:
    """Callable xdot = F(x) bound to a problem"""

    problem: CompositeProblem

    @property
    def lipschitz_bound(self) -> float:
        return 2.0 + self.problem.eta * self.problem.beta

    def forward_backward(self, x: np.ndarray) -> np.ndarray:
        """prox_{eta f}(x - eta * grad g(x))"""
        p = self.problem
        return p.f.prox(x - p.eta * p.g.grad(x), p.eta)

    def __call__(self, x: ArrayLike) -> np.ndarray:
        x = as_vector(x, self.problem.dim)
        return self.forward_backward(x) - x


@dataclass(frozen=True)
class EnergySample:
    """H evaluated at (u, v) = (xdot + x, x)"""

    t: float
    u: np.ndarray
    v: np.ndarray
    H: float
    subgrad_norm_bound: float


@dataclass(frozen=True)
class SubgradientWitness:
    """z = (grad g(xdot + x) - grad g(x), -xdot/eta), an element of dH(xdot + x, x)"""

    z1: np.ndarray
    z2: np.ndarray
    norm: float
    velocity_norm: float
    bound: float

    @property
    def within_bound(self) -> bool:
        return self.norm <= self.bound * (1.0 + 1e-12) + 1e-300


def field(problem: CompositeProblem, x: ArrayLike) -> np.ndarray:
    """xdot at state x"""
    return FlowField(problem)(x)


def criticality_residual(problem: CompositeProblem, x: ArrayLike) -> float:
    """||F(x)||; zero exactly at critical points of f + g"""
    return float(np.linalg.norm(field(problem, x)))


def is_critical(problem: CompositeProblem, x: ArrayLike, tol: float = CRITICALITY_TOL) -> bool:
    return criticality_residual(problem, x) <= tol


def energy(problem: CompositeProblem, u: ArrayLike, v: ArrayLike) -> float:
    """H(u, v) = (f + g)(u) + ||u - v||^2 / (2 eta)"""
    u = as_vector(u, problem.dim, name="u")
    v = as_vector(v, problem.dim, name="v")
    value = objective(problem, u)
    if math.isinf(value):
        return value
    diff = u - v
    return value + float(np.dot(diff, diff)) / (2.0 * problem.eta)


def energy_sample(problem: CompositeProblem, t: float, x: ArrayLike, xdot: ArrayLike) -> EnergySample:
    x = as_vector(x, problem.dim)
    xdot = as_vector(xdot, problem.dim, name="xdot")
    u = xdot + x
    return EnergySample(
        t=float(t),
        u=u,
        v=x,
        H=energy(problem, u, x),
        subgrad_norm_bound=(problem.beta + 1.0 / problem.eta) * float(np.linalg.norm(xdot)),
    )


def subgradient_witness(problem: CompositeProblem, x: ArrayLike) -> SubgradientWitness:
    x = as_vector(x, problem.dim)
    xdot = field(problem, x)
    z1 = problem.g.grad(xdot + x) - problem.g.grad(x)
    z2 = -xdot / problem.eta
    velocity_norm = float(np.linalg.norm(xdot))
    return SubgradientWitness(
        z1=z1,
        z2=z2,
        norm=float(np.sqrt(np.dot(z1, z1) + np.dot(z2, z2))),
        velocity_norm=velocity_norm,
        bound=(problem.beta + 1.0 / problem.eta) * velocity_norm,
    )


def fb_step(problem: CompositeProblem, x: np.ndarray) -> np.ndarray:
    """One forward-backward step, written as x + F(x) so it matches a unit Euler step"""
    return x + field(problem, x)


def fb_iterate(problem: CompositeProblem, x: ArrayLike, k: int) -> np.ndarray:
    """x_{k+1} = prox_{eta f}(x_k - eta grad g(x_k)), applied k times"""
    if k < 1:
        raise InvalidParameterError(f"k must be a positive integer, got {k!r}")
    x = as_vector(x, problem.dim)
    for _ in range(k):
        x = fb_step(problem, x)
    return x


def fb_sequence(problem: CompositeProblem, x: ArrayLike, k: int) -> np.ndarray:
    """All iterates x_0 .. x_k as a (k+1, n) array"""
    if k < 1:
        raise InvalidParameterError(f"k must be a positive integer, got {k!r}")
    x = as_vector(x, problem.dim)
    out = np.empty((k + 1, problem.dim))
    out[0] = x
    for i in range(1, k + 1):
        x = fb_step(problem, x)
        out[i] = x
    return out


def fb_solve(
    problem: CompositeProblem, x: ArrayLike, tol: float = 1e-14, max_iter: int = 1_000_000
) -> Tuple[np.ndarray, int, float]:
    """
    Iterate the discrete map until ||F(x)|| <= tol

    Returns (x, iterations, residual). Used as the high-precision reference
    for limits of the continuous flow.
    """
    x = as_vector(x, problem.dim)
    residual = math.inf
    for k in range(max_iter + 1):
        step = field(problem, x)
        residual = float(np.linalg.norm(step))
        if residual <= tol:
            return x, k, residual
        x = x + step
    logger.error(f"Discrete forward-backward did not reach tol={tol} on {problem.name}")
    raise ConvergenceFailureError("forward-backward iteration did not converge", residual, max_iter)


def check_field_lipschitz(
    problem: CompositeProblem, pairs: int = 10_000, rng: np.random.Generator = None, scale: float = 3.0
) -> float:
    """Largest ||F(x1) - F(x2)|| / ((2 + eta beta) ||x1 - x2||) over random pairs"""
    rng = np.random.default_rng(0) if rng is None else rng
    flow = FlowField(problem)
    box = problem.g.sample_box
    worst = 0.0
    for _ in range(pairs):
        if box is None:
            x1 = problem.x0 + scale * rng.standard_normal(problem.dim)
            x2 = problem.x0 + scale * rng.standard_normal(problem.dim)
        else:
            x1 = rng.uniform(box[0], box[1], problem.dim)
            x2 = rng.uniform(box[0], box[1], problem.dim)
        dist = float(np.linalg.norm(x1 - x2))
        if dist == 0.0:
            continue
        worst = max(worst, float(np.linalg.norm(flow(x1) - flow(x2))) / (flow.lipschitz_bound * dist))
    return worst
