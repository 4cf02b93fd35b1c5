"""
Closed-form proximal operators and smooth terms

Every ProxTerm here has an exact prox map; terms built without one go
through prox_numeric. The grid oracles at the bottom are brute-force
minimizers of the prox subproblem used to cross-check the closed forms.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Tuple, Union

import numpy as np
from numpy.typing import ArrayLike
from scipy.optimize import minimize_scalar

from fbflow.exceptions import ConvergenceFailureError, InvalidParameterError
from fbflow.models.problem import ProxTerm, SmoothTerm
from fbflow.utils.helpers import as_vector

logger = logging.getLogger(__name__)

POWER_ITERATION_TOL = 1e-10
POWER_ITERATION_MAX_ITER = 10_000

PROX_NUMERIC_TOL = 1e-10
PROX_NUMERIC_MAX_ITER = 100_000
_CERTIFICATE_SAMPLES = 64

GRID_STEP_1D = 1e-4
GRID_STEP_2D = 1e-3


# ---------------------------------------------------------------------------
# Proximal maps


def _check_eta(eta: float) -> None:
    if not eta > 0:
        raise InvalidParameterError(f"eta must be positive, got {eta!r}")


def prox_l1(y: ArrayLike, eta: float, weight: float) -> np.ndarray:
    """
    Soft-thresholding: sign(y_i) * max(|y_i| - eta*weight, 0)

    Coordinates sitting exactly on the threshold map to +0.0.
    """
    _check_eta(eta)
    if weight < 0:
        raise InvalidParameterError(f"weight must be nonnegative, got {weight!r}")
    y = as_vector(y, name="y")
    threshold = eta * weight
    magnitude = np.abs(y) - threshold
    return np.where(magnitude > 0, np.sign(y) * magnitude, 0.0)


def prox_indicator_box(y: ArrayLike, eta: float, lo: ArrayLike, hi: ArrayLike) -> np.ndarray:
    """Projection onto [lo, hi]; eta plays no role"""
    _check_eta(eta)
    y = as_vector(y, name="y")
    lo = np.broadcast_to(np.asarray(lo, dtype=np.float64), y.shape)
    hi = np.broadcast_to(np.asarray(hi, dtype=np.float64), y.shape)
    if np.any(lo > hi):
        raise InvalidParameterError("box bounds must satisfy lo <= hi componentwise")
    return np.clip(y, lo, hi)


def prox_l2_squared(y: ArrayLike, eta: float, weight: float) -> np.ndarray:
    """prox of (weight/2)*||u||^2: y / (1 + eta*weight)"""
    _check_eta(eta)
    if not weight > 0:
        raise InvalidParameterError(f"weight must be positive, got {weight!r}")
    y = as_vector(y, name="y")
    return y / (1.0 + eta * weight)


def _retreat_to_domain(h: Callable[[float], float], edge: float, inside: float, tol: float) -> float:
    """Move an infinite-valued bracket edge toward a finite point until h(edge) is finite"""
    if math.isfinite(h(edge)):
        return edge
    outside = edge
    while abs(outside - inside) > tol:
        mid = 0.5 * (outside + inside)
        if math.isfinite(h(mid)):
            inside = mid
        else:
            outside = mid
    return inside


def _minimize_coordinate(h: Callable[[float], float], start: float, radius: float, tol: float) -> float:
    xatol = max(tol, 1e-14)
    for _ in range(64):
        lo = _retreat_to_domain(h, start - radius, start, xatol)
        hi = _retreat_to_domain(h, start + radius, start, xatol)
        if hi - lo <= xatol:
            return 0.5 * (lo + hi)
        res = minimize_scalar(h, bounds=(lo, hi), method="bounded", options={"xatol": xatol})
        best = float(res.x)
        # compare against the edges: the bounded method never evaluates them
        for edge in (lo, hi):
            if h(edge) < h(best):
                best = edge
        near_lo = best - lo <= 10 * xatol and lo == start - radius
        near_hi = hi - best <= 10 * xatol and hi == start + radius
        if not (near_lo or near_hi):
            return best
        # minimizer may lie beyond an edge that is still inside dom f
        start, radius = best, 4.0 * radius
    return best


def prox_numeric(
    f: ProxTerm,
    y: ArrayLike,
    eta: float,
    tol: float = PROX_NUMERIC_TOL,
    max_iter: int = PROX_NUMERIC_MAX_ITER,
) -> np.ndarray:
    """
    Prox of a convex term known only through its values

    Cyclic coordinate minimization of u -> f(u) + ||u - y||^2 / (2 eta),
    which is (1/eta)-strongly convex. The result is certified with the
    subgradient inequality f(u) >= f(p) + <(y - p)/eta, u - p> on seeded
    samples u.
    """
    _check_eta(eta)
    if not tol > 0:
        raise InvalidParameterError(f"tol must be positive, got {tol!r}")
    y = as_vector(y, f.dim, name="y")

    def subproblem(u: np.ndarray) -> float:
        return float(f.evaluate(u)) + float(np.dot(u - y, u - y)) / (2.0 * eta)

    p = y.copy()
    if not math.isfinite(subproblem(p)):
        p = np.zeros_like(y) if f.feasible_point is None else f.feasible_point.copy()
    value = subproblem(p)
    if not math.isfinite(value):
        raise InvalidParameterError(f"no finite starting point for the prox of {f.name}")

    converged = False
    decrease = math.inf
    sweep = 0
    for sweep in range(1, max_iter + 1):
        previous = value
        for i in range(f.dim):

            def h(t: float, i: int = i) -> float:
                trial = p.copy()
                trial[i] = t
                return subproblem(trial)

            radius = max(1.0, 2.0 * abs(y[i] - p[i]))
            p[i] = _minimize_coordinate(h, p[i], radius, tol)
        value = subproblem(p)
        decrease = previous - value
        if sweep >= 2 and decrease <= tol * max(1.0, abs(value)):
            converged = True
            break

    if not converged:
        logger.error(f"prox_numeric did not converge for {f.name}: last decrease {decrease:.3e}")
        raise ConvergenceFailureError("prox_numeric did not converge", residual=decrease, iterations=sweep)

    residual = _subgradient_gap(f, y, p, eta)
    if residual > math.sqrt(tol):
        logger.error(f"prox_numeric certificate failed for {f.name}: gap {residual:.3e}")
        raise ConvergenceFailureError(
            "prox_numeric result fails the subgradient inequality", residual=residual, iterations=sweep
        )
    return p


def _subgradient_gap(f: ProxTerm, y: np.ndarray, p: np.ndarray, eta: float) -> float:
    """Largest normalized violation of f(u) >= f(p) + <(y - p)/eta, u - p>"""
    rng = np.random.default_rng(0)
    s = (y - p) / eta
    fp = float(f.evaluate(p))
    worst = 0.0
    for k in range(_CERTIFICATE_SAMPLES):
        scale = 10.0 ** (k % 4 - 2)
        u = p + scale * rng.standard_normal(p.shape)
        fu = float(f.evaluate(u))
        if math.isinf(fu):
            continue
        gap = fp + float(np.dot(s, u - p)) - fu
        worst = max(worst, gap / (1.0 + float(np.linalg.norm(u - p))))
    return worst


# ---------------------------------------------------------------------------
# ProxTerm factories


def zero_prox(dim: int) -> ProxTerm:
    return ProxTerm(
        dim=dim,
        evaluate=lambda x: 0.0,
        prox_map=lambda y, eta: np.array(y, dtype=np.float64, copy=True),
        name="zero",
    )


def l1_norm(dim: int, weight: float = 1.0) -> ProxTerm:
    """weight * ||x||_1"""
    if weight < 0:
        raise InvalidParameterError(f"weight must be nonnegative, got {weight!r}")
    return ProxTerm(
        dim=dim,
        evaluate=lambda x: weight * float(np.sum(np.abs(x))),
        prox_map=lambda y, eta: prox_l1(y, eta, weight),
        name=f"l1(weight={weight:g})",
    )


def box_indicator(lo: ArrayLike, hi: ArrayLike) -> ProxTerm:
    """Indicator of the box [lo, hi]; infinite bounds are allowed"""
    lo = as_vector(lo, name="lo")
    hi = as_vector(hi, lo.shape[0], name="hi")
    if np.any(lo > hi):
        raise InvalidParameterError("box bounds must satisfy lo <= hi componentwise")
    lo.setflags(write=False)
    hi.setflags(write=False)

    def evaluate(x: np.ndarray) -> float:
        return 0.0 if bool(np.all((x >= lo) & (x <= hi))) else math.inf

    return ProxTerm(
        dim=lo.shape[0],
        evaluate=evaluate,
        prox_map=lambda y, eta: prox_indicator_box(y, eta, lo, hi),
        name="box",
        feasible_point=np.clip(np.zeros_like(lo), lo, hi),
    )


def squared_l2(dim: int, weight: float = 1.0) -> ProxTerm:
    """(weight/2) * ||x||^2"""
    if not weight > 0:
        raise InvalidParameterError(f"weight must be positive, got {weight!r}")
    return ProxTerm(
        dim=dim,
        evaluate=lambda x: 0.5 * weight * float(np.dot(x, x)),
        prox_map=lambda y, eta: prox_l2_squared(y, eta, weight),
        name=f"l2_squared(weight={weight:g})",
    )


def without_closed_form(term: ProxTerm) -> ProxTerm:
    """Same function, prox routed through prox_numeric"""
    return ProxTerm(
        dim=term.dim,
        evaluate=term.evaluate,
        prox_map=None,
        name=f"{term.name}[numeric]",
        feasible_point=term.feasible_point,
    )


# ---------------------------------------------------------------------------
# Smooth terms


def spectral_norm(
    A: ArrayLike, tol: float = POWER_ITERATION_TOL, max_iter: int = POWER_ITERATION_MAX_ITER
) -> float:
    """
    ||A||_2 by power iteration on G = A^T A

    Stops on the eigen-residual ||Gv - mu v|| <= tol * mu of the Rayleigh
    quotient mu and returns sqrt(mu + residual), so the estimate does not
    fall below the norm by more than the tolerance. A spectral gap too
    small for max_iter iterations falls back to the SVD norm.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.size == 0 or not np.any(A):
        return 0.0
    gram = A.T @ A
    v = np.random.default_rng(0).standard_normal(gram.shape[0])
    v /= np.linalg.norm(v)
    for _ in range(max_iter):
        w = gram @ v
        mu = float(v @ w)
        if mu <= 0.0:
            break
        residual = float(np.linalg.norm(w - mu * v))
        if residual <= tol * mu:
            return math.sqrt(mu + residual)
        v = w / np.linalg.norm(w)
    logger.warning(f"Power iteration did not reach tol={tol} in {max_iter} iterations; using the SVD norm")
    return float(np.linalg.norm(A, 2))


def _as_symmetric(M: ArrayLike, name: str) -> np.ndarray:
    M = np.atleast_2d(np.asarray(M, dtype=np.float64))
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise InvalidParameterError(f"{name} must be a square matrix, got shape {M.shape}")
    scale = max(1.0, float(np.max(np.abs(M))))
    if not np.allclose(M, M.T, rtol=0.0, atol=1e-12 * scale):
        raise InvalidParameterError(f"{name} must be symmetric")
    M = 0.5 * (M + M.T)
    M.setflags(write=False)
    return M


def smooth_zero(dim: int) -> SmoothTerm:
    return SmoothTerm(
        dim=dim,
        evaluate=lambda x: 0.0,
        gradient=lambda x: np.zeros_like(x),
        lipschitz_beta=0.0,
        name="zero",
        convex=True,
    )


def smooth_quadratic(A: ArrayLike, b: Optional[ArrayLike] = None, c: float = 0.0) -> SmoothTerm:
    """g(x) = 1/2 x^T A x + b^T x + c with beta = ||A||_2"""
    A = _as_symmetric(A, "A")
    dim = A.shape[0]
    b = np.zeros(dim) if b is None else as_vector(b, dim, name="b")
    b.setflags(write=False)
    convex = bool(np.linalg.eigvalsh(A).min() >= -1e-12 * max(1.0, float(np.max(np.abs(A)))))
    return SmoothTerm(
        dim=dim,
        evaluate=lambda x: 0.5 * float(x @ A @ x) + float(b @ x) + c,
        gradient=lambda x: A @ x + b,
        lipschitz_beta=spectral_norm(A),
        name="quadratic",
        convex=convex,
    )


def smooth_nonconvex_cosine(a: float, Q: ArrayLike) -> SmoothTerm:
    """g(x) = 1/2 x^T Q x + a * sum_i cos(x_i) with beta = ||Q||_2 + a"""
    if not a > 0:
        raise InvalidParameterError(f"a must be positive, got {a!r}")
    Q = _as_symmetric(Q, "Q")
    if np.linalg.eigvalsh(Q).min() < -1e-12 * max(1.0, float(np.max(np.abs(Q)))):
        raise InvalidParameterError("Q must be positive semidefinite")
    return SmoothTerm(
        dim=Q.shape[0],
        evaluate=lambda x: 0.5 * float(x @ Q @ x) + a * float(np.sum(np.cos(x))),
        gradient=lambda x: Q @ x - a * np.sin(x),
        lipschitz_beta=spectral_norm(Q) + a,
        name=f"cosine(a={a:g})",
        convex=False,
    )


def smooth_quartic(dim: int, radius: float = 1.0) -> SmoothTerm:
    """
    g(x) = 1/4 * sum_i x_i^4

    The gradient x^3 is only Lipschitz on bounded sets; beta = 3*radius^2
    holds on [-radius, radius]^dim, so pair this with a box indicator f.
    """
    if not radius > 0:
        raise InvalidParameterError(f"radius must be positive, got {radius!r}")
    return SmoothTerm(
        dim=dim,
        evaluate=lambda x: 0.25 * float(np.sum(x**4)),
        gradient=lambda x: x**3,
        lipschitz_beta=3.0 * radius**2,
        name=f"quartic(radius={radius:g})",
        convex=True,
        sample_box=(-radius, radius),
    )


# ---------------------------------------------------------------------------
# Sampling checks


def _sample_points(rng: np.random.Generator, dim: int, box: Optional[Tuple[float, float]], count: int):
    if box is None:
        scales = 10.0 ** rng.uniform(-2, 1, size=(count, 1))
        return scales * rng.standard_normal((count, dim))
    return rng.uniform(box[0], box[1], size=(count, dim))


def check_gradient_lipschitz(
    term: SmoothTerm, pairs: int = 1000, rng: Optional[np.random.Generator] = None, rel_slack: float = 1e-10
) -> float:
    """
    Largest ratio ||grad(x) - grad(y)|| / (beta * ||x - y||) over random pairs

    A result above 1 + rel_slack means the claimed beta is violated.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    xs = _sample_points(rng, term.dim, term.sample_box, pairs)
    ys = _sample_points(rng, term.dim, term.sample_box, pairs)
    worst = 0.0
    for x, y in zip(xs, ys):
        dist = float(np.linalg.norm(x - y))
        if dist == 0.0:
            continue
        diff = float(np.linalg.norm(term.grad(x) - term.grad(y)))
        if term.lipschitz_beta == 0.0:
            worst = max(worst, 0.0 if diff == 0.0 else math.inf)
        else:
            worst = max(worst, diff / (term.lipschitz_beta * dist))
    return worst


def check_prox_firm_nonexpansive(
    term: ProxTerm, eta: float, pairs: int = 10_000, rng: Optional[np.random.Generator] = None
) -> float:
    """
    Largest value of ||p1 - p2||^2 - <p1 - p2, y1 - y2>, normalized by ||y1 - y2||^2

    Firm nonexpansiveness means the result is <= 0 up to rounding.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    worst = -math.inf
    for _ in range(pairs):
        y1 = 3.0 * rng.standard_normal(term.dim)
        y2 = 3.0 * rng.standard_normal(term.dim)
        p1, p2 = term.prox(y1, eta), term.prox(y2, eta)
        dp = p1 - p2
        denom = max(float(np.dot(y1 - y2, y1 - y2)), np.finfo(float).tiny)
        worst = max(worst, (float(np.dot(dp, dp)) - float(np.dot(dp, y1 - y2))) / denom)
    return worst


def subgradient_inequality_gap(
    term: ProxTerm, y: ArrayLike, eta: float, samples: int = 1000, rng: Optional[np.random.Generator] = None
) -> float:
    """
    Largest violation of f(u) >= f(p) + <(y - p)/eta, u - p> with p = prox(y, eta)
    """
    rng = np.random.default_rng(0) if rng is None else rng
    y = as_vector(y, term.dim, name="y")
    p = term.prox(y, eta)
    s = (y - p) / eta
    fp = term(p)
    worst = -math.inf
    for _ in range(samples):
        u = p + 2.0 * rng.standard_normal(term.dim)
        fu = term(u)
        if math.isinf(fu):
            continue
        worst = max(worst, fp + float(np.dot(s, u - p)) - fu)
    return worst


# ---------------------------------------------------------------------------
# Brute-force oracles


def grid_prox_1d(
    term: ProxTerm, y: Union[float, ArrayLike], eta: float, domain: Tuple[float, float], step: float = GRID_STEP_1D
) -> Union[float, np.ndarray]:
    """
    Minimize f(u) + (u - y)^2/(2 eta) over a uniform grid on domain

    f is evaluated on the grid once; an array of y values gives an array of
    minimizers.
    """
    ys = np.atleast_1d(np.asarray(y, dtype=np.float64)).reshape(-1)
    grid = np.arange(domain[0], domain[1] + 0.5 * step, step)
    fvals = np.array([term.evaluate(np.array([u])) for u in grid])
    best = np.array([grid[int(np.argmin(fvals + (grid - yi) ** 2 / (2.0 * eta)))] for yi in ys])
    return float(best[0]) if np.ndim(y) == 0 else best


def grid_prox_2d(
    term: ProxTerm, y: ArrayLike, eta: float, domain: Tuple[float, float], step: float = GRID_STEP_2D
) -> np.ndarray:
    """
    2-D grid oracle: a coarse grid of spacing 50*step on the whole domain,
    then windows of spacing 5*step and step around the running minimizer

    y of shape (m, 2) gives an (m, 2) array. Each refinement only moves one
    coarse cell, which is exact for separable f.
    """
    ys = np.asarray(y, dtype=np.float64)
    batch = ys.reshape(-1, 2)

    def grid_points(axis_x: np.ndarray, axis_y: np.ndarray) -> np.ndarray:
        U, V = np.meshgrid(axis_x, axis_y, indexing="ij")
        return np.stack([U.ravel(), V.ravel()], axis=1)

    def best_on(points: np.ndarray, fvals: np.ndarray, target: np.ndarray) -> np.ndarray:
        values = fvals + np.sum((points - target) ** 2, axis=1) / (2.0 * eta)
        return points[int(np.argmin(values))]

    def window(center: np.ndarray, half: float, spacing: float) -> np.ndarray:
        axes = [
            np.arange(max(domain[0], c - half), min(domain[1], c + half) + 0.5 * spacing, spacing) for c in center
        ]
        return grid_points(axes[0], axes[1])

    coarse_step = 50 * step
    axis = np.arange(domain[0], domain[1] + 0.5 * coarse_step, coarse_step)
    coarse = grid_points(axis, axis)
    coarse_values = np.array([term.evaluate(pt) for pt in coarse])

    result = np.empty_like(batch)
    for i, target in enumerate(batch):
        center = best_on(coarse, coarse_values, target)
        for half, spacing in ((coarse_step, 5 * step), (5 * step, step)):
            points = window(center, half, spacing)
            center = best_on(points, np.array([term.evaluate(pt) for pt in points]), target)
        result[i] = center
    return result[0] if ys.ndim == 1 else result


# ---------------------------------------------------------------------------
# Name registry


@dataclass(frozen=True)
class CatalogEntry:
    """A catalog term factory with the box used by its brute-force oracle"""

    factory: Callable[..., Union[ProxTerm, SmoothTerm]]
    oracle_domain: Tuple[float, float]
    description: str


PROX_CATALOG: Dict[str, CatalogEntry] = {
    "zero": CatalogEntry(zero_prox, (-4.0, 4.0), "f = 0, prox is the identity"),
    "l1": CatalogEntry(l1_norm, (-4.0, 4.0), "weighted l1 norm, prox is soft-thresholding"),
    "box": CatalogEntry(box_indicator, (-4.0, 4.0), "indicator of a box, prox is a clamp"),
    "l2_squared": CatalogEntry(squared_l2, (-4.0, 4.0), "(weight/2)||x||^2, prox is a shrink"),
}

SMOOTH_CATALOG: Dict[str, CatalogEntry] = {
    "zero": CatalogEntry(smooth_zero, (-4.0, 4.0), "g = 0"),
    "quadratic": CatalogEntry(smooth_quadratic, (-4.0, 4.0), "1/2 x^T A x + b^T x"),
    "cosine": CatalogEntry(smooth_nonconvex_cosine, (-4.0, 4.0), "1/2 x^T Q x + a sum cos(x_i)"),
    "quartic": CatalogEntry(smooth_quartic, (-1.0, 1.0), "1/4 sum x_i^4 on a box"),
}
