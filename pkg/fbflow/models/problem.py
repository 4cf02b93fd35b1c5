"""
Composite problems min f(x) + g(x)

f is proper, convex and lower semicontinuous and is accessed through its
proximal map; g is smooth with a beta-Lipschitz gradient.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple, Union

import numpy as np
from numpy.typing import ArrayLike

from fbflow.exceptions import DimensionMismatchError, InvalidParameterError
from fbflow.utils.helpers import as_vector, frozen_copy

logger = logging.getLogger(__name__)

# Positive root of s^2 + 3s - 1 = 0 where s = eta * beta, written without cancellation
_STEP_PRODUCT_ROOT = 2.0 / (3.0 + math.sqrt(13.0))

AUTO_ETA_FACTOR = 0.9

# largest fixed-point residual accepted for a declared known_minimizer
KNOWN_MINIMIZER_TOL = 1e-8


def validate_step(eta: float, beta: float) -> bool:
    """
    Check the step condition eta*beta*(3 + eta*beta) < 1

    Raises InvalidParameterError for a nonpositive eta or a negative beta.
    """
    if not math.isfinite(eta) or eta <= 0:
        raise InvalidParameterError(f"eta must be a positive finite number, got {eta!r}")
    if not math.isfinite(beta) or beta < 0:
        raise InvalidParameterError(f"beta must be a nonnegative finite number, got {beta!r}")
    return eta * beta * (3.0 + eta * beta) < 1.0


def max_valid_eta(beta: float) -> float:
    """
    Unique positive root of eta*beta*(3 + eta*beta) = 1

    Returns math.inf when beta == 0 (every positive eta is admissible).
    """
    if not math.isfinite(beta) or beta < 0:
        raise InvalidParameterError(f"beta must be a nonnegative finite number, got {beta!r}")
    if beta == 0:
        return math.inf
    return _STEP_PRODUCT_ROOT / beta


def resolve_eta(eta: Union[float, str], beta: float) -> float:
    """Resolve "auto" to 0.9 * max_valid_eta(beta), with eta = 1 when beta == 0"""
    if isinstance(eta, str):
        if eta != "auto":
            raise InvalidParameterError(f"eta must be a number or 'auto', got {eta!r}")
        limit = max_valid_eta(beta)
        return 1.0 if math.isinf(limit) else AUTO_ETA_FACTOR * limit
    return float(eta)


@dataclass(frozen=True, eq=False)
class ProxTerm:
    """Convex nonsmooth term f with evaluation and proximal map"""

    dim: int
    evaluate: Callable[[np.ndarray], float]
    prox_map: Optional[Callable[[np.ndarray, float], np.ndarray]] = None
    name: str = "f"
    # any point of dom f; used to seed the numeric prox
    feasible_point: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.dim <= 0:
            raise InvalidParameterError(f"dim must be positive, got {self.dim}")
        if self.feasible_point is not None:
            object.__setattr__(
                self, "feasible_point", frozen_copy(as_vector(self.feasible_point, self.dim))
            )

    @property
    def has_closed_form(self) -> bool:
        return self.prox_map is not None

    def __call__(self, x: ArrayLike) -> float:
        return float(self.evaluate(as_vector(x, self.dim)))

    def prox(self, y: ArrayLike, eta: float) -> np.ndarray:
        """prox_{eta f}(y) = argmin_u f(u) + ||u - y||^2 / (2 eta)"""
        if not eta > 0:
            raise InvalidParameterError(f"prox scale must be positive, got {eta!r}")
        y = as_vector(y, self.dim, name="y")
        if self.prox_map is not None:
            return self.prox_map(y, eta)

        from fbflow.core.prox_catalog import prox_numeric

        return prox_numeric(self, y, eta)


@dataclass(frozen=True, eq=False)
class SmoothTerm:
    """Smooth term g with analytic gradient and Lipschitz constant beta"""

    dim: int
    evaluate: Callable[[np.ndarray], float]
    gradient: Callable[[np.ndarray], np.ndarray]
    lipschitz_beta: float
    name: str = "g"
    convex: bool = False
    # box (lo, hi) on which lipschitz_beta is claimed; None means everywhere
    sample_box: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        if self.dim <= 0:
            raise InvalidParameterError(f"dim must be positive, got {self.dim}")
        if not math.isfinite(self.lipschitz_beta) or self.lipschitz_beta < 0:
            raise InvalidParameterError(
                f"lipschitz_beta must be nonnegative, got {self.lipschitz_beta!r}"
            )

    def __call__(self, x: ArrayLike) -> float:
        return float(self.evaluate(as_vector(x, self.dim)))

    def grad(self, x: ArrayLike) -> np.ndarray:
        return np.asarray(self.gradient(as_vector(x, self.dim)), dtype=np.float64)


@dataclass(frozen=True, eq=False)
class CompositeProblem:
    """The pair (f, g) with step eta and initial point x0"""

    f: ProxTerm
    g: SmoothTerm
    eta: float
    x0: np.ndarray
    coercive: bool = False
    known_minimizer: Optional[np.ndarray] = None
    name: str = field(default="problem")

    def __post_init__(self):
        x0 = as_vector(self.x0, name="x0")
        if not (self.f.dim == self.g.dim == x0.shape[0]):
            raise DimensionMismatchError(
                f"dimension mismatch: f.dim={self.f.dim}, g.dim={self.g.dim}, len(x0)={x0.shape[0]}"
            )
        object.__setattr__(self, "x0", frozen_copy(x0))
        object.__setattr__(self, "eta", float(self.eta))
        if self.known_minimizer is not None:
            object.__setattr__(
                self,
                "known_minimizer",
                frozen_copy(as_vector(self.known_minimizer, self.dim, name="known_minimizer")),
            )

        if not validate_step(self.eta, self.beta):
            logger.error(f"Step condition violated for {self.name}: eta={self.eta}, beta={self.beta}")
            raise InvalidParameterError(
                "step condition eta*beta*(3 + eta*beta) < 1 violated: "
                f"eta={self.eta!r}, beta={self.beta!r}, "
                f"eta*beta*(3+eta*beta)={self.step_product!r}; "
                f"max admissible eta is {max_valid_eta(self.beta)!r}"
            )

        if self.known_minimizer is not None:
            residual = self.fixed_point_residual(self.known_minimizer)
            if not residual <= KNOWN_MINIMIZER_TOL:
                logger.error(f"known_minimizer of {self.name} is not a fixed point (residual {residual:.3e})")
                raise InvalidParameterError(
                    f"known_minimizer is not a critical point: fixed-point residual {residual:.3e} "
                    f"exceeds {KNOWN_MINIMIZER_TOL:g}"
                )

    def fixed_point_residual(self, x: ArrayLike) -> float:
        """||prox_{eta f}(x - eta grad g(x)) - x||"""
        x = as_vector(x, self.dim)
        return float(np.linalg.norm(self.f.prox(x - self.eta * self.g.grad(x), self.eta) - x))

    @classmethod
    def build(
        cls,
        f: ProxTerm,
        g: SmoothTerm,
        x0: ArrayLike,
        eta: Union[float, str] = "auto",
        coercive: bool = False,
        known_minimizer: Optional[ArrayLike] = None,
        name: str = "problem",
    ) -> "CompositeProblem":
        return cls(
            f=f,
            g=g,
            eta=resolve_eta(eta, g.lipschitz_beta),
            x0=as_vector(x0, name="x0"),
            coercive=coercive,
            known_minimizer=None if known_minimizer is None else as_vector(known_minimizer),
            name=name,
        )

    @property
    def dim(self) -> int:
        return self.f.dim

    @property
    def beta(self) -> float:
        return self.g.lipschitz_beta

    @property
    def step_product(self) -> float:
        return self.eta * self.beta * (3.0 + self.eta * self.beta)

    @property
    def dissipation_constant(self) -> float:
        """1/eta - beta*(3 + eta*beta), positive under the step condition"""
        return 1.0 / self.eta - self.beta * (3.0 + self.eta * self.beta)

    @property
    def is_convex(self) -> bool:
        return self.g.convex


def objective(problem: CompositeProblem, x: ArrayLike) -> float:
    """(f + g)(x); +inf propagates from f"""
    x = as_vector(x, problem.dim)
    fx = problem.f(x)
    if math.isinf(fx):
        return fx
    return fx + problem.g(x)
