import math
from enum import Enum
from typing import Annotated, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from fbflow.models.problem import CompositeProblem, ProxTerm, SmoothTerm


class IntegrationMethod(str, Enum):
    EULER = "euler"
    RK4 = "rk4"
    ADAPTIVE_RK45 = "adaptive-rk45"


class IntegratorConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    method: IntegrationMethod = IntegrationMethod.ADAPTIVE_RK45
    step: float = Field(default=0.01, gt=0, description="fixed step for euler/rk4")
    abs_tol: float = Field(default=1e-9, gt=0)
    rel_tol: float = Field(default=1e-9, gt=0)
    t_max: float = Field(default=1e3, gt=0)
    stop_residual: float = Field(default=1e-9, ge=0)
    max_samples: int = Field(default=1_000_000, ge=2)

    @field_validator("t_max", "step", "abs_tol", "rel_tol")
    @classmethod
    def _finite(cls, v: float) -> float:
        if not math.isfinite(v):
            raise ValueError("must be finite")
        return v

    @property
    def error_scale(self) -> float:
        """Size of the per-step error the method is expected to commit"""
        if self.method == IntegrationMethod.ADAPTIVE_RK45:
            return max(self.abs_tol, self.rel_tol)
        if self.method == IntegrationMethod.RK4:
            return self.step**4
        return self.step


# ---------------------------------------------------------------------------
# Term specifications (discriminated on "kind")


class _TermSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class ZeroProxSpec(_TermSpec):
    kind: Literal["zero"] = "zero"

    def build(self, dim: int) -> ProxTerm:
        from fbflow.core.prox_catalog import zero_prox

        return zero_prox(dim)


class L1ProxSpec(_TermSpec):
    kind: Literal["l1"] = "l1"
    weight: float = Field(default=1.0, ge=0)

    def build(self, dim: int) -> ProxTerm:
        from fbflow.core.prox_catalog import l1_norm

        return l1_norm(dim, self.weight)


class BoxProxSpec(_TermSpec):
    kind: Literal["box"] = "box"
    lo: Union[float, List[float]] = 0.0
    hi: Union[float, List[float]] = 1.0

    def build(self, dim: int) -> ProxTerm:
        from fbflow.core.prox_catalog import box_indicator

        def expand(bound: Union[float, List[float]]) -> List[float]:
            return [float(bound)] * dim if isinstance(bound, (int, float)) else list(bound)

        return box_indicator(expand(self.lo), expand(self.hi))


class L2SquaredProxSpec(_TermSpec):
    kind: Literal["l2_squared"] = "l2_squared"
    weight: float = Field(default=1.0, gt=0)

    def build(self, dim: int) -> ProxTerm:
        from fbflow.core.prox_catalog import squared_l2

        return squared_l2(dim, self.weight)


class ZeroSmoothSpec(_TermSpec):
    kind: Literal["zero"] = "zero"

    def build(self, dim: int) -> SmoothTerm:
        from fbflow.core.prox_catalog import smooth_zero

        return smooth_zero(dim)


class QuadraticSmoothSpec(_TermSpec):
    kind: Literal["quadratic"] = "quadratic"
    A: List[List[float]]
    b: Optional[List[float]] = None
    c: float = 0.0

    def build(self, dim: int) -> SmoothTerm:
        from fbflow.core.prox_catalog import smooth_quadratic

        return smooth_quadratic(self.A, self.b, self.c)


class CosineSmoothSpec(_TermSpec):
    kind: Literal["cosine"] = "cosine"
    a: float = Field(gt=0)
    Q: List[List[float]]

    def build(self, dim: int) -> SmoothTerm:
        from fbflow.core.prox_catalog import smooth_nonconvex_cosine

        return smooth_nonconvex_cosine(self.a, self.Q)


class QuarticSmoothSpec(_TermSpec):
    kind: Literal["quartic"] = "quartic"
    radius: float = Field(default=1.0, gt=0)

    def build(self, dim: int) -> SmoothTerm:
        from fbflow.core.prox_catalog import smooth_quartic

        return smooth_quartic(dim, self.radius)


ProxSpec = Annotated[
    Union[ZeroProxSpec, L1ProxSpec, BoxProxSpec, L2SquaredProxSpec],
    Field(discriminator="kind"),
]
SmoothSpec = Annotated[
    Union[ZeroSmoothSpec, QuadraticSmoothSpec, CosineSmoothSpec, QuarticSmoothSpec],
    Field(discriminator="kind"),
]


class ProblemSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    f: ProxSpec
    g: SmoothSpec
    x0: List[float] = Field(min_length=1)
    eta: Union[float, Literal["auto"]] = "auto"
    coercive: bool = False
    known_minimizer: Optional[List[float]] = None

    @field_validator("eta")
    @classmethod
    def _positive_eta(cls, v: Union[float, str]) -> Union[float, str]:
        if not isinstance(v, str) and not (math.isfinite(v) and v > 0):
            raise ValueError("eta must be a positive finite number or 'auto'")
        return v

    def build(self, name: str = "problem") -> CompositeProblem:
        """Construct the problem; raises InvalidParameterError if the step condition fails"""
        dim = len(self.x0)
        return CompositeProblem.build(
            f=self.f.build(dim),
            g=self.g.build(dim),
            x0=self.x0,
            eta=self.eta,
            coercive=self.coercive,
            known_minimizer=self.known_minimizer,
            name=name,
        )


class Regime(str, Enum):
    FINITE_TIME = "finite_time"
    EXPONENTIAL = "exponential"
    POLYNOMIAL = "polynomial"
    INCONCLUSIVE = "inconclusive"
    INCONCLUSIVE_FINITE_OR_EXPONENTIAL = "inconclusive_finite_or_exponential"


class AnalysisToggles(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    energy: bool = True
    subgradient: bool = True
    criticality: bool = True
    velocity: bool = True
    tail_length: bool = True
    rate: bool = True
    lipschitz: bool = True
    lipschitz_pairs: int = Field(default=1000, ge=1)
    expected_regime: Optional[Regime] = None


class RunConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str = "run"
    problem: ProblemSpec
    integrator: IntegratorConfig = IntegratorConfig()
    analysis: AnalysisToggles = AnalysisToggles()
    output_dir: Optional[str] = None
    seed: int = Field(default=0, ge=0, lt=2**64)

    @model_validator(mode="after")
    def _known_minimizer_dim(self) -> "RunConfig":
        km = self.problem.known_minimizer
        if km is not None and len(km) != len(self.problem.x0):
            raise ValueError("problem.known_minimizer must have the same length as problem.x0")
        return self
