from typing import Any, Dict, List, Optional, Tuple

from pydantic import BaseModel, Field

from fbflow.models.run_config import Regime


class EnergyReport(BaseModel):
    dissipation_constant: float
    slack: float
    initial_energy: float
    final_energy: float
    objective_along_flow: float
    nonincreasing: bool
    violations: List[Tuple[float, float]] = Field(default_factory=list)


class VelocityReport(BaseModel):
    initial_speed: float
    final_sup: float
    l2_total: float
    monotone: bool


class TailReport(BaseModel):
    total_length: float
    max_violation: float
    violations: List[float] = Field(default_factory=list)


class LimitReport(BaseModel):
    """Terminal candidate for the limit of the trajectory"""

    final_state: List[float]
    residual: float
    is_critical: bool
    objective: float
    energy_gap: float
    energy_gap_allowance: float
    terminal_energy_bound: float
    max_norm: float
    initial_energy: float
    coercive: bool
    sublevel_bound_holds: Optional[bool] = None


class RateFit(BaseModel):
    """Lojasiewicz exponent estimate and convergence-rate regime"""

    theta: Optional[float] = None
    C: Optional[float] = None
    regime: Regime
    fit_constants: Optional[Tuple[float, float]] = None
    fit_window: Optional[Tuple[float, float]] = None
    r_squared: Optional[float] = None
    power_exponent: Optional[float] = None
    settle_time: Optional[float] = None
    window_size: int = 0
    note: str = ""


class DiscreteComparison(BaseModel):
    iterations: int
    discrete_limit: List[float]
    continuous_limit: List[float]
    distance: float
    objective_gap: float
    same_limit: bool


class CheckResult(BaseModel):
    name: str
    passed: bool
    detail: str = ""


class AnalysisReport(BaseModel):
    name: str
    eta: float
    beta: float
    trajectory: Dict[str, Any]
    checks: List[CheckResult]
    energy: Optional[EnergyReport] = None
    velocity: Optional[VelocityReport] = None
    tail: Optional[TailReport] = None
    limit: Optional[LimitReport] = None
    rate: Optional[RateFit] = None
    discrete: Optional[DiscreteComparison] = None

    @property
    def failed(self) -> List[str]:
        return [c.name for c in self.checks if not c.passed]
