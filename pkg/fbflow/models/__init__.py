from fbflow.models.problem import CompositeProblem, ProxTerm, SmoothTerm, max_valid_eta
from fbflow.models.run_config import IntegratorConfig, ProblemSpec, Regime, RunConfig

__all__ = [
    "CompositeProblem",
    "ProxTerm",
    "SmoothTerm",
    "max_valid_eta",
    "IntegratorConfig",
    "ProblemSpec",
    "Regime",
    "RunConfig",
]
