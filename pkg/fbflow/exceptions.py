from typing import List, Optional

import numpy as np


class FBFlowError(Exception):
    """Base class for every error raised by fbflow"""


class InvalidParameterError(FBFlowError, ValueError):
    """A numerical parameter is outside its admissible range"""


class DimensionMismatchError(FBFlowError, ValueError):
    """Vectors or terms of incompatible dimension were combined"""


class ConvergenceFailureError(FBFlowError):
    """An inner iterative scheme stopped before meeting its tolerance"""

    def __init__(self, message: str, residual: float, iterations: int = 0):
        super().__init__(f"{message} (residual={residual:.3e}, iterations={iterations})")
        self.residual = residual
        self.iterations = iterations


class DivergenceError(FBFlowError):
    """The integrator produced a non-finite state"""

    def __init__(self, t: float, state: Optional[np.ndarray] = None):
        super().__init__(f"Non-finite state encountered at t={t!r}")
        self.t = t
        self.state = state


class InvalidConfigError(FBFlowError):
    """A run configuration failed to parse or validate"""

    def __init__(self, diagnostics: List[str]):
        self.diagnostics = list(diagnostics)
        super().__init__("; ".join(self.diagnostics) or "invalid configuration")


class ProblemMismatchError(FBFlowError):
    """A trajectory was analysed against a problem it was not computed on"""


class OutOfRangeError(FBFlowError, ValueError):
    """A resampling grid leaves the time span of the trajectory"""


class DegenerateWindowError(FBFlowError):
    """Too few usable samples remain inside a regression window"""
