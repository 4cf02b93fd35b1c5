import re
from typing import Iterable, List, Optional

import numpy as np
from numpy.typing import ArrayLike

from fbflow.exceptions import DimensionMismatchError


def as_vector(x: ArrayLike, dim: Optional[int] = None, name: str = "x") -> np.ndarray:
    """
    Convert input to a 1-D float64 array, optionally checking its length
    """
    vec = np.asarray(x, dtype=np.float64)
    if vec.ndim == 0:
        vec = vec.reshape(1)
    if vec.ndim != 1:
        raise DimensionMismatchError(f"{name} must be a vector, got shape {vec.shape}")
    if dim is not None and vec.shape[0] != dim:
        raise DimensionMismatchError(
            f"{name} has dimension {vec.shape[0]}, expected {dim}"
        )
    return vec


def frozen_copy(x: np.ndarray) -> np.ndarray:
    """Return a read-only copy of an array"""
    out = np.array(x, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


def format_float(value: float) -> str:
    """
    Round-trip decimal formatting (17 significant digits)

    Examples:
        0.1 -> 0.10000000000000001
        inf -> inf
    """
    return f"{float(value):.17g}"


def format_row(values: Iterable[float]) -> List[str]:
    return [format_float(v) for v in values]


def sanitize_filename(filename: str) -> str:
    """
    Sanitize a run name so it can be used as a directory name
    """
    # Remove invalid characters
    filename = re.sub(r'[<>:"/\\|?*]', "", filename)

    # Replace spaces with underscores
    filename = filename.strip().replace(" ", "_")

    if len(filename) > 200:
        filename = filename[:200]

    return filename or "run"
