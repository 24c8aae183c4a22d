"""
Exception hierarchy shared by the lab modules and the CLI
"""
from typing import Optional

import numpy as np


class W2SError(Exception):
    """Base class for every error raised by the lab"""

    exit_code = 1


class ValidationError(W2SError, ValueError):
    """Bad input: shapes, ranges, malformed config or data files"""

    exit_code = 1


class EnumerationLimitError(ValidationError):
    """A requested enumeration exceeds Config.ENUMERATION_LIMIT"""


class NumericalError(W2SError, ArithmeticError):
    """A computation ran but could not produce a trustworthy number"""

    exit_code = 2


class QuadratureError(NumericalError):
    pass


class EMFailure(NumericalError):
    """Every EM restart aborted"""


class MonotonicityError(NumericalError):
    pass


class AssignmentError(NumericalError):
    """Weak-component matching is not a bijection"""

    def __init__(self, message: str, distances: Optional[np.ndarray] = None,
                 mapping: Optional[np.ndarray] = None):
        self.distances = distances
        self.mapping = mapping
        if distances is not None:
            message = f"{message}\nmapping={mapping!r}\ndistances=\n{np.array2string(distances, precision=4)}"
        super().__init__(message)


def exit_code_for(exc: BaseException) -> int:
    """Map an exception to the CLI exit code"""
    if isinstance(exc, W2SError):
        return exc.exit_code
    if isinstance(exc, (np.linalg.LinAlgError, FloatingPointError)):
        return NumericalError.exit_code
    return 1
