"""
Exception hierarchy shared by the parsers, the EM driver and the solvers.

The command-line entry point maps every `EmToolkitError` to exit code 1.
"""

from typing import List, Optional


class EmToolkitError(Exception):
    """Base class for every error raised on purpose by this package."""


class DataError(EmToolkitError, ValueError):
    """
    Malformed or inconsistent input data.

    Parameters
    ----------
    message : str
        What went wrong.
    record : str, optional
        Record, sequence, individual or column the problem belongs to.
    line : int, optional
        1-based line number in the input text.
    column : int, optional
        1-based column number in the input line.
    """

    def __init__(self, message: str, record: Optional[str] = None,
                 line: Optional[int] = None, column: Optional[int] = None):
        self.record = record
        self.line = line
        self.column = column
        location = []
        if record is not None:
            location.append(f"record '{record}'")
        if line is not None:
            location.append(f"line {line}")
        if column is not None:
            location.append(f"column {column}")
        if location:
            message = f"{message} ({', '.join(location)})"
        super().__init__(message)


class CapacityError(DataError):
    """An individual has more heterozygous loci than the enumeration allows."""


class ConvergenceError(EmToolkitError, ArithmeticError):
    """The EM objective became non-finite."""

    def __init__(self, message: str, iteration: int):
        self.iteration = iteration
        super().__init__(f"{message} at iteration {iteration}")


class SingularCovarianceError(EmToolkitError, ArithmeticError):
    """A mixture component covariance is not positive definite."""

    def __init__(self, component: int):
        self.component = component
        super().__init__(f"Covariance of component {component} is singular")


class MultiStartError(EmToolkitError):
    """Every EM restart failed; `causes` lists one message per restart."""

    def __init__(self, causes: List[str]):
        self.causes = causes
        detail = "; ".join(f"restart {i}: {cause}" for i, cause in enumerate(causes))
        super().__init__(f"All {len(causes)} restarts failed: {detail}")


class EmptyComponentError(EmToolkitError):
    """Mixture components whose total responsibility fell below the empty-cluster threshold."""

    def __init__(self, components: List[int]):
        self.components = components
        super().__init__(f"Components {', '.join(str(k) for k in components)} have no responsibility mass")
