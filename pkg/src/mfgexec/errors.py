"""Exception types shared by the solvers and the CLI."""

from __future__ import annotations


class MfgError(Exception):
    """Base class for all errors raised by this package."""


class ScenarioError(MfgError, ValueError):
    """Invalid parameters or a malformed scenario file.

    ``line`` is set when the problem can be traced to a line of a scenario file.
    """

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NumericalError(MfgError, RuntimeError):
    """A solver could not meet its postconditions."""


class ConvergenceError(NumericalError):
    """Fixed-point iteration did not converge.

    Attributes
    ----------
    history : list of float
        Sup-norm update size of every iteration that was performed.
    """

    def __init__(self, message: str, history=()):
        self.history = list(history)
        super().__init__(message)


class IllConditionedError(NumericalError):
    pass


class CFLError(NumericalError):
    pass


class BoundaryLeakError(NumericalError):
    pass
