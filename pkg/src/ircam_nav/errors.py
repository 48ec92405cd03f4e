"""Exception hierarchy shared by every ircam-nav module."""

import math
from typing import Optional


class IrcamError(Exception):
    """Base class for all ircam-nav failures."""


class DimensionError(IrcamError, ValueError):
    """Operand shapes are incompatible for the requested op."""


class ContractError(IrcamError):
    """A precondition of an operation was violated by the caller."""


class NonFiniteError(IrcamError, ArithmeticError):
    """A forward op produced NaN or Inf."""

    def __init__(self, message: str, value: float = math.nan):
        super().__init__(message)
        self.value = value


class ConfigError(IrcamError, ValueError):
    """Configuration is missing, malformed or inconsistent."""


class CheckpointError(IrcamError):
    """A checkpoint file could not be parsed."""

    def __init__(self, message: str, offset: Optional[int] = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DivergenceError(IrcamError):
    """Training produced a non-finite loss term."""

    def __init__(self, term: str, value: float):
        super().__init__(f"Non-finite {term} ({value}); aborting update")
        self.term = term
        self.value = value


class RunDirectoryError(IrcamError):
    """The run directory exists and may not be overwritten."""
