"""Exception hierarchy shared across the toolkit.

Exit-code mapping used by the CLI: ValidationError -> 1,
NumericalError / TrainingError -> 2, CheckpointError and other
OSError subclasses -> 3.
"""


class SonospeckError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(SonospeckError, ValueError):
    """Bad arguments, malformed config, or contract violation by the caller."""


class NumericalError(SonospeckError, ArithmeticError):
    """NaN/Inf or other numerical failure produced at runtime."""


class TrainingError(SonospeckError, RuntimeError):
    """Training loop failure (e.g. aborted on a non-finite loss)."""


class CheckpointError(SonospeckError, OSError):
    """Unreadable, truncated, or malformed checkpoint file."""
