"""Error taxonomy shared across the package.

The CLI maps these onto exit codes: usage errors are handled by argparse,
ValidationError (and subclasses) exit 2, everything else raised from task
code exits 3.
"""


class AbaError(Exception):
    """Base class for all package errors."""


class ValidationError(AbaError):
    """Bad input data: malformed files, out-of-contract values, unknown names."""


class FormatError(ValidationError):
    """A persisted artifact is structurally unreadable or has a wrong version."""


class GrammarError(ValidationError):
    """Feedback text that does not parse; carries the offending position."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class SimulationError(AbaError):
    """The simulator was driven into an illegal state."""


class RuntimeFailure(AbaError):
    """A rollout, fit, calibration, or analysis step failed at runtime."""


class ExpertAbort(AbaError):
    """An interactive expert gave up mid-query; the rollout ends incomplete."""
