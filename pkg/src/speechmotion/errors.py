"""Exception hierarchy shared across the package."""


class SpeechMotionError(Exception):
    """Base class for all package errors."""


class InvalidInputError(SpeechMotionError):
    """Caller passed data that violates an operation's preconditions."""


class ConfigError(SpeechMotionError):
    """A configuration value (or combination of values) is unusable."""


class InfeasibleAlignmentError(InvalidInputError):
    """No monotonic surjective alignment exists (more tokens than frames)."""


class NumericalFailureError(SpeechMotionError):
    """A numerical routine produced non-finite values.

    ``stage`` names the computation that failed; ``step`` is the ODE or
    training step index when one applies.
    """

    def __init__(self, message: str, stage: str | None = None, step: int | None = None):
        super().__init__(message)
        self.stage = stage
        self.step = step


class PipelineError(SpeechMotionError):
    """Corpus-pipeline bookkeeping was violated (e.g. mutating a terminal record)."""
