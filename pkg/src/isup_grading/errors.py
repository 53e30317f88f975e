class GradingError(Exception):
    """Base class for errors raised by this package."""


class InvalidLabelError(GradingError, ValueError):
    pass


class InvalidProbabilityError(GradingError, ValueError):
    pass


class EmptySlideError(GradingError, ValueError):
    pass


class ParameterError(GradingError, ValueError):
    pass


class ShapeError(GradingError, ValueError):
    pass


class NumericError(GradingError, FloatingPointError):
    """A non-finite value reached the optimizer; ``name`` is the offending parameter."""

    def __init__(self, message: str, name: str | None = None):
        super().__init__(message)
        self.name = name


class ExcludedSlideError(GradingError, ValueError):
    pass


class DegenerateKappaError(GradingError, ValueError):
    pass


class UndefinedMetricError(GradingError, ValueError):
    pass


class CheckpointError(GradingError, IOError):
    pass


class ConfigError(GradingError, ValueError):
    pass


class StageError(GradingError, RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage!r} failed: {message}")
        self.stage = stage
