class APCCError(Exception):
    """Base class for all package errors."""


class ConfigError(APCCError, ValueError):
    """Invalid parameters or configuration."""


class TrainingError(APCCError):
    """The predictor could not be trained."""


class PredictionUnavailable(APCCError):
    """No inputs were available to form a prediction."""


class CalibrationError(APCCError):
    """Calibration data are insufficient or degenerate."""


class ArtifactMismatch(APCCError):
    """A persisted artifact does not match the requested configuration."""


class PlanError(APCCError, IndexError):
    """An attack plan addresses sensors or steps that do not exist."""


class InvariantViolation(APCCError, AssertionError):
    """An internal invariant was broken."""
