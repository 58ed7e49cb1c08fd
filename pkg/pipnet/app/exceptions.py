"""
Error hierarchy for the PIPNet package.

Every error raised on purpose by the package derives from `PipnetError`, so the
CLI can tell validation problems (exit 1) apart from runtime failures (exit 2).
"""


class PipnetError(Exception):
    """Base class for all package errors."""


class ConfigurationError(PipnetError):
    """A configuration value is invalid or two values are incompatible."""


class ShapeError(PipnetError):
    """Tensor or array dimensions do not agree."""


class TapeError(PipnetError):
    """Misuse of the autodiff tape (double backward, detached loss, non-scalar loss)."""


class GradCheckError(PipnetError):
    """Finite-difference gradient check could not be evaluated."""


class NonFiniteError(PipnetError):
    """A NaN or infinite value showed up where it must not."""


class TrainingDivergedError(NonFiniteError):
    def __init__(self, epoch: int, batch: int, message: str = "loss is not finite"):
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"{message} (epoch {epoch}, batch {batch})")


class DecodeError(PipnetError):
    """Network outputs could not be turned into landmarks."""


class DegenerateBoxError(PipnetError):
    """A bounding box has zero (or negative) width or height."""


class CheckpointError(PipnetError):
    """A checkpoint manifest or blob is missing, corrupt, or mismatched."""


class PointsParseError(PipnetError):
    def __init__(self, path: str, line_no: int, message: str):
        self.path = path
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


class MalformedHeaderError(PointsParseError):
    pass


class CountMismatchError(PointsParseError):
    pass


class NonNumericTokenError(PointsParseError):
    pass


class UsageError(ConfigurationError):
    """Unknown command, flag, or argument on the command line."""
