"""Exception hierarchy shared across the package."""


class EgomotionError(Exception):
    """Base class for all package errors."""


class InvalidPoseError(EgomotionError, ValueError):
    pass


class ConfigurationError(EgomotionError, ValueError):
    pass


class TrackFormatError(EgomotionError, ValueError):
    """Malformed or out-of-contract track / trajectory file.

    ``line`` is the 1-based line number of the offending row when known.
    """

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class TrackRangeError(TrackFormatError):
    pass


class ShapeError(EgomotionError, ValueError):
    pass


class ContractError(EgomotionError, ValueError):
    pass


class NumericError(EgomotionError, FloatingPointError):
    pass


class GaugeError(EgomotionError):
    """Pose graph has no absolute prior, so the solution is not unique."""


class AlignmentError(EgomotionError, ValueError):
    pass


class TrainingAborted(NumericError):
    """Raised on a non-finite training loss.

    ``checkpoint`` holds the last parameter snapshot whose loss was finite.
    """

    def __init__(self, message: str, checkpoint=None, epoch: int | None = None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.epoch = epoch
