"""Learned visual ego-motion: per-feature mixture-density regression of
relative pose from sparse optical flow, two-stage trajectory-aware
training, C-VAE flow introspection and pose-graph fusion with sparse
absolute priors, plus a multi-optics synthetic simulator."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    AlignmentError, ConfigurationError, ContractError, EgomotionError, GaugeError, InvalidPoseError,
    NumericError, ShapeError, TrackFormatError, TrackRangeError, TrainingAborted,
)

__all__ = [
    "__version__", "AlignmentError", "ConfigurationError", "ContractError", "EgomotionError", "GaugeError",
    "InvalidPoseError", "NumericError", "ShapeError", "TrackFormatError", "TrackRangeError", "TrainingAborted",
]
