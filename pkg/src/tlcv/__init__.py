"""Time-lagged conditional flow matching for collective-variable discovery on toy systems."""

from .errors import (ChecksumMismatch, ConfigError, ContractViolation, DegenerateEncoderError,
                     DegenerateGeometryError, EmptyDatasetError, GenerationDiverged, IllConditionedError,
                     SimulationDiverged, TlcError, TrainingDiverged)

__version__ = "0.1.0"
