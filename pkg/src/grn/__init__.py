"""Few-shot motor-imagery EEG decoding with a gradual relation network."""

from .model import GRN, GrnConfig, Prediction, ProtocolError, compute_prototypes, load_checkpoint, save_checkpoint
from .training import TrainReport, TrainingDiverged, fit, sample_support

__version__ = "0.1.0"

__all__ = [
    "GRN",
    "GrnConfig",
    "Prediction",
    "ProtocolError",
    "TrainReport",
    "TrainingDiverged",
    "compute_prototypes",
    "fit",
    "load_checkpoint",
    "sample_support",
    "save_checkpoint",
]
