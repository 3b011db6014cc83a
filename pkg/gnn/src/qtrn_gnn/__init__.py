"""Graph neural network fine-tuning of queueing-baseline delay predictions.

Consumes converted dataset directories (see docs/FORMATS.md at the
repository root) and produces checkpoints and prediction CSVs in the
shared schema. Deliberately independent of the package that writes those
files; the file formats are the only contract.
"""

__version__ = "0.1.0"

from .bundles import Bundle, BundleError, Dataset, load_bundle, load_dataset
from .model import (
    DelayFineTuner,
    GraphTensors,
    ModelSpec,
    RoundState,
    prepare,
)
from .predict import load_checkpoint, predict_dataset, predict_to_csv, write_predictions
from .train import TrainConfig, TrainError, TrainResult, train

__all__ = [
    "Bundle",
    "BundleError",
    "Dataset",
    "DelayFineTuner",
    "GraphTensors",
    "ModelSpec",
    "RoundState",
    "TrainConfig",
    "TrainError",
    "TrainResult",
    "load_bundle",
    "load_checkpoint",
    "load_dataset",
    "predict_dataset",
    "predict_to_csv",
    "prepare",
    "train",
    "write_predictions",
]
