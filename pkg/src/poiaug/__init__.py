"""Imputation of missing check-ins in sparse LBSN trajectories with an attention seq2seq model."""

from .data import CheckIn, GriddedSequence, Slot, Vocabulary, grid_align, parse_checkin_file, split_dataset
from .errors import (ContractViolation, DataFormatError, NumericalError, PoiAugError, ShapeError,
                     UndefinedMetricError)
from .evaluation import augmentation_benchmark, hr_at_k
from .model import ModelConfig, Seq2SeqModel
from .training import TrainConfig, mask_percent, train_three_stage

__version__ = "0.1.0"

__all__ = [
    "CheckIn", "GriddedSequence", "Slot", "Vocabulary", "grid_align", "parse_checkin_file", "split_dataset",
    "ContractViolation", "DataFormatError", "NumericalError", "PoiAugError", "ShapeError", "UndefinedMetricError",
    "augmentation_benchmark", "hr_at_k", "ModelConfig", "Seq2SeqModel", "TrainConfig", "mask_percent",
    "train_three_stage",
]
