"""Transformer over functional-connectivity matrices with adaptive edge masks,
prototype classification and counter-condition FC simulation."""

from .errors import CCFCError, ConfigError, DataError
from .fc_data import Dataset, SubjectRecord, SyntheticSpec, generate_synthetic, load_dataset, save_dataset, split
from .model import CCFCNet, ModelConfig, build_model
from .training import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "CCFCError", "ConfigError", "DataError", "Dataset", "SubjectRecord", "SyntheticSpec", "generate_synthetic",
    "load_dataset", "save_dataset", "split", "CCFCNet", "ModelConfig", "build_model", "TrainConfig", "evaluate",
    "train",
]
