"""Bidirectional electro <-> hemo translation with learned HRFs, wavelet attention and graph attention."""

from .errors import ConfigError, ContractError, DataError, NumericError, SambaError
from .model import Ablations, Geometry, ModelConfig, SambaModel
from .synth import PairedDataset, SynthConfig, generate
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "Ablations", "ConfigError", "ContractError", "DataError", "Geometry", "ModelConfig", "NumericError",
    "PairedDataset", "SambaError", "SambaModel", "SynthConfig", "TrainConfig", "generate", "load_checkpoint",
    "save_checkpoint", "train",
]
