"""Sparse upcycling at desk scale.

A numpy decoder-only transformer with manual backward passes, dense to
mixture-of-experts checkpoint surgery, iso-FLOP token planning, and a
roofline serving simulator.
"""

from .config import MoEConfig, ModelConfig, PRESETS, load_model_config, table3_shaped_config, toy_config
from .errors import (CapacityError, ConfigError, DomainError, LengthError, NumericError, PairingError,
                     ShapeError, StageError, StateError, TableLookupError, TrainingDiverged, UpcycleError)
from .model import Checkpoint, count_params, forward, init_dense
from .numerics import RngStream
from .surgeon import upcycle, verify_preservation

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "MoEConfig", "ModelConfig", "PRESETS", "RngStream",
    "count_params", "forward", "init_dense", "load_model_config", "table3_shaped_config", "toy_config",
    "upcycle", "verify_preservation",
    "CapacityError", "ConfigError", "DomainError", "LengthError", "NumericError", "PairingError",
    "ShapeError", "StageError", "StateError", "TableLookupError", "TrainingDiverged", "UpcycleError",
]
