"""NBED edge detection: network, loss, data pipeline, trainer and evaluation protocol."""

from .config import ConfigError, EvalConfig, LossConfig, ModelConfig, ShapeError, TrainConfig, tiny_config
from .model import NBED, build_model

__all__ = [
    "ConfigError", "EvalConfig", "LossConfig", "ModelConfig", "ShapeError", "TrainConfig",
    "tiny_config", "NBED", "build_model",
]
__version__ = "0.1.0"
