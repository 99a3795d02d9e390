"""Prototype-prompted dual-stream feature reconstruction for multi-class anomaly detection."""
from .config import TrainConfig, load_config
from .estimator import GlobalCodingTransformer, PNPTDetector
from .inference import Detector
from .pool import NormalityPool, build_pool, load_pool, save_pool
from .training import Checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "Detector",
    "GlobalCodingTransformer",
    "NormalityPool",
    "PNPTDetector",
    "TrainConfig",
    "build_pool",
    "load_config",
    "load_pool",
    "save_pool",
    "train",
]
