"""LiDAR + RGB object classification with spoken detection phrases."""

from .kitti_io import CLASS_NAMES, ObjectLabel, PointCloud, RgbImage, Sample
from .model import DetectionResult, ModelConfig, init_params, load_checkpoint, predict, save_checkpoint
from .training import FitConfig, fit
from .voice import format_phrase

__version__ = "0.1.0"

__all__ = [
    "CLASS_NAMES",
    "DetectionResult",
    "FitConfig",
    "ModelConfig",
    "ObjectLabel",
    "PointCloud",
    "RgbImage",
    "Sample",
    "fit",
    "format_phrase",
    "init_params",
    "load_checkpoint",
    "predict",
    "save_checkpoint",
]
