"""Similarity-equivariant point-cloud completion on numpy."""

__version__ = "0.1.0"

from .geometry import PointCloud, Sim3Transform, TransformDistribution, sample_transform, self_normalize
from .model import CompletionModel, ModelConfig, preset

__all__ = [
    "CompletionModel",
    "ModelConfig",
    "PointCloud",
    "Sim3Transform",
    "TransformDistribution",
    "__version__",
    "preset",
    "sample_transform",
    "self_normalize",
]
