"""One-image-as-one-domain disentanglement for domain-generalized segmentation."""

from uniddg.core import Batch, Image, LabelMask, validate_batch
from uniddg.networks import ModelBundle, ModelConfig, adain, sample_style
from uniddg.losses import LossBreakdown, LossWeights

__all__ = [
    "Batch",
    "Image",
    "LabelMask",
    "LossBreakdown",
    "LossWeights",
    "ModelBundle",
    "ModelConfig",
    "adain",
    "sample_style",
    "validate_batch",
]

__version__ = "0.1.0"
