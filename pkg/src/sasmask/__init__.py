"""Stealthy adversarial style masks against face verification models."""

__version__ = "0.1.0"

from .images import (EXTRACTOR_NORM, FR_NORM, FaceImage, MaskPattern, NormalizationSpec,
                     denormalize, load_image, normalize, save_image)
from .losses import LossBundle, LossWeights, fr_loss, l1_loss, style_loss, total_loss, tv_loss
from .overlay import (FIXED_RECT, GeometryMapper, MaskedFace, TransformConfig, apply_transform,
                      overlay, sample_transform)
from .styles import StyleSet, StyleWeights, blend_style, relaxed_distribution, select_style
from .victim import Threshold, VerificationModel, calibrate_threshold, distance, embed, verify

__all__ = [
    "EXTRACTOR_NORM", "FR_NORM", "FaceImage", "MaskPattern", "NormalizationSpec",
    "denormalize", "load_image", "normalize", "save_image",
    "LossBundle", "LossWeights", "fr_loss", "l1_loss", "style_loss", "total_loss", "tv_loss",
    "FIXED_RECT", "GeometryMapper", "MaskedFace", "TransformConfig", "apply_transform",
    "overlay", "sample_transform",
    "StyleSet", "StyleWeights", "blend_style", "relaxed_distribution", "select_style",
    "Threshold", "VerificationModel", "calibrate_threshold", "distance", "embed", "verify",
]
