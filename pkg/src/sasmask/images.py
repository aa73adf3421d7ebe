"""Image types, PNG I/O, and the two channel-normalization regimes.

All pixel data is float in [0,1] internally; 8-bit only at file boundaries.
Faces are (3,112,112), mask patterns (3,60,112).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

FACE_SHAPE = (3, 112, 112)
MASK_SHAPE = (3, 60, 112)


@dataclass(frozen=True)
class NormalizationSpec:
    """Per-channel affine normalization (x - mean) / std."""

    mean: tuple[float, float, float]
    std: tuple[float, float, float]

    def __post_init__(self):
        if len(self.mean) != 3 or len(self.std) != 3:
            raise ValueError("mean and std must each have 3 components")
        if any(s <= 0 for s in self.std):
            raise ValueError("std components must be strictly positive")


# Verification models consume (x - 0.5) / 0.5; the feature extractor uses
# the ImageNet statistics.
FR_NORM = NormalizationSpec((0.5, 0.5, 0.5), (0.5, 0.5, 0.5))
EXTRACTOR_NORM = NormalizationSpec((0.485, 0.456, 0.406), (0.229, 0.224, 0.225))


def _check_pixels(pixels: torch.Tensor, shape: tuple[int, int, int], what: str) -> None:
    if tuple(pixels.shape) != shape:
        raise ValueError(f"{what} pixels must have shape {shape}, got {tuple(pixels.shape)}")
    if not torch.isfinite(pixels).all():
        raise ValueError(f"{what} pixels contain non-finite values")
    if pixels.min() < 0 or pixels.max() > 1:
        raise ValueError(f"{what} pixels must lie in [0,1]")


@dataclass
class FaceImage:
    """An aligned 112x112 RGB face in [0,1], optionally labeled with its identity."""

    pixels: torch.Tensor
    identity_label: str | None = None

    def __post_init__(self):
        _check_pixels(self.pixels, FACE_SHAPE, "face")


@dataclass
class MaskPattern:
    """A 60x112 RGB mask texture in [0,1]."""

    pixels: torch.Tensor

    def __post_init__(self):
        _check_pixels(self.pixels, MASK_SHAPE, "mask")


def load_rgb(path: str | Path, size: tuple[int, int] | None = None) -> torch.Tensor:
    """Load an 8-bit RGB PNG as a (3,H,W) float tensor in [0,1].

    Resizes with bilinear interpolation (align_corners=False) when `size`
    (h, w) differs from the file's resolution. Non-RGB rasters are rejected.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such image file: {path}")
    try:
        img = Image.open(path)
        img.load()
    except Exception as exc:
        raise ValueError(f"undecodable image data in {path}: {exc}") from exc
    if img.mode != "RGB":
        raise ValueError(f"wrong channel count: expected 8-bit RGB, got mode {img.mode!r} in {path}")
    arr = np.asarray(img, dtype=np.float32) / 255.0
    pixels = torch.from_numpy(arr).permute(2, 0, 1).contiguous()
    if size is not None and tuple(pixels.shape[1:]) != tuple(size):
        pixels = F.interpolate(
            pixels.unsqueeze(0), size=tuple(size), mode="bilinear", align_corners=False
        ).squeeze(0)
        pixels = pixels.clamp(0.0, 1.0)
    return pixels


def load_image(path: str | Path, expected_shape: tuple[int, int] = (112, 112)) -> FaceImage | MaskPattern:
    """Load a face (112,112) or mask pattern (60,112) from a PNG file."""
    pixels = load_rgb(path, size=expected_shape)
    if expected_shape == FACE_SHAPE[1:]:
        return FaceImage(pixels)
    if expected_shape == MASK_SHAPE[1:]:
        return MaskPattern(pixels)
    raise ValueError(f"expected_shape must be {FACE_SHAPE[1:]} or {MASK_SHAPE[1:]}, got {expected_shape}")


def quantize(pixels: torch.Tensor) -> np.ndarray:
    """Map [0,1] floats to uint8, rounding halves away from zero (0.5 -> 128)."""
    arr = pixels.detach().cpu().numpy()
    return np.clip(np.floor(arr * 255.0 + 0.5), 0, 255).astype(np.uint8)


def save_image(img: torch.Tensor | FaceImage | MaskPattern, path: str | Path) -> None:
    """Write a [0,1] image as an 8-bit RGB PNG (no alpha)."""
    pixels = img.pixels if isinstance(img, (FaceImage, MaskPattern)) else img
    if pixels.dim() != 3 or pixels.shape[0] != 3:
        raise ValueError(f"expected (3,H,W) pixels, got {tuple(pixels.shape)}")
    if pixels.min() < 0 or pixels.max() > 1:
        raise ValueError("pixels must lie in [0,1] before saving")
    arr = quantize(pixels).transpose(1, 2, 0)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def normalize(img: torch.Tensor, spec: NormalizationSpec) -> torch.Tensor:
    """Apply (img - mean) / std per channel; accepts (3,H,W) or (N,3,H,W)."""
    mean = torch.as_tensor(spec.mean, dtype=img.dtype, device=img.device).view(3, 1, 1)
    std = torch.as_tensor(spec.std, dtype=img.dtype, device=img.device).view(3, 1, 1)
    return (img - mean) / std


def denormalize(img: torch.Tensor, spec: NormalizationSpec) -> torch.Tensor:
    """Inverse of :func:`normalize`."""
    mean = torch.as_tensor(spec.mean, dtype=img.dtype, device=img.device).view(3, 1, 1)
    std = torch.as_tensor(spec.std, dtype=img.dtype, device=img.device).view(3, 1, 1)
    return img * std + mean
