"""Mask-on-face overlay and the random transformation family used during training.

The default geometry places the 60x112 mask over face rows 52..111. A UV
mapper accepts an externally produced per-face texel field (e.g. from a 3D
face position-map network) so the same attack composes with curved-surface
rendering; no such network is bundled.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .images import FACE_SHAPE, MASK_SHAPE

MASK_TOP_ROW = 52  # mask occupies rows 52..111 of the 112-row face


@dataclass(frozen=True)
class GeometryMapper:
    """Maps mask texels onto face pixels: a fixed bottom rectangle or a UV field."""

    kind: str = "fixed_rect"
    uv: torch.Tensor | None = None  # (112,112,2) texel coords in [0,1], uv_map only

    def __post_init__(self):
        if self.kind not in ("fixed_rect", "uv_map"):
            raise ValueError(f"unknown mapper kind {self.kind!r}")
        if self.kind == "uv_map":
            if self.uv is None or tuple(self.uv.shape) != (112, 112, 2):
                raise ValueError("uv_map mapper requires a (112,112,2) UV field")
            if not torch.isfinite(self.uv).all() or self.uv.min() < 0 or self.uv.max() > 1:
                raise ValueError("UV field values must be finite and in [0,1]")


FIXED_RECT = GeometryMapper("fixed_rect")


def load_uv_mapper(path: str | Path) -> GeometryMapper:
    """Load a UV field from a raw little-endian float32 file with a JSON sidecar.

    The sidecar `<path>.json` declares {"shape": [112,112,2], "dtype": "float32"}.
    Face pixels whose UV entry is exactly (0,0) are treated as unmapped.
    """
    path = Path(path)
    sidecar = path.with_suffix(path.suffix + ".json")
    if not sidecar.exists():
        raise FileNotFoundError(f"missing UV sidecar {sidecar}")
    meta = json.loads(sidecar.read_text())
    if tuple(meta.get("shape", ())) != (112, 112, 2) or meta.get("dtype") != "float32":
        raise ValueError(f"UV sidecar must declare shape [112,112,2] and dtype float32, got {meta}")
    raw = np.fromfile(path, dtype="<f4")
    if raw.size != 112 * 112 * 2:
        raise ValueError(f"UV file holds {raw.size} floats, expected {112 * 112 * 2}")
    return GeometryMapper("uv_map", torch.from_numpy(raw.reshape(112, 112, 2).copy()))


@dataclass
class MaskedFace:
    """A face with a mask overlaid, plus the boolean pixel region it covers."""

    pixels: torch.Tensor  # (3,112,112) or (N,3,112,112), values in [0,1]
    region_mask: torch.Tensor  # (112,112) bool

    def __post_init__(self):
        if self.pixels.shape[-3:] != torch.Size(FACE_SHAPE):
            raise ValueError(f"masked face pixels must end in {FACE_SHAPE}, got {tuple(self.pixels.shape)}")
        if tuple(self.region_mask.shape) != FACE_SHAPE[1:]:
            raise ValueError("region_mask must be (112,112)")


def _uv_sample(mask: torch.Tensor, uv: torch.Tensor) -> torch.Tensor:
    # Texel coords: u,v in [0,1] span the mask's pixel centers (corner-aligned grid).
    grid = (uv.to(mask.dtype) * 2.0 - 1.0).unsqueeze(0)
    sampled = F.grid_sample(mask.unsqueeze(0), grid, mode="bilinear", align_corners=True)
    return sampled.squeeze(0)


def overlay(face: torch.Tensor, mask: torch.Tensor, mapper: GeometryMapper = FIXED_RECT) -> MaskedFace:
    """Overlay a mask texture onto one face (3,112,112) or a batch (N,3,112,112).

    fixed_rect grafts the mask onto rows 52..111 and leaves rows 0..51
    untouched; uv_map samples mask texels through the field bilinearly.
    Differentiable with respect to the mask pixels in both modes.
    """
    if tuple(mask.shape) != MASK_SHAPE:
        raise ValueError(f"mask must have shape {MASK_SHAPE}, got {tuple(mask.shape)}")
    batched = face.dim() == 4
    faces = face if batched else face.unsqueeze(0)
    if faces.shape[1:] != torch.Size(FACE_SHAPE):
        raise ValueError(f"face must have shape {FACE_SHAPE}, got {tuple(face.shape)}")

    if mapper.kind == "fixed_rect":
        top = faces[:, :, :MASK_TOP_ROW, :]
        bottom = mask.unsqueeze(0).expand(faces.shape[0], -1, -1, -1)
        out = torch.cat([top, bottom.to(faces.dtype)], dim=2)
        region = torch.zeros(FACE_SHAPE[1:], dtype=torch.bool)
        region[MASK_TOP_ROW:, :] = True
    else:
        region = (mapper.uv != 0).any(dim=-1)
        sampled = _uv_sample(mask, mapper.uv)
        keep = region.to(faces.dtype).unsqueeze(0)
        out = faces * (1.0 - keep) + sampled.unsqueeze(0).to(faces.dtype) * keep

    return MaskedFace(out if batched else out.squeeze(0), region)


@dataclass(frozen=True)
class TransformConfig:
    """Ranges for the random training-time transforms (rotation, shift, noise, photometric)."""

    rotation_deg_range: tuple[float, float] = (-10.0, 10.0)
    translate_px_range: tuple[int, int] = (-4, 4)
    noise_sigma: float = 0.02
    brightness_delta_range: tuple[float, float] = (-0.1, 0.1)
    contrast_scale_range: tuple[float, float] = (0.9, 1.1)
    seed: int = 0

    def __post_init__(self):
        for name in ("rotation_deg_range", "translate_px_range", "brightness_delta_range", "contrast_scale_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} must be ordered lo <= hi, got ({lo}, {hi})")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


IDENTITY_TRANSFORM_CONFIG = TransformConfig((0.0, 0.0), (0, 0), 0.0, (0.0, 0.0), (1.0, 1.0))


@dataclass(frozen=True)
class TransformParams:
    rotation_deg: float
    translate_px: tuple[int, int]  # (dx, dy)
    noise_sigma: float
    noise_seed: int
    brightness_delta: float
    contrast_scale: float

    @property
    def is_identity_geometry(self) -> bool:
        return self.rotation_deg == 0.0 and self.translate_px == (0, 0)


def identity_params() -> TransformParams:
    return TransformParams(0.0, (0, 0), 0.0, 0, 0.0, 1.0)


def _uniform(lo: float, hi: float, rng: torch.Generator) -> float:
    if lo == hi:
        return float(lo)
    return float(lo + (hi - lo) * torch.rand((), generator=rng).item())


def sample_transform(cfg: TransformConfig, rng: torch.Generator) -> TransformParams:
    """Draw one parameter set uniformly from the configured ranges."""
    rot = _uniform(*cfg.rotation_deg_range, rng)
    lo, hi = cfg.translate_px_range
    dx = int(torch.randint(lo, hi + 1, (), generator=rng).item())
    dy = int(torch.randint(lo, hi + 1, (), generator=rng).item())
    noise_seed = int(torch.randint(0, 2**31 - 1, (), generator=rng).item())
    db = _uniform(*cfg.brightness_delta_range, rng)
    cs = _uniform(*cfg.contrast_scale_range, rng)
    return TransformParams(rot, (dx, dy), cfg.noise_sigma, noise_seed, db, cs)


def _affine_theta(params: TransformParams, width: int, height: int, dtype, device) -> torch.Tensor:
    # Sampling grid for "rotate content by +deg about center, then shift by (dx,dy) px":
    # output pixel p samples input at R(-deg) @ (p - t), in normalized coordinates.
    rad = math.radians(params.rotation_deg)
    cos, sin = math.cos(rad), math.sin(rad)
    dx, dy = params.translate_px
    tx = 2.0 * dx / width
    ty = 2.0 * dy / height
    theta = torch.tensor(
        [[cos, sin, -cos * tx - sin * ty], [-sin, cos, sin * tx - cos * ty]],
        dtype=dtype,
        device=device,
    )
    return theta


def _warp(pixels: torch.Tensor, theta: torch.Tensor) -> torch.Tensor:
    grid = F.affine_grid(theta.unsqueeze(0).expand(pixels.shape[0], -1, -1), list(pixels.shape), align_corners=False)
    return F.grid_sample(pixels, grid, mode="bilinear", padding_mode="zeros", align_corners=False)


def apply_transform(img: MaskedFace, params: TransformParams) -> MaskedFace:
    """Apply rotation, translation, Gaussian noise, brightness, contrast; clip to [0,1].

    Identity parameters return the input bit-exactly. The geometric warp uses
    one bilinear resample with zero padding; the region mask is warped with
    the same grid and thresholded at 0.5.
    """
    batched = img.pixels.dim() == 4
    pixels = img.pixels if batched else img.pixels.unsqueeze(0)
    region = img.region_mask

    if not params.is_identity_geometry:
        _, _, h, w = pixels.shape
        theta = _affine_theta(params, w, h, pixels.dtype, pixels.device)
        pixels = _warp(pixels, theta)
        region_f = _warp(region.to(pixels.dtype)[None, None], theta)
        region = region_f.squeeze(0).squeeze(0) > 0.5

    if params.noise_sigma > 0:
        gen = torch.Generator().manual_seed(params.noise_seed)
        noise = torch.randn(pixels.shape, generator=gen, dtype=pixels.dtype) * params.noise_sigma
        pixels = pixels + noise.to(pixels.device)

    if params.brightness_delta != 0.0:
        pixels = pixels + params.brightness_delta
    if params.contrast_scale != 1.0:
        pixels = 0.5 + (pixels - 0.5) * params.contrast_scale

    if params != identity_params():
        pixels = pixels.clamp(0.0, 1.0)

    return MaskedFace(pixels if batched else pixels.squeeze(0), region)


def apply_transform_batch(pixels: torch.Tensor, params_list: list[TransformParams]) -> torch.Tensor:
    """Per-sample transforms on a (N,3,H,W) batch; one grid_sample call for the warps."""
    n, _, h, w = pixels.shape
    if len(params_list) != n:
        raise ValueError(f"need {n} parameter sets, got {len(params_list)}")
    if all(p.is_identity_geometry for p in params_list):
        out = pixels
    else:
        thetas = torch.stack([_affine_theta(p, w, h, pixels.dtype, pixels.device) for p in params_list])
        grid = F.affine_grid(thetas, list(pixels.shape), align_corners=False)
        out = F.grid_sample(pixels, grid, mode="bilinear", padding_mode="zeros", align_corners=False)

    if any(p.noise_sigma > 0 for p in params_list):
        noise = torch.zeros_like(out)
        for i, p in enumerate(params_list):
            if p.noise_sigma > 0:
                gen = torch.Generator().manual_seed(p.noise_seed)
                noise[i] = torch.randn(out.shape[1:], generator=gen, dtype=out.dtype) * p.noise_sigma
        out = out + noise

    db = torch.tensor([[p.brightness_delta] for p in params_list], dtype=out.dtype).view(n, 1, 1, 1)
    cs = torch.tensor([[p.contrast_scale] for p in params_list], dtype=out.dtype).view(n, 1, 1, 1)
    out = 0.5 + (out + db - 0.5) * cs
    return out.clamp(0.0, 1.0)
