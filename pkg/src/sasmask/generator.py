"""The style mask generator network, the frozen feature extractor, Gram
matrices, and benign style-transfer pretraining.

The generator is a fixed 7-stage encoder/residual/decoder net mapping a
(3,112,112) canvas to a (3,112,112) canvas; the mask band is cropped out of
the result. It is conditioned on content only; the chosen style enters
through the training objective, so one generator instance serves one
optimized style mixture.
"""

from __future__ import annotations

import contextlib
from pathlib import Path
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint as ckpt
from .images import EXTRACTOR_NORM, FR_NORM, normalize
from .losses import content_loss, style_loss, tv_loss
from .overlay import MASK_TOP_ROW

# Per-stage output shapes for a (3,112,112) input.
GENERATOR_STAGE_SHAPES = [
    (32, 112, 112),
    (64, 56, 56),
    (128, 28, 28),
    (128, 28, 28),
    (64, 56, 56),
    (32, 112, 112),
    (3, 112, 112),
]


class _DownConv(nn.Module):
    # k=3 stride-2 conv with asymmetric (left 0, right 1, top 0, bottom 1) zero padding
    def __init__(self, cin, cout):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, stride=2, padding=0)
        self.norm = nn.InstanceNorm2d(cout, affine=True)

    def forward(self, x):
        return F.relu(self.norm(self.conv(F.pad(x, (0, 1, 0, 1)))))


class _ResidualBlock(nn.Module):
    # conv+IN+ReLU, conv+IN, then residual addition (no ReLU after the add)
    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm1 = nn.InstanceNorm2d(channels, affine=True)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = nn.InstanceNorm2d(channels, affine=True)

    def forward(self, x):
        y = F.relu(self.norm1(self.conv1(x)))
        return self.norm2(self.conv2(y)) + x


class _UpConv(nn.Module):
    # nearest-neighbor upsample x2 then k=3 conv
    def __init__(self, cin, cout):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm = nn.InstanceNorm2d(cout, affine=True)

    def forward(self, x):
        return F.relu(self.norm(self.conv(F.interpolate(x, scale_factor=2))))


class StyleMaskGenerator(nn.Module):
    """Seven-stage mask generator; consumes FR-normalized pixels, emits (0,1) via sigmoid."""

    def __init__(self, seed: int | None = None):
        super().__init__()
        with contextlib.ExitStack() as stack:
            if seed is not None:
                stack.enter_context(torch.random.fork_rng())
                torch.manual_seed(seed)
            self.stage1 = nn.Sequential(
                nn.Conv2d(3, 32, 9, padding=4), nn.InstanceNorm2d(32, affine=True), nn.ReLU())
            self.stage2 = _DownConv(32, 64)
            self.stage3 = _DownConv(64, 128)
            self.stage4 = nn.Sequential(*[_ResidualBlock(128) for _ in range(5)])
            self.stage5 = _UpConv(128, 64)
            self.stage6 = _UpConv(64, 32)
            self.stage7 = nn.Sequential(
                nn.Conv2d(32, 3, 9, padding=4), nn.InstanceNorm2d(3, affine=True), nn.Sigmoid())

    def stage_outputs(self, x: torch.Tensor) -> list[torch.Tensor]:
        outs = []
        for stage in (self.stage1, self.stage2, self.stage3, self.stage4,
                      self.stage5, self.stage6, self.stage7):
            x = stage(x)
            outs.append(x)
        return outs

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-3:] != (3, 112, 112):
            raise ValueError(f"generator input must end in (3,112,112), got {tuple(x.shape)}")
        return self.stage_outputs(x)[-1]

    def clone(self) -> "StyleMaskGenerator":
        other = StyleMaskGenerator(seed=0)  # init is overwritten; seeded to spare the global RNG
        other.load_state_dict({k: v.clone() for k, v in self.state_dict().items()})
        return other


def content_canvas(content: torch.Tensor) -> torch.Tensor:
    """Place a (3,60,112) content pattern into the bottom band of a mid-gray canvas."""
    canvas = torch.full((3, 112, 112), 0.5, dtype=content.dtype)
    canvas[:, MASK_TOP_ROW:, :] = content
    return canvas


def extract_mask(generator: StyleMaskGenerator, content: torch.Tensor,
                 style: torch.Tensor | None = None) -> torch.Tensor:
    """Run the generator on the content canvas and crop the (3,60,112) mask band.

    `style` is accepted for signature parity but does not enter generation:
    style conditioning lives in the training objective.
    """
    if tuple(content.shape) != (3, 60, 112):
        raise ValueError(f"content must be (3,60,112), got {tuple(content.shape)}")
    canvas = content_canvas(content)
    out = generator(normalize(canvas, FR_NORM).unsqueeze(0)).squeeze(0)
    return out[:, MASK_TOP_ROW:, :]


# VGG-16-class convolution widths; pools follow convs 2, 4, 7 and 10.
_VGG16_CHANNELS = (64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512)
_POOL_AFTER = frozenset({2, 4, 7, 10})
DEFAULT_FEATURE_LAYERS = (2, 4, 7, 10)


class FeatureExtractor(nn.Module):
    """Frozen conv stack exposing the ReLU outputs of selected layers.

    Inputs are expected normalized with the extractor statistics. The desk
    configuration uses narrow random frozen weights so nothing needs
    downloading; real pretrained weights load through the checkpoint layout.
    """

    def __init__(self, channels: Sequence[int], content_layers: Sequence[int] = DEFAULT_FEATURE_LAYERS,
                 style_layers: Sequence[int] = DEFAULT_FEATURE_LAYERS, seed: int | None = None):
        super().__init__()
        self.content_layers = tuple(content_layers)
        self.style_layers = tuple(style_layers)
        self.tap_layers = tuple(sorted(set(self.content_layers) | set(self.style_layers)))
        depth = max(self.tap_layers)
        if depth > len(channels) or min(self.tap_layers) < 1:
            raise ValueError(f"layer indices {self.tap_layers} outside network depth {len(channels)}")
        self.channels = tuple(channels)
        with contextlib.ExitStack() as stack:
            if seed is not None:
                stack.enter_context(torch.random.fork_rng())
                torch.manual_seed(seed)
            convs = []
            cin = 3
            for cout in self.channels[:depth]:
                convs.append(nn.Conv2d(cin, cout, 3, padding=1))
                cin = cout
            self.convs = nn.ModuleList(convs)
        self.requires_grad_(False)
        self.eval()

    def forward(self, img: torch.Tensor) -> dict[int, torch.Tensor]:
        single = img.dim() == 3
        x = img.unsqueeze(0) if single else img
        taps = {}
        for i, conv in enumerate(self.convs, start=1):
            x = F.relu(conv(x))
            if i in self.tap_layers:
                taps[i] = x.squeeze(0) if single else x
            if i in _POOL_AFTER:
                x = F.max_pool2d(x, 2)
        return taps


def extract_features(fe: FeatureExtractor, img: torch.Tensor) -> dict[int, torch.Tensor]:
    """Feature maps of `img` at the extractor's configured layers."""
    return fe(img)


def random_feature_extractor(seed: int = 0, width_divisor: int = 8,
                             layers: Sequence[int] = DEFAULT_FEATURE_LAYERS) -> FeatureExtractor:
    """Narrow frozen extractor with seeded random weights (offline desk default)."""
    channels = tuple(max(4, c // width_divisor) for c in _VGG16_CHANNELS)
    return FeatureExtractor(channels, layers, layers, seed=seed)


def save_feature_extractor(fe: FeatureExtractor, path: str | Path) -> Path:
    return ckpt.save_checkpoint(fe, path, kind="feature_extractor", meta={
        "channels": list(fe.channels),
        "content_layers": list(fe.content_layers),
        "style_layers": list(fe.style_layers),
    })


def load_feature_extractor(path: str | Path) -> FeatureExtractor:
    state, manifest = ckpt.load_state_dict(path)
    meta = manifest["meta"]
    fe = FeatureExtractor(meta["channels"], meta["content_layers"], meta["style_layers"], seed=0)
    fe.load_state_dict(state)
    fe.requires_grad_(False)
    return fe


def gram(features: torch.Tensor) -> torch.Tensor:
    """Gram matrix G[i,j] = sum_hw f_i f_j / (C*H*W) for (C,H,W) or (N,C,H,W) features."""
    single = features.dim() == 3
    f = features.unsqueeze(0) if single else features
    n, c, h, w = f.shape
    flat = f.reshape(n, c, h * w)
    g = flat @ flat.transpose(1, 2) / (c * h * w)
    return g.squeeze(0) if single else g


def save_generator(generator: StyleMaskGenerator, path: str | Path, meta: dict | None = None) -> Path:
    return ckpt.save_checkpoint(generator, path, kind="style_mask_generator", meta=meta)


def load_generator(path: str | Path) -> StyleMaskGenerator:
    state, manifest = ckpt.load_state_dict(path)
    if manifest.get("kind") != "style_mask_generator":
        raise ValueError(f"checkpoint at {path} is not a style mask generator")
    gen = StyleMaskGenerator(seed=0)
    gen.load_state_dict(state)
    return gen


def pretrain_style_generator(content_corpus: torch.Tensor, style_image: torch.Tensor,
                             fe: FeatureExtractor, lambda_c: float, lambda_s: float,
                             lambda_tv: float, *, epochs: int = 60, batch_size: int = 4,
                             lr: float = 1e-2, patience: int = 7, seed: int = 0,
                             log=None) -> StyleMaskGenerator:
    """Train a benign style-transfer generator on a content corpus.

    Minimizes lambda_c*content + lambda_s*style + lambda_tv*tv until the
    epoch cap or `patience` stale epochs. The returned generator is frozen.
    """
    if content_corpus.dim() != 4 or content_corpus.shape[0] < 1:
        raise ValueError("content corpus must be a non-empty (N,3,112,112) stack")
    gen = StyleMaskGenerator(seed=seed)
    opt = torch.optim.Adam(gen.parameters(), lr=lr)
    order_rng = torch.Generator().manual_seed(seed)
    style_norm = normalize(style_image, EXTRACTOR_NORM)

    n = content_corpus.shape[0]
    best = float("inf")
    stale = 0
    for epoch in range(epochs):
        order = torch.randperm(n, generator=order_rng)
        epoch_loss = 0.0
        batches = 0
        for start in range(0, n, batch_size):
            batch = content_corpus[order[start:start + batch_size]]
            out = gen(normalize(batch, FR_NORM))
            out_norm = normalize(out, EXTRACTOR_NORM)
            loss = (lambda_c * content_loss(fe, out_norm, normalize(batch, EXTRACTOR_NORM))
                    + lambda_s * style_loss(fe, out_norm, style_norm)
                    + lambda_tv * tv_loss(out))
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss)
            batches += 1
        epoch_loss /= batches
        if log is not None:
            log(f"pretrain epoch {epoch}: loss {epoch_loss:.5f}")
        if epoch_loss < best - 1e-6:
            best = epoch_loss
            stale = 0
        else:
            stale += 1
            if stale >= patience:
                break
    gen.requires_grad_(False)
    gen.eval()
    return gen
