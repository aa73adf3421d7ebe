"""Loss terms driving the attack and its stealth constraints.

The recognition term pulls the masked face's embedding toward the target;
the L1, total-variation, content and style terms keep the generated mask
close to the benign one, smooth, content-preserving, and on-style. All four
stealth terms are normalized by their summation-domain size so the weight
defaults stay meaningful across resolutions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

ABS_SMOOTHING = 1e-12  # |d| := sqrt(d^2 + eps); keeps gradients finite at 0


@dataclass(frozen=True)
class LossWeights:
    """Scaling weights for the stealth terms; defaults follow the tuned values."""

    lambda_1: float = 100.0
    lambda_tv: float = 10.0
    lambda_c: float = 0.001
    lambda_s: float = 1000.0

    def __post_init__(self):
        if min(self.lambda_1, self.lambda_tv, self.lambda_c, self.lambda_s) < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass(frozen=True)
class LossBundle:
    """One evaluation of all loss terms plus their weighted total."""

    fr: float
    l1: float
    tv: float
    content: float
    style: float
    total: float

    def as_dict(self) -> dict[str, float]:
        return {"fr": self.fr, "l1": self.l1, "tv": self.tv, "content": self.content,
                "style": self.style, "total": self.total}


def fr_loss(embedding: torch.Tensor, target_embedding: torch.Tensor) -> torch.Tensor:
    """Cosine distance 1 - <e, e_t> between unit embeddings; batches are averaged.

    Accepts a single (D,) embedding or a (N,D) batch against one (D,) target.
    """
    if embedding.dim() == 1:
        embedding = embedding.unsqueeze(0)
    norms = embedding.norm(dim=-1)
    if norms.min() < 1e-8 or target_embedding.norm() < 1e-8:
        raise ValueError("zero-norm embedding")
    return (1.0 - embedding @ target_embedding).mean()


def l1_loss(m_adv: torch.Tensor, m_ori: torch.Tensor) -> torch.Tensor:
    """Mean absolute pixel difference (smoothed absolute value)."""
    if m_adv.shape != m_ori.shape:
        raise ValueError(f"shape mismatch {tuple(m_adv.shape)} vs {tuple(m_ori.shape)}")
    d = m_adv - m_ori
    return torch.sqrt(d * d + ABS_SMOOTHING).mean()


def tv_loss(m: torch.Tensor) -> torch.Tensor:
    """Joint total variation: mean over interior positions of
    sqrt((m[i,j]-m[i+1,j])^2 + (m[i,j]-m[i,j+1])^2).

    Summation runs over positions where both forward neighbors exist,
    i in [0,H-2], j in [0,W-2], per channel; normalized by that count.
    """
    h, w = m.shape[-2], m.shape[-1]
    if h < 2 or w < 2:
        raise ValueError("tv_loss needs height and width >= 2")
    dv = m[..., :-1, :-1] - m[..., 1:, :-1]
    dh = m[..., :-1, :-1] - m[..., :-1, 1:]
    return torch.sqrt(dv * dv + dh * dh + ABS_SMOOTHING).mean()


def content_loss(fe, m_adv_canvas: torch.Tensor, content_canvas: torch.Tensor) -> torch.Tensor:
    """Sum over content layers of the mean squared feature difference.

    Both inputs must already be normalized for the extractor.
    """
    fa = fe(m_adv_canvas)
    fb = fe(content_canvas)
    total = None
    for layer in fe.content_layers:
        term = ((fa[layer] - fb[layer]) ** 2).mean()
        total = term if total is None else total + term
    return total


def style_loss(fe, m_adv_canvas: torch.Tensor, style_image: torch.Tensor) -> torch.Tensor:
    """Sum over style layers of the squared Frobenius distance between Gram matrices.

    Inputs normalized for the extractor; spatial sizes may differ.
    """
    from .generator import gram

    fa = fe(m_adv_canvas)
    fb = fe(style_image)
    total = None
    for layer in fe.style_layers:
        # sum over Gram entries; batched inputs are averaged over the batch
        term = ((gram(fa[layer]) - gram(fb[layer])) ** 2).sum(dim=(-2, -1)).mean()
        total = term if total is None else total + term
    return total


def weighted_total(fr, l1, tv, content, style, weights: LossWeights):
    """fr + l1*lambda_1 + tv*lambda_tv + content*lambda_c + style*lambda_s."""
    return (fr + weights.lambda_1 * l1 + weights.lambda_tv * tv
            + weights.lambda_c * content + weights.lambda_s * style)


def total_loss(fr: float, l1: float, tv: float, content: float, style: float,
               weights: LossWeights) -> LossBundle:
    """Combine raw term values into a LossBundle; rejects non-finite parts."""
    parts = (fr, l1, tv, content, style)
    if not all(math.isfinite(p) for p in parts):
        raise ValueError(f"non-finite loss part in {parts}")
    return LossBundle(fr, l1, tv, content, style, float(weighted_total(*parts, weights)))
