"""Continuous relaxation of discrete style choice.

A trainable logit vector w over K candidate styles is pushed through a
tempered softmax h = softmax(w / tau); training blends styles with h, and
inference hardens the choice to argmax(w). Small tau concentrates h toward
one-hot, shrinking the train/inference gap.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch

from .images import load_rgb


@dataclass
class StyleSet:
    """K candidate style images, ordered; names identify them in reports."""

    styles: torch.Tensor  # (K,3,H,W) in [0,1]
    names: list[str]

    def __post_init__(self):
        if self.styles.dim() != 4 or self.styles.shape[0] < 1:
            raise ValueError("styles must be a (K,3,H,W) stack with K >= 1")
        if len(self.names) != self.styles.shape[0]:
            raise ValueError("one name per style required")

    def __len__(self) -> int:
        return self.styles.shape[0]

    @classmethod
    def from_dir(cls, path: str | Path, size: tuple[int, int] = (112, 112)) -> "StyleSet":
        """Load every PNG in a directory, in lexicographic filename order."""
        path = Path(path)
        files = sorted(path.glob("*.png"))
        if not files:
            raise FileNotFoundError(f"no PNG style images in {path}")
        return cls(torch.stack([load_rgb(f, size=size) for f in files]), [f.stem for f in files])


@dataclass
class StyleWeights:
    """Unconstrained style logits w (length K) with softmax temperature tau."""

    w: torch.Tensor
    tau: float = 0.1

    def __post_init__(self):
        if self.w.dim() != 1 or self.w.shape[0] < 1:
            raise ValueError("w must be a 1-D vector of length K >= 1")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")

    @classmethod
    def zeros(cls, k: int, tau: float = 0.1, trainable: bool = True) -> "StyleWeights":
        return cls(torch.zeros(k, dtype=torch.float32, requires_grad=trainable), tau)


def relaxed_distribution(weights: StyleWeights) -> torch.Tensor:
    """Tempered softmax over the logits: h_i = exp(w_i/tau) / sum_j exp(w_j/tau).

    Computed with max-subtraction so extreme w/tau stays finite.
    """
    if not torch.isfinite(weights.w).all():
        raise ValueError("style weights must be finite")
    z = weights.w / weights.tau
    z = z - z.max()
    e = torch.exp(z)
    return e / e.sum()


def blend_style(h: torch.Tensor, styles: StyleSet) -> torch.Tensor:
    """Pixel-wise convex combination of the style images under weights h."""
    if h.shape[0] != len(styles):
        raise ValueError(f"got {h.shape[0]} weights for {len(styles)} styles")
    return torch.einsum("k,kchw->chw", h.to(styles.styles.dtype), styles.styles)


def select_style(weights: StyleWeights) -> int:
    """Hard style choice: argmax over w, ties broken by lowest index."""
    return int(weights.w.detach().cpu().numpy().argmax())
