"""Victim face-verification models: desk-scale backbones, margin heads,
embedding extraction, cosine distance, and K-fold threshold calibration.

Two small backbones (a residual CNN and a depthwise-separable CNN) and two
margin heads stand in for full-scale stacks; externally trained checkpoints
load through the same manifest layout.
"""

from __future__ import annotations

import contextlib
import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint as ckpt
from .images import FR_NORM, load_rgb, normalize


class _ResBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = (nn.Conv2d(cin, cout, 1, stride, bias=False)
                         if stride != 1 or cin != cout else nn.Identity())

    def forward(self, x):
        y = F.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        return F.relu(y + self.shortcut(x))


class ResidualBackbone(nn.Module):
    """Six residual blocks over a strided stem; global pooling into the embedding."""

    def __init__(self, embedding_dim=128):
        super().__init__()
        self.stem = nn.Conv2d(3, 16, 3, 2, 1, bias=False)
        self.bn = nn.BatchNorm2d(16)
        self.blocks = nn.Sequential(
            _ResBlock(16, 16, 1), _ResBlock(16, 32, 2), _ResBlock(32, 32, 1),
            _ResBlock(32, 64, 2), _ResBlock(64, 64, 1), _ResBlock(64, 128, 2))
        self.fc = nn.Linear(128, embedding_dim)

    def forward(self, x):
        x = F.relu(self.bn(self.stem(x)))
        x = self.blocks(x)
        x = F.adaptive_avg_pool2d(x, 1).flatten(1)
        return self.fc(x)


class _DwBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.dw = nn.Conv2d(cin, cin, 3, stride, 1, groups=cin, bias=False)
        self.bn1 = nn.BatchNorm2d(cin)
        self.pw = nn.Conv2d(cin, cout, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)

    def forward(self, x):
        x = F.relu(self.bn1(self.dw(x)))
        return F.relu(self.bn2(self.pw(x)))


class DepthwiseBackbone(nn.Module):
    """Depthwise-separable CNN in the mobile-network style."""

    def __init__(self, embedding_dim=128):
        super().__init__()
        self.stem = nn.Conv2d(3, 16, 3, 2, 1, bias=False)
        self.bn = nn.BatchNorm2d(16)
        self.blocks = nn.Sequential(
            _DwBlock(16, 32, 1), _DwBlock(32, 64, 2), _DwBlock(64, 64, 1),
            _DwBlock(64, 128, 2), _DwBlock(128, 128, 1), _DwBlock(128, 128, 2))
        self.fc = nn.Linear(128, embedding_dim)

    def forward(self, x):
        x = F.relu(self.bn(self.stem(x)))
        x = self.blocks(x)
        x = F.adaptive_avg_pool2d(x, 1).flatten(1)
        return self.fc(x)


class ArcMarginHead(nn.Module):
    """Additive angular margin: logits s*cos(theta + m) on the true class."""

    def __init__(self, embedding_dim, n_classes, s=16.0, m=0.3):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(n_classes, embedding_dim))
        nn.init.xavier_uniform_(self.weight)
        self.s, self.m = s, m

    def cosine(self, embeddings):
        return F.normalize(embeddings, dim=1) @ F.normalize(self.weight, dim=1).t()

    def forward(self, embeddings, labels):
        cos = self.cosine(embeddings).clamp(-1 + 1e-7, 1 - 1e-7)
        theta = torch.acos(cos)
        target = torch.cos(theta + self.m)
        onehot = F.one_hot(labels, cos.shape[1]).to(cos.dtype)
        return self.s * (onehot * target + (1 - onehot) * cos)


class CosMarginHead(nn.Module):
    """Large-margin cosine: logits s*(cos(theta) - m) on the true class."""

    def __init__(self, embedding_dim, n_classes, s=16.0, m=0.25):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(n_classes, embedding_dim))
        nn.init.xavier_uniform_(self.weight)
        self.s, self.m = s, m

    def cosine(self, embeddings):
        return F.normalize(embeddings, dim=1) @ F.normalize(self.weight, dim=1).t()

    def forward(self, embeddings, labels):
        cos = self.cosine(embeddings)
        onehot = F.one_hot(labels, cos.shape[1]).to(cos.dtype)
        return self.s * (cos - self.m * onehot)


BACKBONES: dict[str, Callable[[int], nn.Module]] = {
    "desk_resnet": ResidualBackbone,
    "desk_dwsep": DepthwiseBackbone,
}
HEADS: dict[str, Callable[..., nn.Module]] = {
    "arc_margin": ArcMarginHead,
    "cos_margin": CosMarginHead,
}


class VerificationModel(nn.Module):
    """Frozen backbone (+ optional training head) producing unit embeddings."""

    def __init__(self, backbone_id: str, head_id: str, embedding_dim: int = 128,
                 n_classes: int | None = None, seed: int | None = None):
        super().__init__()
        if backbone_id not in BACKBONES:
            raise KeyError(f"unknown backbone {backbone_id!r}; registered: {sorted(BACKBONES)}")
        if head_id not in HEADS:
            raise KeyError(f"unknown head {head_id!r}; registered: {sorted(HEADS)}")
        self.backbone_id = backbone_id
        self.head_id = head_id
        self.embedding_dim = embedding_dim
        self.train_accuracy: float | None = None
        with contextlib.ExitStack() as stack:
            if seed is not None:
                stack.enter_context(torch.random.fork_rng())
                torch.manual_seed(seed)
            self.backbone = BACKBONES[backbone_id](embedding_dim)
            self.head = HEADS[head_id](embedding_dim, n_classes) if n_classes else None

    def forward(self, normalized: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.backbone(normalized), dim=1)

    def freeze(self):
        self.requires_grad_(False)
        self.eval()
        return self


def embed(model: VerificationModel, face: torch.Tensor) -> torch.Tensor:
    """Unit embedding of a [0,1] face (3,112,112) or batch (N,3,112,112).

    The FR normalization (mean 0.5, std 0.5) is applied before the backbone;
    gradients flow back to the input pixels.
    """
    single = face.dim() == 3
    x = face.unsqueeze(0) if single else face
    e = model(normalize(x, FR_NORM))
    return e.squeeze(0) if single else e


def distance(e1: torch.Tensor, e2: torch.Tensor) -> torch.Tensor:
    """Cosine distance 1 - <e1, e2> between unit embeddings (broadcasts over batches)."""
    return 1.0 - (e1 * e2).sum(dim=-1)


@dataclass(frozen=True)
class Threshold:
    """Calibrated verification cutoff with its cross-validated accuracy."""

    kappa: float
    calibration_folds: int
    calibration_accuracy: float


def verify(model: VerificationModel, face: torch.Tensor, target_face: torch.Tensor,
           threshold: Threshold) -> bool:
    """True iff the face's embedding lies strictly within kappa of the target's."""
    d = float(distance(embed(model, face), embed(model, target_face)))
    return d < threshold.kappa


def _accuracy(distances: np.ndarray, same: np.ndarray, kappa: float) -> float:
    pred_same = distances < kappa
    return float((pred_same == same).mean())


def calibrate_threshold_from_distances(distances: Sequence[float], same: Sequence[bool],
                                       pair_ids: Sequence[str], k_folds: int = 5,
                                       n_grid: int = 512) -> Threshold:
    """Grid-search kappa by K-fold cross validation over precomputed pair distances.

    Folds are assigned by sorted content hash of the pair IDs, so pair order
    never changes the result. Each fold's optimum maximizes accuracy on the
    other folds; the final kappa is the mean of the per-fold optima and the
    reported accuracy is the mean held-out accuracy.
    """
    distances = np.asarray(distances, dtype=np.float64)
    same = np.asarray(same, dtype=bool)
    if k_folds < 2:
        raise ValueError("need at least 2 folds")
    if same.all() or (~same).any() is False or not same.any():
        raise ValueError("need pairs of both classes (same and different identity)")
    if len(distances) < 2 * k_folds:
        raise ValueError("too few pairs for the requested fold count")

    order = np.argsort([hashlib.sha256(pid.encode()).hexdigest() for pid in pair_ids])
    folds = np.empty(len(distances), dtype=int)
    folds[order] = np.arange(len(distances)) % k_folds

    lo, hi = float(distances.min()), float(distances.max())
    # One candidate epsilon above the largest distance keeps the all-same
    # prediction reachable under the strict d < kappa rule.
    candidates = np.append(np.linspace(lo, hi, n_grid), hi + 1e-9)

    kappas, held_out = [], []
    for f in range(k_folds):
        train = folds != f
        accs = [_accuracy(distances[train], same[train], k) for k in candidates]
        best = candidates[int(np.argmax(accs))]
        kappas.append(best)
        held_out.append(_accuracy(distances[~train], same[~train], best))
    return Threshold(float(np.mean(kappas)), k_folds, float(np.mean(held_out)))


def _pair_id(a: torch.Tensor, b: torch.Tensor, same: bool) -> str:
    h = hashlib.sha256()
    h.update(a.detach().cpu().numpy().tobytes())
    h.update(b.detach().cpu().numpy().tobytes())
    h.update(b"1" if same else b"0")
    return h.hexdigest()


def calibrate_threshold(model: VerificationModel,
                        labeled_pairs: Sequence[tuple[torch.Tensor, torch.Tensor, bool]],
                        k_folds: int = 5) -> Threshold:
    """Calibrate kappa from (face_a, face_b, same_identity) image pairs."""
    a = torch.stack([p[0] for p in labeled_pairs])
    b = torch.stack([p[1] for p in labeled_pairs])
    same = [bool(p[2]) for p in labeled_pairs]
    with torch.no_grad():
        d = distance(embed(model, a), embed(model, b))
    ids = [_pair_id(p[0], p[1], bool(p[2])) for p in labeled_pairs]
    return calibrate_threshold_from_distances(d.numpy(), same, ids, k_folds)


def read_pairs_csv(path: str | Path) -> list[tuple[torch.Tensor, torch.Tensor, bool]]:
    """Load a pair list CSV with columns (path_a, path_b, same_identity in {0,1})."""
    path = Path(path)
    pairs = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().lower() == "path_a":
                continue
            pa, pb, flag = row[0].strip(), row[1].strip(), int(row[2])
            base = path.parent
            pairs.append((load_rgb(base / pa if not Path(pa).is_absolute() else pa, (112, 112)),
                          load_rgb(base / pb if not Path(pb).is_absolute() else pb, (112, 112)),
                          bool(flag)))
    if not pairs:
        raise ValueError(f"no pairs in {path}")
    return pairs


class FaceDirectory:
    """Faces organized as <root>/<identity>/<image>.png."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.identities = sorted(d.name for d in self.root.iterdir() if d.is_dir())
        if not self.identities:
            raise FileNotFoundError(f"no identity subdirectories under {self.root}")
        self.files: list[tuple[Path, int]] = []
        for label, ident in enumerate(self.identities):
            for f in sorted((self.root / ident).glob("*.png")):
                self.files.append((f, label))

    def load(self) -> tuple[torch.Tensor, torch.Tensor]:
        pixels = torch.stack([load_rgb(f, (112, 112)) for f, _ in self.files])
        labels = torch.tensor([lab for _, lab in self.files], dtype=torch.long)
        return pixels, labels


def load_faces(path: str | Path) -> torch.Tensor:
    """Flat or per-identity directory of PNGs -> (N,3,112,112) stack."""
    path = Path(path)
    files = sorted(path.rglob("*.png"))
    if not files:
        raise FileNotFoundError(f"no PNG faces under {path}")
    return torch.stack([load_rgb(f, (112, 112)) for f in files])


def train_victim(dataset: FaceDirectory | tuple[torch.Tensor, torch.Tensor], backbone_id: str,
                 head_id: str, epochs: int = 40, *, batch_size: int = 32, lr: float = 1e-3,
                 embedding_dim: int = 128, seed: int = 0, log=None) -> VerificationModel:
    """Train a verification model by margin-head classification and freeze it.

    Requires at least 10 identities with 20 images each. The reported
    train_accuracy uses plain (margin-free) cosine logits.
    """
    pixels, labels = dataset.load() if isinstance(dataset, FaceDirectory) else dataset
    counts = torch.bincount(labels)
    if len(counts) < 10:
        raise ValueError(f"need >= 10 identities, got {len(counts)}")
    if int(counts.min()) < 20:
        raise ValueError(f"need >= 20 images per identity, smallest has {int(counts.min())}")

    model = VerificationModel(backbone_id, head_id, embedding_dim, n_classes=len(counts), seed=seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    rng = torch.Generator().manual_seed(seed)
    x_norm = normalize(pixels, FR_NORM)

    model.train()
    for epoch in range(epochs):
        order = torch.randperm(len(labels), generator=rng)
        total, correct, loss_sum = 0, 0, 0.0
        for start in range(0, len(labels), batch_size):
            idx = order[start:start + batch_size]
            emb = F.normalize(model.backbone(x_norm[idx]), dim=1)
            logits = model.head(emb, labels[idx])
            loss = F.cross_entropy(logits, labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            loss_sum += float(loss) * len(idx)
            total += len(idx)
        if log is not None:
            log(f"victim epoch {epoch}: loss {loss_sum / total:.4f}")

    model.eval()
    with torch.no_grad():
        cos = model.head.cosine(model(x_norm))
        acc = float((cos.argmax(dim=1) == labels).float().mean())
    model.train_accuracy = acc
    model.freeze()
    if log is not None:
        log(f"victim train accuracy: {acc:.4f}")
    return model


def save_victim(model: VerificationModel, path: str | Path) -> Path:
    return ckpt.save_checkpoint(model, path, kind="verification_model", meta={
        "backbone_id": model.backbone_id,
        "head_id": model.head_id,
        "embedding_dim": model.embedding_dim,
        "n_classes": model.head.weight.shape[0] if model.head is not None else None,
        "train_accuracy": model.train_accuracy,
    })


def load_victim(path: str | Path) -> VerificationModel:
    state, manifest = ckpt.load_state_dict(path)
    if manifest.get("kind") != "verification_model":
        raise ValueError(f"checkpoint at {path} is not a verification model")
    meta = manifest["meta"]
    model = VerificationModel(meta["backbone_id"], meta["head_id"], meta["embedding_dim"],
                              n_classes=meta.get("n_classes"), seed=0)
    model.load_state_dict(state)
    model.train_accuracy = meta.get("train_accuracy")
    return model.freeze()
