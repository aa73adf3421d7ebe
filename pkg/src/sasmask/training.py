"""Joint optimization of the mask generator and the style-selection weights.

Each step renders the current adversarial mask, overlays it on a face batch,
pushes the batch through random transforms and the frozen victim, and
backpropagates the weighted loss once into two Adam groups: the generator
parameters at model_lr and the style logits at weight_lr. Training stops at
the epoch cap or after `patience` epochs without total-loss improvement.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from .generator import (FeatureExtractor, StyleMaskGenerator, content_canvas, extract_mask,
                        load_feature_extractor, load_generator, random_feature_extractor,
                        save_generator)
from .images import EXTRACTOR_NORM, FR_NORM, load_image, normalize, save_image
from .losses import (LossBundle, LossWeights, content_loss, fr_loss, l1_loss, style_loss,
                     total_loss, tv_loss, weighted_total)
from .overlay import (FIXED_RECT, MASK_TOP_ROW, GeometryMapper, TransformConfig,
                      apply_transform_batch, overlay, sample_transform)
from .styles import StyleSet, StyleWeights, blend_style, relaxed_distribution, select_style
from .victim import VerificationModel, embed, load_victim

IMPROVEMENT_TOL = 1e-6


class NumericalFailure(RuntimeError):
    """Raised when the training loss goes non-finite; carries the diagnostic dump."""

    def __init__(self, message, diagnostic=None):
        super().__init__(message)
        self.diagnostic = diagnostic or {}


@dataclass
class AttackConfig:
    """Everything one attack run needs; paths must already be resolved."""

    target_face_path: str
    style_dir: str
    content_mask_path: str
    victim_model_id: str  # checkpoint directory
    g_ori_checkpoint: str
    loss_weights: LossWeights = field(default_factory=LossWeights)
    tau: float = 0.1
    model_lr: float = 0.01
    weight_lr: float = 0.01
    max_epochs: int = 120
    patience: int = 7
    batch_size: int = 32
    eot: TransformConfig = field(default_factory=TransformConfig)
    seed: int = 0
    # diagnostics and variants
    fr_weight: float = 1.0
    alternating_updates: bool = False
    checkpoint_every: int = 0
    extractor_checkpoint: str | None = None
    extractor_seed: int = 0
    extractor_width_divisor: int = 8

    def __post_init__(self):
        if self.model_lr <= 0 or self.weight_lr <= 0:
            raise ValueError("learning rates must be > 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainState:
    """Mutable state of one attack run."""

    config: AttackConfig
    generator: StyleMaskGenerator
    weights: StyleWeights
    styles: StyleSet
    victim: VerificationModel
    fe: FeatureExtractor
    mapper: GeometryMapper
    content: torch.Tensor  # (3,60,112)
    m_ori: torch.Tensor  # (3,60,112), frozen benign mask
    target_embedding: torch.Tensor  # (D,)
    gen_input: torch.Tensor  # (1,3,112,112) FR-normalized content canvas
    content_ext_norm: torch.Tensor  # (3,112,112) extractor-normalized content canvas
    opt_gen: torch.optim.Optimizer
    opt_w: torch.optim.Optimizer
    rng: torch.Generator
    epoch: int = 0
    step: int = 0
    best_total_loss: float = float("inf")
    epochs_since_improvement: int = 0
    history: list[LossBundle] = field(default_factory=list)


def build_extractor(config: AttackConfig) -> FeatureExtractor:
    if config.extractor_checkpoint:
        return load_feature_extractor(config.extractor_checkpoint)
    return random_feature_extractor(seed=config.extractor_seed,
                                    width_divisor=config.extractor_width_divisor)


def initialize(config: AttackConfig, mapper: GeometryMapper = FIXED_RECT) -> TrainState:
    """Load resources, clone the benign generator, zero the style logits,
    and cache the target embedding."""
    g_ori = load_generator(config.g_ori_checkpoint)
    g_ori.requires_grad_(False)
    g_ori.eval()
    victim = load_victim(config.victim_model_id)
    fe = build_extractor(config)
    styles = StyleSet.from_dir(config.style_dir)
    content = load_image(config.content_mask_path, (60, 112)).pixels
    target = load_image(config.target_face_path, (112, 112)).pixels

    generator = g_ori.clone()
    generator.requires_grad_(True)
    weights = StyleWeights.zeros(len(styles), tau=config.tau)

    with torch.no_grad():
        e_t = embed(victim, target)
        m_ori = extract_mask(g_ori, content)

    canvas = content_canvas(content)
    state = TrainState(
        config=config,
        generator=generator,
        weights=weights,
        styles=styles,
        victim=victim,
        fe=fe,
        mapper=mapper,
        content=content,
        m_ori=m_ori,
        target_embedding=e_t,
        gen_input=normalize(canvas, FR_NORM).unsqueeze(0),
        content_ext_norm=normalize(canvas, EXTRACTOR_NORM),
        opt_gen=torch.optim.Adam(generator.parameters(), lr=config.model_lr),
        opt_w=torch.optim.Adam([weights.w], lr=config.weight_lr),
        rng=torch.Generator().manual_seed(config.seed),
    )
    return state


def _loss_parts(state: TrainState, faces: torch.Tensor):
    config = state.config
    h = relaxed_distribution(state.weights)
    s_blend = blend_style(h, state.styles)

    canvas_out = state.generator(state.gen_input).squeeze(0)
    m_adv = canvas_out[:, MASK_TOP_ROW:, :]

    masked = overlay(faces, m_adv, state.mapper).pixels
    params = [sample_transform(config.eot, state.rng) for _ in range(faces.shape[0])]
    transformed = apply_transform_batch(masked, params)

    fr = config.fr_weight * fr_loss(embed(state.victim, transformed), state.target_embedding)
    l1 = l1_loss(m_adv, state.m_ori)
    tv = tv_loss(m_adv)
    canvas_norm = normalize(canvas_out, EXTRACTOR_NORM)
    content = content_loss(state.fe, canvas_norm, state.content_ext_norm)
    style = style_loss(state.fe, canvas_norm, normalize(s_blend, EXTRACTOR_NORM))
    return fr, l1, tv, content, style


def train_epoch(state: TrainState, config: AttackConfig, train_faces: torch.Tensor) -> TrainState:
    """One pass over the training faces; appends the epoch-mean LossBundle."""
    n = train_faces.shape[0]
    if n < 1:
        raise ValueError("empty training face set")
    order = torch.randperm(n, generator=state.rng)
    sums = {k: 0.0 for k in ("fr", "l1", "tv", "content", "style")}
    batches = 0
    for start in range(0, n, config.batch_size):
        faces = train_faces[order[start:start + config.batch_size]]
        fr, l1, tv, content, style = _loss_parts(state, faces)
        total = weighted_total(fr, l1, tv, content, style, config.loss_weights)

        state.opt_gen.zero_grad()
        state.opt_w.zero_grad()
        total.backward()
        if config.alternating_updates:
            (state.opt_gen if state.step % 2 == 0 else state.opt_w).step()
        else:
            state.opt_gen.step()
            state.opt_w.step()
        state.step += 1

        parts = {"fr": float(fr), "l1": float(l1), "tv": float(tv),
                 "content": float(content), "style": float(style)}
        if not all(map(_finite, parts.values())):
            raise NumericalFailure(
                f"non-finite loss at epoch {state.epoch}, step {state.step}",
                diagnostic={"epoch": state.epoch, "step": state.step, "parts": parts,
                            "w": state.weights.w.detach().tolist()})
        for k, v in parts.items():
            sums[k] += v
        batches += 1

    mean = {k: v / batches for k, v in sums.items()}
    bundle = total_loss(mean["fr"], mean["l1"], mean["tv"], mean["content"], mean["style"],
                        config.loss_weights)
    state.history.append(bundle)
    state.epoch += 1
    return state


def _finite(x: float) -> bool:
    return x == x and abs(x) != float("inf")


def early_stop_check(state: TrainState, config: AttackConfig) -> str:
    """'continue' or 'stop'. Improvement means the last epoch's total loss beat
    the best seen by more than the tolerance; `patience` stale epochs stop."""
    if not state.history:
        raise ValueError("early_stop_check needs at least one completed epoch")
    last = state.history[-1].total
    if last < state.best_total_loss - IMPROVEMENT_TOL:
        state.best_total_loss = last
        state.epochs_since_improvement = 0
        return "continue"
    state.epochs_since_improvement += 1
    return "stop" if state.epochs_since_improvement >= config.patience else "continue"


@dataclass(frozen=True)
class AttackArtifacts:
    run_dir: Path
    mask_path: Path
    generator_dir: Path
    weights_path: Path
    history_path: Path
    config_path: Path
    selected_index: int
    selected_style: str


def finalize(state: TrainState, config: AttackConfig, out_dir: str | Path) -> AttackArtifacts:
    """Select the style by argmax(w), render the final mask, persist artifacts."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    idx = select_style(state.weights)

    with torch.no_grad():
        mask = extract_mask(state.generator, state.content, state.styles.styles[idx])
    mask_path = out_dir / "mask.png"
    save_image(mask, mask_path)

    generator_dir = save_generator(state.generator, out_dir / "generator",
                                   meta={"selected_style": state.styles.names[idx]})

    weights_path = out_dir / "weights.json"
    weights_path.write_text(json.dumps({
        "w": state.weights.w.detach().tolist(),
        "tau": state.weights.tau,
        "style_names": state.styles.names,
        "selected_index": idx,
        "selected_style": state.styles.names[idx],
    }, indent=1))

    history_path = out_dir / "history.json"
    history_path.write_text(json.dumps([b.as_dict() for b in state.history], indent=1))

    config_path = out_dir / "config.json"
    config_path.write_text(json.dumps(config.to_dict(), indent=1, sort_keys=True))

    return AttackArtifacts(out_dir, mask_path, generator_dir, weights_path, history_path,
                           config_path, idx, state.styles.names[idx])


def run_attack(config: AttackConfig, train_faces: torch.Tensor, out_dir: str | Path,
               mapper: GeometryMapper = FIXED_RECT, log=None) -> tuple[TrainState, AttackArtifacts]:
    """Full attack: initialize, train with early stopping, finalize artifacts."""
    out_dir = Path(out_dir)
    state = initialize(config, mapper)
    try:
        for _ in range(config.max_epochs):
            train_epoch(state, config, train_faces)
            if log is not None:
                b = state.history[-1]
                log(f"epoch {state.epoch}: total {b.total:.5f} fr {b.fr:.5f} l1 {b.l1:.5f} "
                    f"tv {b.tv:.5f} content {b.content:.5f} style {b.style:.5f}")
            if config.checkpoint_every and state.epoch % config.checkpoint_every == 0:
                epoch_dir = out_dir / "checkpoints" / f"epoch_{state.epoch}"
                save_generator(state.generator, epoch_dir / "generator")
                (epoch_dir / "weights.json").write_text(
                    json.dumps({"w": state.weights.w.detach().tolist()}))
            if early_stop_check(state, config) == "stop":
                if log is not None:
                    log(f"early stop at epoch {state.epoch} "
                        f"({state.epochs_since_improvement} stale epochs)")
                break
    except NumericalFailure as nf:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "diagnostic.json").write_text(json.dumps(nf.diagnostic, indent=1))
        raise
    artifacts = finalize(state, config, out_dir)
    return state, artifacts
