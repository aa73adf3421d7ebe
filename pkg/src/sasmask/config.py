"""Run configuration: a strict nested JSON document.

Unknown keys are rejected everywhere, the seed is mandatory, and every path
is resolved relative to the config file's directory. Checkpoints may also be
referred to by bare name, resolved against the cache directory (overridable
via the SASMASK_CACHE environment variable).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .losses import LossWeights
from .overlay import TransformConfig
from .training import AttackConfig


class ConfigError(ValueError):
    pass


def cache_dir() -> Path:
    return Path(os.environ.get("SASMASK_CACHE", "~/.cache/sasmask")).expanduser()


def resolve_checkpoint(name_or_path: str, base: Path) -> Path:
    """Resolve a checkpoint reference: config-relative path first, then cache."""
    p = Path(name_or_path)
    candidate = p if p.is_absolute() else base / p
    if candidate.exists():
        return candidate
    cached = cache_dir() / name_or_path
    if cached.exists():
        return cached
    raise ConfigError(f"checkpoint {name_or_path!r} not found at {candidate} or in {cache_dir()}")


def _check_keys(doc: dict, allowed: set[str], where: str) -> None:
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in {where}; allowed: {sorted(allowed)}")


def _path(doc: dict, key: str, base: Path, required: bool, where: str) -> str | None:
    value = doc.get(key)
    if value is None:
        if required:
            raise ConfigError(f"missing required path {where}.{key}")
        return None
    p = Path(value)
    return str(p if p.is_absolute() else base / p)


@dataclass
class DataConfig:
    train_faces_dir: str | None = None
    test_faces_dir: str | None = None
    target_face: str | None = None
    content_mask: str | None = None
    g_ori_checkpoint: str | None = None
    corpus_dir: str | None = None
    pairs_csv: str | None = None


@dataclass
class VictimConfig:
    checkpoint: str | None = None
    backbone: str = "desk_resnet"
    head: str = "arc_margin"


@dataclass
class TrainerSection:
    tau: float = 0.1
    model_lr: float = 0.01
    weight_lr: float = 0.01
    max_epochs: int = 120
    patience: int = 7
    batch_size: int = 32
    fr_weight: float = 1.0
    alternating_updates: bool = False
    checkpoint_every: int = 0
    extractor_checkpoint: str | None = None
    extractor_seed: int = 0
    extractor_width_divisor: int = 8
    pretrain_epochs: int = 40
    pretrain_batch_size: int = 4
    pretrain_lr: float = 0.01


@dataclass
class EvalSection:
    windowed_ssim: bool = False
    eot_at_test: bool = False
    folds: int = 5


@dataclass
class RunConfig:
    seed: int
    data: DataConfig = field(default_factory=DataConfig)
    victim: VictimConfig = field(default_factory=VictimConfig)
    style_dir: str | None = None
    loss_weights: LossWeights = field(default_factory=LossWeights)
    trainer: TrainerSection = field(default_factory=TrainerSection)
    eot: TransformConfig = field(default_factory=TransformConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    source_path: str | None = None
    raw: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"no config file at {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(doc, base=path.parent, source=str(path))

    @classmethod
    def from_dict(cls, doc: dict, base: Path, source: str | None = None) -> "RunConfig":
        _check_keys(doc, {"seed", "data", "victim", "styles", "loss_weights",
                          "trainer", "eot", "eval"}, "config")
        if "seed" not in doc:
            raise ConfigError("config must set a seed")
        seed = int(doc["seed"])

        data_doc = doc.get("data", {})
        _check_keys(data_doc, {"train_faces_dir", "test_faces_dir", "target_face", "content_mask",
                               "g_ori_checkpoint", "corpus_dir", "pairs_csv"}, "data")
        data = DataConfig(
            train_faces_dir=_path(data_doc, "train_faces_dir", base, False, "data"),
            test_faces_dir=_path(data_doc, "test_faces_dir", base, False, "data"),
            target_face=_path(data_doc, "target_face", base, False, "data"),
            content_mask=_path(data_doc, "content_mask", base, False, "data"),
            g_ori_checkpoint=data_doc.get("g_ori_checkpoint"),
            corpus_dir=_path(data_doc, "corpus_dir", base, False, "data"),
            pairs_csv=_path(data_doc, "pairs_csv", base, False, "data"),
        )
        if data.g_ori_checkpoint is not None:
            p = Path(data.g_ori_checkpoint)
            data.g_ori_checkpoint = str(p if p.is_absolute() else base / p)

        victim_doc = doc.get("victim", {})
        _check_keys(victim_doc, {"checkpoint", "backbone", "head"}, "victim")
        victim = VictimConfig(
            checkpoint=victim_doc.get("checkpoint"),
            backbone=victim_doc.get("backbone", "desk_resnet"),
            head=victim_doc.get("head", "arc_margin"),
        )
        if victim.checkpoint is not None:
            victim.checkpoint = str(resolve_checkpoint(victim.checkpoint, base))

        styles_doc = doc.get("styles", {})
        _check_keys(styles_doc, {"dir"}, "styles")
        style_dir = _path(styles_doc, "dir", base, False, "styles")

        lw_doc = doc.get("loss_weights", {})
        _check_keys(lw_doc, {"lambda_1", "lambda_tv", "lambda_c", "lambda_s"}, "loss_weights")
        defaults = LossWeights()
        weights = LossWeights(
            float(lw_doc.get("lambda_1", defaults.lambda_1)),
            float(lw_doc.get("lambda_tv", defaults.lambda_tv)),
            float(lw_doc.get("lambda_c", defaults.lambda_c)),
            float(lw_doc.get("lambda_s", defaults.lambda_s)),
        )

        tr_doc = dict(doc.get("trainer", {}))
        _check_keys(tr_doc, set(TrainerSection.__dataclass_fields__), "trainer")
        if tr_doc.get("extractor_checkpoint"):
            tr_doc["extractor_checkpoint"] = str(resolve_checkpoint(tr_doc["extractor_checkpoint"], base))
        trainer = TrainerSection(**tr_doc)

        eot_doc = doc.get("eot", {})
        _check_keys(eot_doc, {"rotation_deg", "translate_px", "noise_sigma", "brightness_delta",
                              "contrast_scale"}, "eot")
        default_eot = TransformConfig()
        try:
            eot = TransformConfig(
                tuple(eot_doc.get("rotation_deg", default_eot.rotation_deg_range)),
                tuple(int(v) for v in eot_doc.get("translate_px", default_eot.translate_px_range)),
                float(eot_doc.get("noise_sigma", default_eot.noise_sigma)),
                tuple(eot_doc.get("brightness_delta", default_eot.brightness_delta_range)),
                tuple(eot_doc.get("contrast_scale", default_eot.contrast_scale_range)),
                seed,
            )
        except ValueError as exc:
            raise ConfigError(f"invalid eot section: {exc}") from exc

        eval_doc = doc.get("eval", {})
        _check_keys(eval_doc, {"windowed_ssim", "eot_at_test", "folds"}, "eval")
        eval_cfg = EvalSection(
            windowed_ssim=bool(eval_doc.get("windowed_ssim", False)),
            eot_at_test=bool(eval_doc.get("eot_at_test", False)),
            folds=int(eval_doc.get("folds", 5)),
        )

        return cls(seed=seed, data=data, victim=victim, style_dir=style_dir,
                   loss_weights=weights, trainer=trainer, eot=eot, eval=eval_cfg,
                   source_path=source, raw=doc)

    def _require(self, value, name: str):
        if value is None:
            raise ConfigError(f"config must set {name} for this command")
        return value

    def attack_config(self, seed: int | None = None, max_epochs: int | None = None) -> AttackConfig:
        """Assemble the trainer's config; raises ConfigError on missing inputs."""
        tr = self.trainer
        try:
            return AttackConfig(
                target_face_path=self._require(self.data.target_face, "data.target_face"),
                style_dir=self._require(self.style_dir, "styles.dir"),
                content_mask_path=self._require(self.data.content_mask, "data.content_mask"),
                victim_model_id=self._require(self.victim.checkpoint, "victim.checkpoint"),
                g_ori_checkpoint=self._require(self.data.g_ori_checkpoint, "data.g_ori_checkpoint"),
                loss_weights=self.loss_weights,
                tau=tr.tau,
                model_lr=tr.model_lr,
                weight_lr=tr.weight_lr,
                max_epochs=max_epochs if max_epochs is not None else tr.max_epochs,
                patience=tr.patience,
                batch_size=tr.batch_size,
                eot=self.eot,
                seed=seed if seed is not None else self.seed,
                fr_weight=tr.fr_weight,
                alternating_updates=tr.alternating_updates,
                checkpoint_every=tr.checkpoint_every,
                extractor_checkpoint=tr.extractor_checkpoint,
                extractor_seed=tr.extractor_seed,
                extractor_width_divisor=tr.extractor_width_divisor,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
