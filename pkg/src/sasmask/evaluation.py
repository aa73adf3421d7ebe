"""Attack metrics, baseline attacks, and experiment runners.

ASR counts test faces whose masked embedding falls strictly within the
calibrated distance threshold of the target. Stealthiness is the structural
similarity between the benignly masked face and the adversarially masked
face, computed from whole-image statistics; a conventional 11x11 windowed
variant is available behind a flag for comparison only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .losses import fr_loss
from .overlay import FIXED_RECT, GeometryMapper, overlay
from .victim import Threshold, VerificationModel, distance, embed


@dataclass(frozen=True)
class SsimConstants:
    c1: float = 0.0001
    c2: float = 0.0009

    def __post_init__(self):
        if self.c1 <= 0 or self.c2 <= 0:
            raise ValueError("SSIM constants must be > 0")


@dataclass
class EvalReport:
    """ASR/SSIM/trade-off summary plus per-image detail rows."""

    asr_percent: float
    ssim_mean: float
    tradeoff: float
    n_test: int
    per_image: list[dict] = field(default_factory=list)

    def to_json(self, path: str | Path, extra: dict | None = None) -> None:
        doc = {"asr_percent": self.asr_percent, "ssim_mean": self.ssim_mean,
               "tradeoff": self.tradeoff, "n_test": self.n_test, "per_image": self.per_image}
        if extra:
            doc.update(extra)
        Path(path).write_text(json.dumps(doc, indent=1))

    def to_csv(self, path: str | Path) -> None:
        lines = ["index,distance,success,ssim"]
        for i, row in enumerate(self.per_image):
            lines.append(f"{i},{row['distance']:.6f},{int(row['success'])},{row['ssim']:.6f}")
        Path(path).write_text("\n".join(lines) + "\n")


def ssim_global(a: torch.Tensor, b: torch.Tensor, consts: SsimConstants = SsimConstants()) -> float:
    """Structural similarity from whole-image statistics (no windowing).

    Means, standard deviations and the covariance are taken jointly over all
    pixels and channels (population form):
    [(2*mu_a*mu_b + C1) * (2*cov_ab + C2)] /
    [(mu_a^2 + mu_b^2 + C1) * (var_a + var_b + C2)].
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    x = a.double().flatten()
    y = b.double().flatten()
    mu_x, mu_y = x.mean(), y.mean()
    var_x = ((x - mu_x) ** 2).mean()
    var_y = ((y - mu_y) ** 2).mean()
    cov = ((x - mu_x) * (y - mu_y)).mean()
    num = (2 * mu_x * mu_y + consts.c1) * (2 * cov + consts.c2)
    den = (mu_x**2 + mu_y**2 + consts.c1) * (var_x + var_y + consts.c2)
    return float(num / den)


def ssim_windowed(a: torch.Tensor, b: torch.Tensor) -> float:
    """Conventional 11x11 Gaussian-windowed SSIM, for comparison only.

    This is NOT the metric used by the global-statistics protocol above.
    """
    from skimage.metrics import structural_similarity

    return float(structural_similarity(
        a.detach().cpu().numpy(), b.detach().cpu().numpy(), channel_axis=0, data_range=1.0,
        gaussian_weights=True, sigma=1.5, use_sample_covariance=False))


def tradeoff(asr_percent: float, ssim_mean: float) -> float:
    """Attack/stealth balance: ASR as a fraction plus mean SSIM."""
    return asr_percent / 100.0 + ssim_mean


def asr(test_faces: torch.Tensor, mask: torch.Tensor, mapper: GeometryMapper,
        victim: VerificationModel, target_face: torch.Tensor, threshold: Threshold) -> float:
    """Percent of test faces verified as the target once the mask is overlaid."""
    if test_faces.shape[0] < 1:
        raise ValueError("empty test face set")
    with torch.no_grad():
        e_t = embed(victim, target_face)
        masked = overlay(test_faces, mask, mapper).pixels
        d = distance(embed(victim, masked), e_t)
    successes = int((d < threshold.kappa).sum())
    return 100.0 * successes / test_faces.shape[0]


def evaluate_attack(test_faces: torch.Tensor, m_adv: torch.Tensor, m_ori: torch.Tensor,
                    victim: VerificationModel, target_face: torch.Tensor, threshold: Threshold,
                    mapper: GeometryMapper = FIXED_RECT,
                    consts: SsimConstants = SsimConstants(),
                    windowed_ssim: bool = False) -> EvalReport:
    """Full digital evaluation: ASR plus per-face SSIM of the adversarially
    masked face against the benignly masked face."""
    with torch.no_grad():
        e_t = embed(victim, target_face)
        adv_faces = overlay(test_faces, m_adv, mapper).pixels
        ori_faces = overlay(test_faces, m_ori, mapper).pixels
        d = distance(embed(victim, adv_faces), e_t)
    ssim_fn = ssim_windowed if windowed_ssim else lambda a, b: ssim_global(a, b, consts)
    per_image = []
    for i in range(test_faces.shape[0]):
        per_image.append({
            "distance": float(d[i]),
            "success": bool(d[i] < threshold.kappa),
            "ssim": ssim_fn(adv_faces[i], ori_faces[i]),
        })
    asr_percent = 100.0 * sum(r["success"] for r in per_image) / len(per_image)
    ssim_mean = float(np.mean([r["ssim"] for r in per_image]))
    return EvalReport(asr_percent, ssim_mean, tradeoff(asr_percent, ssim_mean),
                      len(per_image), per_image)


def random_mask_baseline(base_mask: torch.Tensor, epsilon: float, seed: int) -> torch.Tensor:
    """Base mask plus uniform noise in [-eps, eps], clipped to [0,1]."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0,1]")
    rng = torch.Generator().manual_seed(seed)
    noise = (torch.rand(base_mask.shape, generator=rng) * 2.0 - 1.0) * epsilon
    return (base_mask + noise).clamp(0.0, 1.0)


class NumericalError(RuntimeError):
    pass


def pgd_mask_attack(base_mask: torch.Tensor, epsilon: float, steps: int,
                    step_size: float | None, victim: VerificationModel,
                    target_face: torch.Tensor, faces: torch.Tensor,
                    mapper: GeometryMapper = FIXED_RECT) -> torch.Tensor:
    """Sign-gradient descent on the batch-mean recognition loss, projected to
    the L-inf ball of radius epsilon around the base mask and to [0,1].

    The default step size is 2.5 * epsilon / steps.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    if steps < 1:
        return base_mask.clone()
    if step_size is None:
        step_size = 2.5 * epsilon / steps
    with torch.no_grad():
        e_t = embed(victim, target_face)
    mask = base_mask.clone()
    for _ in range(steps):
        mask = mask.detach().requires_grad_(True)
        masked = overlay(faces, mask, mapper).pixels
        loss = fr_loss(embed(victim, masked), e_t)
        grad, = torch.autograd.grad(loss, mask)
        if not torch.isfinite(grad).all():
            raise NumericalError("non-finite PGD gradient")
        with torch.no_grad():
            mask = mask - step_size * grad.sign()
            mask = base_mask + (mask - base_mask).clamp(-epsilon, epsilon)
            mask = mask.clamp(0.0, 1.0)
    return mask.detach()


@dataclass(frozen=True)
class TrainedArtifact:
    """A finished attack run's outputs, ready for cross-model evaluation."""

    name: str
    mask: torch.Tensor  # (3,60,112)
    target_face: torch.Tensor  # (3,112,112)


def transfer_matrix(artifacts: list[TrainedArtifact],
                    models: list[tuple[str, VerificationModel, Threshold]],
                    test_faces: torch.Tensor,
                    mapper: GeometryMapper = FIXED_RECT) -> dict:
    """ASR of every artifact's mask against every model.

    Row i, column j holds artifact i evaluated on model j; the diagonal is
    the white-box case when artifacts and models align. Off-diagonal means
    are reported per source row.
    """
    if not artifacts or not models:
        raise ValueError("need at least one artifact and one model")
    matrix = np.zeros((len(artifacts), len(models)))
    for i, art in enumerate(artifacts):
        for j, (_, model, threshold) in enumerate(models):
            matrix[i, j] = asr(test_faces, art.mask, mapper, model, art.target_face, threshold)
    off_diag = []
    for i in range(len(artifacts)):
        others = [matrix[i, j] for j in range(len(models)) if j != i]
        off_diag.append(float(np.mean(others)) if others else float("nan"))
    return {
        "sources": [a.name for a in artifacts],
        "models": [name for name, _, _ in models],
        "asr_matrix": matrix.tolist(),
        "off_diagonal_mean": off_diag,
    }


def write_transfer_csv(result: dict, path: str | Path) -> None:
    lines = ["source," + ",".join(result["models"]) + ",transfer_mean"]
    for i, src in enumerate(result["sources"]):
        row = ",".join(f"{v:.2f}" for v in result["asr_matrix"][i])
        lines.append(f"{src},{row},{result['off_diagonal_mean'][i]:.2f}")
    Path(path).write_text("\n".join(lines) + "\n")


def _run_and_score(config, train_faces, test_faces, threshold, run_dir, mapper, log):
    from .generator import extract_mask, load_generator
    from .images import load_image, load_rgb
    from .training import run_attack

    state, artifacts = run_attack(config, train_faces, run_dir, mapper, log=log)
    g_ori = load_generator(config.g_ori_checkpoint)
    content = load_image(config.content_mask_path, (60, 112)).pixels
    with torch.no_grad():
        m_ori = extract_mask(g_ori, content)
    m_adv = load_rgb(artifacts.mask_path, (60, 112))
    target = load_image(config.target_face_path, (112, 112)).pixels
    report = evaluate_attack(test_faces, m_adv, m_ori, state.victim, target, threshold, mapper)
    return state, artifacts, report


def style_ablation(config, train_faces: torch.Tensor, test_faces: torch.Tensor,
                   threshold: Threshold, out_dir: str | Path,
                   mapper: GeometryMapper = FIXED_RECT, tolerance: float = 0.05,
                   log=None) -> dict:
    """Train once per fixed single style and once with optimized selection.

    Emits K+1 rows and flags whether the optimized run's trade-off reaches
    the best single style's trade-off minus `tolerance`.
    """
    import dataclasses
    import shutil

    from .styles import StyleSet

    out_dir = Path(out_dir)
    styles = StyleSet.from_dir(config.style_dir)
    rows = []
    for name in styles.names:
        single_dir = out_dir / f"style_{name}" / "styles"
        single_dir.mkdir(parents=True, exist_ok=True)
        shutil.copy(Path(config.style_dir) / f"{name}.png", single_dir / f"{name}.png")
        cfg = dataclasses.replace(config, style_dir=str(single_dir))
        _, _, report = _run_and_score(cfg, train_faces, test_faces, threshold,
                                      out_dir / f"style_{name}" / "run", mapper, log)
        rows.append({"style": name, "asr_percent": report.asr_percent,
                     "ssim_mean": report.ssim_mean, "tradeoff": report.tradeoff})

    _, artifacts, report = _run_and_score(config, train_faces, test_faces, threshold,
                                          out_dir / "optimized", mapper, log)
    rows.append({"style": f"optimized({artifacts.selected_style})",
                 "asr_percent": report.asr_percent, "ssim_mean": report.ssim_mean,
                 "tradeoff": report.tradeoff})
    best_single = max(r["tradeoff"] for r in rows[:-1])
    return {"rows": rows,
            "optimized_matches_best": rows[-1]["tradeoff"] >= best_single - tolerance}


LOSS_TERMS = ("l1", "tv", "content", "style")


def loss_ablation(config, ablation_flags: list[set[str]], train_faces: torch.Tensor,
                  test_faces: torch.Tensor, threshold: Threshold, out_dir: str | Path,
                  mapper: GeometryMapper = FIXED_RECT, log=None) -> dict:
    """One training run per requested term subset to zero out.

    The full-loss row (nothing ablated) and the no-constraint row (all four
    stealth terms ablated) are always included.
    """
    import dataclasses

    from .losses import LossWeights

    combos = [frozenset(), frozenset(LOSS_TERMS)]
    for flags in ablation_flags:
        bad = set(flags) - set(LOSS_TERMS)
        if bad:
            raise ValueError(f"unknown loss terms {sorted(bad)}; valid: {LOSS_TERMS}")
        if frozenset(flags) not in combos:
            combos.append(frozenset(flags))
    combos = [combos[0]] + sorted(combos[1:], key=lambda c: (len(c), sorted(c)))

    out_dir = Path(out_dir)
    rows = []
    for combo in combos:
        w = config.loss_weights
        weights = LossWeights(
            0.0 if "l1" in combo else w.lambda_1,
            0.0 if "tv" in combo else w.lambda_tv,
            0.0 if "content" in combo else w.lambda_c,
            0.0 if "style" in combo else w.lambda_s,
        )
        cfg = dataclasses.replace(config, loss_weights=weights)
        tag = "full" if not combo else "no_" + "_".join(sorted(combo))
        _, _, report = _run_and_score(cfg, train_faces, test_faces, threshold,
                                      out_dir / tag, mapper, log)
        rows.append({"ablated": sorted(combo), "asr_percent": report.asr_percent,
                     "ssim_mean": report.ssim_mean, "tradeoff": report.tradeoff})
    return {"rows": rows}
