"""Command-line surface.

Verbs: pretrain-style, train, eval, sweep, ablate, baseline, transfer,
calibrate. Every command writes a manifest with the resolved config, content
digests of its file inputs, and the seed. Exit codes: 0 success, 2
usage/config error, 3 numerical failure.
"""

from __future__ import annotations

import dataclasses
import json
import sys
from pathlib import Path

import click
import torch

from . import __version__
from .checkpoint import git_blob_digest
from .config import ConfigError, RunConfig
from .evaluation import (TrainedArtifact, evaluate_attack, loss_ablation, pgd_mask_attack,
                         random_mask_baseline, style_ablation, transfer_matrix,
                         write_transfer_csv)
from .generator import extract_mask, load_generator, pretrain_style_generator, save_generator
from .images import load_image, load_rgb, save_image
from .styles import StyleSet
from .training import NumericalFailure, run_attack
from .victim import Threshold, calibrate_threshold, load_faces, load_victim, read_pairs_csv

EXIT_USAGE = 2
EXIT_NUMERICAL = 3


def _fail_usage(message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(EXIT_USAGE)


def _load_config(path: str) -> RunConfig:
    try:
        return RunConfig.load(path)
    except ConfigError as exc:
        _fail_usage(str(exc))


def _input_digests(paths) -> dict[str, str]:
    digests = {}
    for p in paths:
        if p is None:
            continue
        p = Path(p)
        if p.is_file():
            digests[str(p)] = git_blob_digest(p)
        elif p.is_dir():
            for f in sorted(p.rglob("*")):
                if f.is_file():
                    digests[str(f)] = git_blob_digest(f)
    return digests


def _write_manifest(out_dir: Path, command: str, config_doc: dict, seed: int, inputs) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.json").write_text(json.dumps({
        "tool": "sasmask",
        "version": __version__,
        "command": command,
        "seed": seed,
        "config": config_doc,
        "input_digests": _input_digests(inputs),
    }, indent=1, sort_keys=True))


def _plot_history(history: list[dict], path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    epochs = list(range(1, len(history) + 1))
    ax.plot(epochs, [h["total"] for h in history], label="total", linewidth=2)
    for key in ("fr", "l1", "tv", "content", "style"):
        ax.plot(epochs, [h[key] for h in history], label=key, alpha=0.6)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, metadata={})
    plt.close(fig)


def _load_threshold(victim_dir: Path) -> Threshold:
    tpath = Path(victim_dir) / "threshold.json"
    if not tpath.exists():
        _fail_usage(f"missing calibration: no threshold.json in {victim_dir}; run `sasmask calibrate` first")
    doc = json.loads(tpath.read_text())
    return Threshold(doc["kappa"], doc["calibration_folds"], doc["calibration_accuracy"])


@click.group()
@click.version_option(__version__)
def main():
    """Adversarial style-mask training and evaluation toolkit."""


@main.command("pretrain-style")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", type=int, default=None, help="override the config seed")
def cmd_pretrain_style(config_path, out_dir, seed):
    """Pretrain the benign style-transfer generator on a content corpus."""
    cfg = _load_config(config_path)
    seed = cfg.seed if seed is None else seed
    if cfg.data.corpus_dir is None:
        _fail_usage("config must set data.corpus_dir")
    if cfg.style_dir is None:
        _fail_usage("config must set styles.dir")
    corpus_dir = Path(cfg.data.corpus_dir)
    if not corpus_dir.is_dir():
        _fail_usage(f"missing corpus directory {corpus_dir}")
    corpus = load_faces(corpus_dir)
    styles = StyleSet.from_dir(cfg.style_dir)
    style = styles.styles.mean(dim=0)  # benign target: the uniform style blend

    from .generator import load_feature_extractor, random_feature_extractor
    fe = (load_feature_extractor(cfg.trainer.extractor_checkpoint)
          if cfg.trainer.extractor_checkpoint
          else random_feature_extractor(cfg.trainer.extractor_seed,
                                        cfg.trainer.extractor_width_divisor))

    gen = pretrain_style_generator(
        corpus, style, fe, cfg.loss_weights.lambda_c, cfg.loss_weights.lambda_s,
        cfg.loss_weights.lambda_tv, epochs=cfg.trainer.pretrain_epochs,
        batch_size=cfg.trainer.pretrain_batch_size, lr=cfg.trainer.pretrain_lr,
        patience=cfg.trainer.patience, seed=seed, log=click.echo)
    out = Path(out_dir)
    save_generator(gen, out, meta={"seed": seed})
    _write_manifest(out, "pretrain-style", cfg.raw, seed, [config_path, cfg.style_dir, corpus_dir])
    click.echo(f"benign generator checkpoint written to {out}")


@main.command("train")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", type=int, default=None, help="override the config seed")
@click.option("--max-epochs", type=int, default=None, help="override trainer.max_epochs")
def cmd_train(config_path, out_dir, seed, max_epochs):
    """Train an adversarial style mask against the configured victim."""
    cfg = _load_config(config_path)
    try:
        attack = cfg.attack_config(seed=seed, max_epochs=max_epochs)
    except ConfigError as exc:
        _fail_usage(str(exc))
    if cfg.data.train_faces_dir is None:
        _fail_usage("config must set data.train_faces_dir")
    train_faces = load_faces(cfg.data.train_faces_dir)

    out = Path(out_dir)
    try:
        state, artifacts = run_attack(attack, train_faces, out, log=click.echo)
    except NumericalFailure as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        sys.exit(EXIT_NUMERICAL)

    history = [b.as_dict() for b in state.history]
    _plot_history(history, out / "loss_curve.png")
    _write_manifest(out, "train", cfg.raw, attack.seed,
                    [config_path, attack.target_face_path, attack.content_mask_path,
                     attack.style_dir, cfg.data.train_faces_dir])
    click.echo(f"selected style: {artifacts.selected_style} (index {artifacts.selected_index})")
    click.echo(f"run artifacts in {out}")


@main.command("eval")
@click.option("--run", "run_dir", required=True, type=click.Path())
@click.option("--victim", "victim_dir", default=None, type=click.Path(),
              help="victim checkpoint dir; defaults to the run's training victim")
@click.option("--test-dir", "test_dir", required=True, type=click.Path())
@click.option("--out", "out_dir", default=None, type=click.Path())
@click.option("--windowed-ssim", is_flag=True, default=False,
              help="use the conventional 11x11 windowed SSIM instead of the global form")
def cmd_eval(run_dir, victim_dir, test_dir, out_dir, windowed_ssim):
    """Evaluate a finished run: ASR, stealth SSIM, and their trade-off."""
    run = Path(run_dir)
    if not (run / "config.json").exists():
        _fail_usage(f"missing run directory or config.json under {run}")
    attack_doc = json.loads((run / "config.json").read_text())
    victim_path = Path(victim_dir) if victim_dir else Path(attack_doc["victim_model_id"])
    if not victim_path.exists():
        _fail_usage(f"missing victim checkpoint {victim_path}")
    victim = load_victim(victim_path)
    threshold = _load_threshold(victim_path)

    test_faces = load_faces(test_dir)
    m_adv = load_rgb(run / "mask.png", (60, 112))
    g_ori = load_generator(attack_doc["g_ori_checkpoint"])
    content = load_image(attack_doc["content_mask_path"], (60, 112)).pixels
    with torch.no_grad():
        m_ori = extract_mask(g_ori, content)
    target = load_image(attack_doc["target_face_path"], (112, 112)).pixels

    report = evaluate_attack(test_faces, m_adv, m_ori, victim, target, threshold,
                             windowed_ssim=windowed_ssim)
    out = Path(out_dir) if out_dir else run / f"eval_{victim_path.name}"
    out.mkdir(parents=True, exist_ok=True)
    report.to_json(out / "report.json", extra={"victim": str(victim_path), "seed": attack_doc["seed"]})
    report.to_csv(out / "report.csv")
    _write_manifest(out, "eval", attack_doc, attack_doc["seed"],
                    [run / "mask.png", victim_path / "manifest.json", test_dir])
    click.echo(f"ASR {report.asr_percent:.1f}%  SSIM {report.ssim_mean:.4f}  "
               f"trade-off {report.tradeoff:.3f}  (n={report.n_test})")
    click.echo(f"report in {out}")


def _sweep_row(cfg: RunConfig, row: dict, out: Path, index: int):
    weights = dataclasses.replace(
        cfg.loss_weights,
        lambda_1=float(row["lambda_1"]), lambda_tv=float(row["lambda_tv"]),
        lambda_c=float(row["lambda_c"]), lambda_s=float(row["lambda_s"]))
    attack = dataclasses.replace(cfg.attack_config(), loss_weights=weights)
    train_faces = load_faces(cfg.data.train_faces_dir)
    test_faces = load_faces(cfg.data.test_faces_dir)
    victim_path = Path(attack.victim_model_id)
    victim = load_victim(victim_path)
    threshold = _load_threshold(victim_path)

    run_dir = out / f"row_{index:02d}"
    state, artifacts = run_attack(attack, train_faces, run_dir)
    g_ori = load_generator(attack.g_ori_checkpoint)
    content = load_image(attack.content_mask_path, (60, 112)).pixels
    with torch.no_grad():
        m_ori = extract_mask(g_ori, content)
    m_adv = load_rgb(artifacts.mask_path, (60, 112))
    target = load_image(attack.target_face_path, (112, 112)).pixels
    report = evaluate_attack(test_faces, m_adv, m_ori, victim, target, threshold)
    return {**{k: row[k] for k in ("lambda_1", "lambda_tv", "lambda_c", "lambda_s")},
            "asr_percent": report.asr_percent, "ssim": report.ssim_mean,
            "tradeoff": report.tradeoff}


def _sweep_worker(args):
    config_path, row, out_dir, index = args
    return index, _sweep_row(RunConfig.load(config_path), row, Path(out_dir), index)


@main.command("sweep")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--grid", "grid_path", required=True, type=click.Path(),
              help="JSON list of weight rows: [l1, tv, c, s] lists or objects")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--jobs", type=int, default=1)
def cmd_sweep(config_path, grid_path, out_dir, jobs):
    """Train and evaluate one run per loss-weight combination; emit a CSV table."""
    cfg = _load_config(config_path)
    grid_file = Path(grid_path)
    if not grid_file.exists():
        _fail_usage(f"missing grid file {grid_file}")
    grid = json.loads(grid_file.read_text())
    if not isinstance(grid, list) or not grid:
        _fail_usage("grid must be a non-empty JSON list")
    rows = []
    for entry in grid:
        if isinstance(entry, dict):
            rows.append(entry)
        else:
            l1, tv, c, s = entry
            rows.append({"lambda_1": l1, "lambda_tv": tv, "lambda_c": c, "lambda_s": s})

    try:
        cfg.attack_config()
    except ConfigError as exc:
        _fail_usage(str(exc))

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = [None] * len(rows)
    try:
        if jobs > 1:
            from concurrent.futures import ProcessPoolExecutor
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                for index, res in pool.map(_sweep_worker,
                                           [(config_path, row, str(out), i) for i, row in enumerate(rows)]):
                    results[index] = res
        else:
            for i, row in enumerate(rows):
                results[i] = _sweep_row(cfg, row, out, i)
                click.echo(f"row {i}: ASR {results[i]['asr_percent']:.1f}% "
                           f"SSIM {results[i]['ssim']:.4f} trade-off {results[i]['tradeoff']:.3f}")
    except NumericalFailure as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        sys.exit(EXIT_NUMERICAL)

    lines = ["lambda_1,lambda_tv,lambda_c,lambda_s,asr_percent,ssim,tradeoff"]
    for r in results:
        lines.append(f"{r['lambda_1']},{r['lambda_tv']},{r['lambda_c']},{r['lambda_s']},"
                     f"{r['asr_percent']:.1f},{r['ssim']:.4f},{r['tradeoff']:.3f}")
    (out / "sweep.csv").write_text("\n".join(lines) + "\n")
    _write_manifest(out, "sweep", cfg.raw, cfg.seed, [config_path, grid_file])
    click.echo(f"sweep table in {out / 'sweep.csv'}")


@main.command("ablate")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--mode", type=click.Choice(["style", "loss"]), required=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--combo", "combos", multiple=True,
              help="loss mode: comma-separated terms to ablate, e.g. --combo l1,tv")
def cmd_ablate(config_path, mode, out_dir, combos):
    """Style ablation (every single style vs optimized) or loss-term ablation."""
    cfg = _load_config(config_path)
    try:
        attack = cfg.attack_config()
    except ConfigError as exc:
        _fail_usage(str(exc))
    if cfg.data.train_faces_dir is None or cfg.data.test_faces_dir is None:
        _fail_usage("config must set data.train_faces_dir and data.test_faces_dir")
    train_faces = load_faces(cfg.data.train_faces_dir)
    test_faces = load_faces(cfg.data.test_faces_dir)
    threshold = _load_threshold(Path(attack.victim_model_id))

    out = Path(out_dir)
    try:
        if mode == "style":
            result = style_ablation(attack, train_faces, test_faces, threshold, out, log=None)
        else:
            flag_sets = [set(filter(None, c.split(","))) for c in combos]
            try:
                result = loss_ablation(attack, flag_sets, train_faces, test_faces, threshold,
                                       out, log=None)
            except ValueError as exc:
                _fail_usage(str(exc))
    except NumericalFailure as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        sys.exit(EXIT_NUMERICAL)

    (out / "ablation.json").write_text(json.dumps(result, indent=1))
    if mode == "style":
        lines = ["style,asr_percent,ssim,tradeoff"]
        for r in result["rows"]:
            lines.append(f"{r['style']},{r['asr_percent']:.1f},{r['ssim_mean']:.4f},{r['tradeoff']:.3f}")
    else:
        lines = ["ablated,asr_percent,ssim,tradeoff"]
        for r in result["rows"]:
            tag = "+".join(r["ablated"]) if r["ablated"] else "none"
            lines.append(f"{tag},{r['asr_percent']:.1f},{r['ssim_mean']:.4f},{r['tradeoff']:.3f}")
    (out / "ablation.csv").write_text("\n".join(lines) + "\n")
    _write_manifest(out, f"ablate-{mode}", cfg.raw, cfg.seed, [config_path])
    click.echo(f"ablation table in {out / 'ablation.csv'}")


@main.command("baseline")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--kind", type=click.Choice(["rand", "pgd"]), required=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--epsilon", type=float, default=64 / 255)
@click.option("--steps", type=int, default=40)
@click.option("--step-size", type=float, default=None)
@click.option("--seed", type=int, default=None)
def cmd_baseline(config_path, kind, out_dir, epsilon, steps, step_size, seed):
    """Random-perturbation or projected-sign-gradient baseline on the benign mask."""
    cfg = _load_config(config_path)
    seed = cfg.seed if seed is None else seed
    try:
        attack = cfg.attack_config(seed=seed)
    except ConfigError as exc:
        _fail_usage(str(exc))

    g_ori = load_generator(attack.g_ori_checkpoint)
    content = load_image(attack.content_mask_path, (60, 112)).pixels
    with torch.no_grad():
        m_ori = extract_mask(g_ori, content)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    victim_path = Path(attack.victim_model_id)
    victim = load_victim(victim_path)
    target = load_image(attack.target_face_path, (112, 112)).pixels

    if kind == "rand":
        mask = random_mask_baseline(m_ori, epsilon, seed)
    else:
        if cfg.data.train_faces_dir is None:
            _fail_usage("config must set data.train_faces_dir for the pgd baseline")
        faces = load_faces(cfg.data.train_faces_dir)
        mask = pgd_mask_attack(m_ori, epsilon, steps, step_size, victim, target, faces)
    save_image(mask, out / "mask.png")

    report_doc = {"kind": kind, "epsilon": epsilon, "steps": steps if kind == "pgd" else None,
                  "seed": seed}
    if cfg.data.test_faces_dir is not None:
        test_faces = load_faces(cfg.data.test_faces_dir)
        threshold = _load_threshold(victim_path)
        report = evaluate_attack(test_faces, mask, m_ori, victim, target, threshold)
        report.to_json(out / "report.json", extra=report_doc)
        click.echo(f"{kind}: ASR {report.asr_percent:.1f}% SSIM {report.ssim_mean:.4f}")
    else:
        (out / "report.json").write_text(json.dumps(report_doc, indent=1))
    _write_manifest(out, f"baseline-{kind}", cfg.raw, seed, [config_path])
    click.echo(f"baseline mask in {out / 'mask.png'}")


@main.command("transfer")
@click.option("--run", "run_dirs", multiple=True, required=True, type=click.Path())
@click.option("--victim", "victim_dirs", multiple=True, required=True, type=click.Path())
@click.option("--test-dir", "test_dir", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
def cmd_transfer(run_dirs, victim_dirs, test_dir, out_dir):
    """Cross-model ASR matrix of trained masks against victim checkpoints."""
    artifacts = []
    for rd in run_dirs:
        rd = Path(rd)
        if not (rd / "mask.png").exists() or not (rd / "config.json").exists():
            _fail_usage(f"run directory {rd} lacks mask.png/config.json")
        doc = json.loads((rd / "config.json").read_text())
        artifacts.append(TrainedArtifact(
            rd.name, load_rgb(rd / "mask.png", (60, 112)),
            load_image(doc["target_face_path"], (112, 112)).pixels))

    models = []
    for vd in victim_dirs:
        vd = Path(vd)
        if not vd.exists():
            _fail_usage(f"missing victim checkpoint {vd}")
        models.append((vd.name, load_victim(vd), _load_threshold(vd)))

    test_faces = load_faces(test_dir)
    result = transfer_matrix(artifacts, models, test_faces)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "transfer.json").write_text(json.dumps(result, indent=1))
    write_transfer_csv(result, out / "transfer.csv")
    _write_manifest(out, "transfer", {"runs": list(run_dirs), "victims": list(victim_dirs)}, 0,
                    [Path(rd) / "mask.png" for rd in run_dirs])
    click.echo(f"transfer matrix in {out / 'transfer.csv'}")


@main.command("calibrate")
@click.option("--victim", "victim_dir", required=True, type=click.Path())
@click.option("--pairs", "pairs_csv", required=True, type=click.Path())
@click.option("--folds", type=int, default=5)
@click.option("--out", "out_path", default=None, type=click.Path(),
              help="defaults to <victim>/threshold.json")
def cmd_calibrate(victim_dir, pairs_csv, folds, out_path):
    """K-fold calibration of the verification distance threshold."""
    victim_path = Path(victim_dir)
    if not victim_path.exists():
        _fail_usage(f"missing victim checkpoint {victim_path}")
    if not Path(pairs_csv).exists():
        _fail_usage(f"missing pairs CSV {pairs_csv}")
    victim = load_victim(victim_path)
    try:
        pairs = read_pairs_csv(pairs_csv)
        threshold = calibrate_threshold(victim, pairs, k_folds=folds)
    except ValueError as exc:
        _fail_usage(str(exc))
    out = Path(out_path) if out_path else victim_path / "threshold.json"
    out.write_text(json.dumps({
        "kappa": threshold.kappa,
        "calibration_folds": threshold.calibration_folds,
        "calibration_accuracy": threshold.calibration_accuracy,
    }, indent=1))
    click.echo(f"kappa {threshold.kappa:.4f} accuracy {threshold.calibration_accuracy:.4f} -> {out}")


if __name__ == "__main__":
    main()
