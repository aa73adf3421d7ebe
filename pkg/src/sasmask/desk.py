"""Desk-scale synthetic face data: procedural identities, style images, a
content mask pattern, and verification pairs.

Identity-discriminative cues (hair, background, eye/brow geometry, skin
tone) sit in the upper half of the frame, so faces stay recognizable when
the bottom band is covered by a mask. Everything is derived from a single
seed; identity k always renders the same regardless of how many identities
or images are requested.
"""

from __future__ import annotations

import argparse
import csv
from pathlib import Path

import numpy as np
import torch

from .images import save_image

SIZE = 112
MASK_H, MASK_W = 60, 112


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(key)))


def _identity_spec(seed: int, identity: int) -> dict:
    rng = _rng(seed, identity, 0)
    return {
        "bg_top": rng.uniform(0.15, 0.9, 3),
        "bg_bottom": rng.uniform(0.15, 0.9, 3),
        "hair_color": rng.uniform(0.02, 0.55, 3),
        "hair_height": rng.uniform(14, 30),
        "skin": np.array([rng.uniform(0.55, 0.9), rng.uniform(0.4, 0.75), rng.uniform(0.3, 0.6)]),
        "face_rx": rng.uniform(32, 44),
        "face_ry": rng.uniform(40, 52),
        "eye_y": rng.uniform(34, 44),
        "eye_dx": rng.uniform(13, 21),
        "eye_r": rng.uniform(2.5, 5.5),
        "eye_color": rng.uniform(0.0, 0.45, 3),
        "brow_offset": rng.uniform(6, 11),
        "brow_thickness": rng.uniform(1.5, 3.5),
        "brow_len": rng.uniform(7, 12),
        "mouth_w": rng.uniform(8, 16),
        "mouth_color": np.array([rng.uniform(0.5, 0.8), rng.uniform(0.1, 0.3), rng.uniform(0.1, 0.3)]),
        # a lower-face cue: verification models key on this region too
        "jaw_tint": rng.uniform(0.6, 1.0),
    }


def render_face(seed: int, identity: int, image_index: int) -> torch.Tensor:
    """One (3,112,112) face of the given identity, with per-image variation.

    Pose shift, lighting, background tint and hairline all jitter between
    images of the same identity, so genuine verification pairs carry
    realistic spread instead of collapsing to near-duplicates.
    """
    spec = _identity_spec(seed, identity)
    rng = _rng(seed, identity, image_index + 1)
    dx = rng.uniform(-4.0, 4.0)
    dy = rng.uniform(-4.0, 4.0)
    bg_tint = rng.uniform(-0.10, 0.10, 3)
    hair_jitter = rng.uniform(-2.5, 2.5)

    yy, xx = np.mgrid[0:SIZE, 0:SIZE].astype(np.float64)
    yy = yy - dy
    xx = xx - dx
    img = np.zeros((SIZE, SIZE, 3))

    t = (yy / SIZE).clip(0, 1)[..., None]
    img += (1 - t) * (spec["bg_top"] + bg_tint) + t * (spec["bg_bottom"] + bg_tint)

    hair = yy < spec["hair_height"] + hair_jitter + 3.0 * np.sin(xx / 9.0)
    img[hair] = spec["hair_color"]

    cx, cy = 56.0, 62.0
    face = ((xx - cx) / spec["face_rx"]) ** 2 + ((yy - cy) / spec["face_ry"]) ** 2 <= 1.0
    img[face] = spec["skin"]

    for side in (-1.0, 1.0):
        ex = cx + side * spec["eye_dx"]
        eye = ((xx - ex) ** 2 + (yy - spec["eye_y"]) ** 2) <= spec["eye_r"] ** 2
        img[eye] = spec["eye_color"]
        brow = (np.abs(yy - (spec["eye_y"] - spec["brow_offset"])) <= spec["brow_thickness"]) & (
            np.abs(xx - ex) <= spec["brow_len"])
        img[brow] = spec["hair_color"] * 0.6

    nose = (np.abs(xx - cx) <= 1.6) & (yy > spec["eye_y"] + 4) & (yy < 58)
    img[nose] = spec["skin"] * 0.82

    jaw = face & (yy > 66)
    img[jaw] = img[jaw] * spec["jaw_tint"]

    mouth = (((xx - cx) / spec["mouth_w"]) ** 2 + ((yy - 82.0) / 3.5) ** 2) <= 1.0
    img[mouth & face] = spec["mouth_color"]

    img += rng.uniform(-0.08, 0.08)
    img += rng.normal(0.0, 0.015, img.shape)
    return torch.from_numpy(img.clip(0.0, 1.0).transpose(2, 0, 1)).float()


STYLE_KINDS = ("checker", "dots", "stripes", "waves")


def _style_image(kind: str, seed: int) -> torch.Tensor:
    rng = _rng(seed, 100 + STYLE_KINDS.index(kind))
    yy, xx = np.mgrid[0:SIZE, 0:SIZE].astype(np.float64)
    c1, c2 = rng.uniform(0.1, 0.95, 3), rng.uniform(0.1, 0.95, 3)
    if kind == "stripes":
        period = rng.uniform(14, 22)
        m = ((xx + yy) % period) < period / 2
    elif kind == "checker":
        cell = int(rng.uniform(10, 18))
        m = ((xx // cell) + (yy // cell)) % 2 == 0
    elif kind == "dots":
        spacing = rng.uniform(16, 24)
        m = ((xx % spacing - spacing / 2) ** 2 + (yy % spacing - spacing / 2) ** 2) < rng.uniform(4, 7) ** 2
    elif kind == "waves":
        m = np.sin(xx / rng.uniform(5, 9) + 3.0 * np.sin(yy / 17.0)) > 0
    else:
        raise ValueError(f"unknown style kind {kind}")
    img = np.where(m[..., None], c1, c2)
    return torch.from_numpy(img.transpose(2, 0, 1)).float()


def content_mask_pattern() -> torch.Tensor:
    """A plain surgical-style (3,60,112) pattern: light blue with pleat lines."""
    yy = np.mgrid[0:MASK_H, 0:MASK_W][0].astype(np.float64)
    base = np.array([0.62, 0.78, 0.9])
    img = np.ones((MASK_H, MASK_W, 3)) * base
    for line_y in (15, 30, 45):
        img[np.abs(yy - line_y) <= 1.0] = base * 0.85
    shade = 1.0 - 0.15 * (yy / MASK_H)[..., None]
    return torch.from_numpy((img * shade).clip(0, 1).transpose(2, 0, 1)).float()


def build_faces(out_dir: Path, seed: int, identities: range, image_indices: range) -> None:
    for ident in identities:
        d = out_dir / f"id_{ident:03d}"
        d.mkdir(parents=True, exist_ok=True)
        for j in image_indices:
            save_image(render_face(seed, ident, j), d / f"img_{j:03d}.png")


def build_pairs_csv(faces_dir: Path, out_csv: Path, n_per_class: int, seed: int) -> None:
    """Genuine and impostor verification pairs over a per-identity face directory."""
    rng = _rng(seed, 999)
    ids = sorted(d for d in faces_dir.iterdir() if d.is_dir())
    files = {d.name: sorted(d.glob("*.png")) for d in ids}
    rows = []
    names = list(files)
    for _ in range(n_per_class):
        ident = names[rng.integers(len(names))]
        a, b = rng.choice(len(files[ident]), size=2, replace=False)
        rows.append((files[ident][a], files[ident][b], 1))
    for _ in range(n_per_class):
        i1, i2 = rng.choice(len(names), size=2, replace=False)
        f1 = files[names[i1]][rng.integers(len(files[names[i1]]))]
        f2 = files[names[i2]][rng.integers(len(files[names[i2]]))]
        rows.append((f1, f2, 0))
    with open(out_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path_a", "path_b", "same_identity"])
        for a, b, same in rows:
            writer.writerow([a.relative_to(out_csv.parent), b.relative_to(out_csv.parent), same])


def build_desk_kit(root: str | Path, seed: int = 0, *, victim_ids: int = 10,
                   victim_images: int = 30, eval_ids: int = 10, test_images: int = 10,
                   attack_images: int = 12, corpus_images: int = 16,
                   pairs_per_class: int = 60) -> dict[str, Path]:
    """Write the full desk-scale asset tree and return its paths.

    Victim training uses identities [0, victim_ids); attack training and
    testing use disjoint image sets of the next `eval_ids` identities; the
    target is a fresh identity unseen by the victim.
    """
    root = Path(root)
    paths = {
        "victim_train": root / "faces" / "victim_train",
        "attack_train": root / "faces" / "attack_train",
        "test": root / "faces" / "test",
        "target": root / "target" / "target.png",
        "styles": root / "styles",
        "content_mask": root / "content_mask.png",
        "corpus": root / "corpus",
        "pairs": root / "pairs.csv",
    }
    build_faces(paths["victim_train"], seed, range(victim_ids), range(victim_images))
    eval_range = range(victim_ids, victim_ids + eval_ids)
    build_faces(paths["test"], seed, eval_range, range(test_images))
    build_faces(paths["attack_train"], seed, eval_range, range(test_images, test_images + attack_images))

    target_id = victim_ids + eval_ids
    paths["target"].parent.mkdir(parents=True, exist_ok=True)
    save_image(render_face(seed, target_id, 0), paths["target"])

    paths["styles"].mkdir(parents=True, exist_ok=True)
    for kind in STYLE_KINDS:
        save_image(_style_image(kind, seed), paths["styles"] / f"{kind}.png")

    save_image(content_mask_pattern(), paths["content_mask"])

    paths["corpus"].mkdir(parents=True, exist_ok=True)
    rng = _rng(seed, 777)
    content = content_mask_pattern()
    for i in range(corpus_images):
        if i % 2 == 0:
            img = render_face(seed, int(rng.integers(victim_ids)), 500 + i)
        else:
            canvas = torch.full((3, SIZE, SIZE), 0.5)
            canvas[:, SIZE - MASK_H:, :] = content
            jitter = torch.from_numpy(rng.normal(0, 0.02, canvas.shape)).float()
            img = (canvas + jitter).clamp(0, 1)
        save_image(img, paths["corpus"] / f"c_{i:03d}.png")

    build_pairs_csv(paths["test"], paths["pairs"], pairs_per_class, seed)
    return paths


def main(argv=None):
    parser = argparse.ArgumentParser(description="Generate the desk-scale synthetic data kit")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--victim-ids", type=int, default=10)
    parser.add_argument("--victim-images", type=int, default=30)
    parser.add_argument("--eval-ids", type=int, default=10)
    parser.add_argument("--test-images", type=int, default=10)
    parser.add_argument("--attack-images", type=int, default=12)
    args = parser.parse_args(argv)
    paths = build_desk_kit(args.out, args.seed, victim_ids=args.victim_ids,
                           victim_images=args.victim_images, eval_ids=args.eval_ids,
                           test_images=args.test_images, attack_images=args.attack_images)
    for name, p in paths.items():
        print(f"{name}: {p}")


if __name__ == "__main__":
    main()
