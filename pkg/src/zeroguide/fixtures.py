"""Deterministic synthetic dataset + replay container for offline runs and tests."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from . import tensorio
from .encoders import image_digest
from .encoders.vit import VisionTransformer, random_vit_params

COLORS = {
    "red": (215, 45, 40),
    "green": (45, 170, 65),
    "blue": (45, 75, 205),
    "yellow": (225, 205, 50),
    "purple": (140, 55, 165),
}
SYNONYMS = {
    "red": {"crimson": (190, 30, 50), "scarlet": (235, 60, 35)},
    "green": {"lime": (110, 200, 50), "forest": (35, 110, 45)},
    "blue": {"navy": (30, 40, 130), "azure": (60, 130, 230)},
    "yellow": {"gold": (210, 170, 40), "lemon": (240, 230, 90)},
    "purple": {"violet": (150, 80, 200), "plum": (120, 40, 110)},
}
UNRELATED = ("airplane", "sandy beach")
SIZE = 64
FEATURE_GRID = (16, 16)
FEATURE_DIM = 8


def _layouts(rng: np.random.Generator) -> list[np.ndarray]:
    """Three class-index maps over 64x64."""
    yy, xx = np.mgrid[0:SIZE, 0:SIZE]
    a = np.zeros((SIZE, SIZE), dtype=np.uint8)          # green field, red square, blue stripe
    a[:, :] = 1
    a[10:34, 8:32] = 0
    a[44:56, :] = 2
    b = np.full((SIZE, SIZE), 2, dtype=np.uint8)        # blue sky, yellow disc, purple ground
    b[(yy - 22) ** 2 + (xx - 40) ** 2 < 12 ** 2] = 3
    b[40:, :] = 4
    c = np.full((SIZE, SIZE), 3, dtype=np.uint8)        # four quadrants with ignored seams
    c[:32, 32:] = 0
    c[32:, :32] = 1
    c[32:, 32:] = 4
    c[31:33, :] = 255
    c[:, 31:33] = 255
    return [a, b, c]


def _render(labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    names = list(COLORS)
    img = np.zeros((*labels.shape, 3), dtype=np.float64)
    filled = labels.copy()
    if np.any(filled == 255):
        # ignored seams take the colour of the nearest labelled pixel above/left
        for y, x in zip(*np.nonzero(filled == 255)):
            filled[y, x] = filled[max(y - 2, 0), max(x - 2, 0)] if filled[max(y - 2, 0), max(x - 2, 0)] != 255 else 0
    for j, name in enumerate(names):
        img[filled == j] = COLORS[name]
    img += rng.normal(0, 6.0, img.shape)
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def _patch_features(image: np.ndarray, proj: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    rows, cols = FEATURE_GRID
    ph, pw = SIZE // rows, SIZE // cols
    means = image.reshape(rows, ph, cols, pw, 3).mean(axis=(1, 3)) / 255.0 - 0.5
    yy, xx = np.mgrid[0:rows, 0:cols]
    pos = np.stack([yy / (rows - 1) - 0.5, xx / (cols - 1) - 0.5], axis=-1)
    feats = (np.concatenate([means, pos], axis=-1) @ proj
             + rng.normal(0, 0.02, (rows, cols, FEATURE_DIM)))
    return feats.astype(np.float32)


def _solid(rgb) -> np.ndarray:
    return np.broadcast_to(np.array(rgb, dtype=np.uint8), (SIZE, SIZE, 3)).copy()


def make_synthetic_fixture(out_dir: str | Path, seed: int = 0) -> dict[str, Path]:
    """Write ``dataset/`` (3 images, 5 classes), ``replay.zgtr`` and ``run.cfg`` under ``out_dir``."""
    out = Path(out_dir)
    rng = np.random.default_rng(seed)
    ds = out / "dataset"
    (ds / "images").mkdir(parents=True, exist_ok=True)
    (ds / "gt").mkdir(parents=True, exist_ok=True)
    classes = list(COLORS)
    (ds / "classes.txt").write_text("".join(c + "\n" for c in classes))
    vocab = classes + [s for c in classes for s in SYNONYMS[c]] + list(UNRELATED)
    (ds / "vocabulary.txt").write_text("".join(v + "\n" for v in vocab))

    tensors: dict[str, np.ndarray] = dict(random_vit_params(rng))
    vit = VisionTransformer(tensors)
    proj = rng.normal(0, 1, (5, FEATURE_DIM))

    for k, labels in enumerate(_layouts(rng)):
        image_id = f"img{k:03d}"
        image = _render(labels, rng)
        Image.fromarray(image).save(ds / "images" / f"{image_id}.png")
        Image.fromarray(labels).save(ds / "gt" / f"{image_id}.png")
        key = image_digest(image)
        tensors[f"patch/{key}"] = _patch_features(image, proj, rng)
        tensors[f"clipimg/{key}"] = vit.forward(image).astype(np.float32)

    swatches = {name: COLORS[name] for name in classes}
    for c in classes:
        swatches.update(SYNONYMS[c])
    for phrase, rgb in swatches.items():
        emb = vit.forward(_solid(rgb))
        tensors[f"text/{phrase}"] = emb.astype(np.float32)
    for phrase in UNRELATED:
        tensors[f"text/{phrase}"] = rng.normal(0, 1, vit.embed_dim).astype(np.float32)

    dim = 32
    base = {c: rng.normal(0, 1, dim) for c in classes}
    sbert = {}
    for c in classes:
        sbert[c] = base[c]
        for s in SYNONYMS[c]:
            sbert[s] = base[c] + 0.5 * rng.normal(0, 1, dim)
    for phrase in UNRELATED:
        while True:
            v = rng.normal(0, 1, dim)
            if all(v @ base[c] / (np.linalg.norm(v) * np.linalg.norm(base[c])) < 0.3 for c in classes):
                break
        sbert[phrase] = v
    for phrase, v in sbert.items():
        tensors[f"sbert/{phrase}"] = (v / np.linalg.norm(v)).astype(np.float32)

    replay = out / "replay.zgtr"
    tensorio.save(replay, tensors)
    cfg = out / "run.cfg"
    cfg.write_text("backend=replay:replay.zgtr\ndataset=dataset\nvocabulary=dataset/vocabulary.txt\n")
    return {"dataset": ds, "replay": replay, "config": cfg}
