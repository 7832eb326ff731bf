"""Colour-filled segment overlays with a text caption per segment."""
from __future__ import annotations

import hashlib
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw, ImageFont

MIN_SIDE = 256


def segment_color(node_id: int) -> tuple[int, int, int]:
    d = hashlib.md5(f"segment-{node_id}".encode()).digest()
    return 60 + d[0] % 180, 60 + d[1] % 180, 60 + d[2] % 180


def _anchor(mask: np.ndarray) -> tuple[int, int]:
    """Mask pixel closest to the mask centroid (always inside the segment)."""
    ys, xs = np.nonzero(mask)
    cy, cx = ys.mean(), xs.mean()
    i = int(np.argmin((ys - cy) ** 2 + (xs - cx) ** 2))
    return int(xs[i]), int(ys[i])


def render_overlay(image: np.ndarray, segments: Sequence[tuple[int, np.ndarray, str]],
                   alpha: float = 0.55) -> Image.Image:
    """``segments`` holds (node id, H x W bool mask, caption) triples."""
    H, W = image.shape[:2]
    scale = max(1, int(np.ceil(MIN_SIDE / min(H, W))))
    ids = np.full((H, W), -1, dtype=np.int64)
    fill = image.astype(np.float64).copy()
    for k, (node_id, mask, _) in enumerate(segments):
        ids[mask] = k
        fill[mask] = (1 - alpha) * fill[mask] + alpha * np.array(segment_color(node_id))
    big_ids = np.kron(ids, np.ones((scale, scale), dtype=np.int64))
    big = np.kron(fill, np.ones((scale, scale, 1)))
    big_edge = np.zeros(big_ids.shape, dtype=bool)
    big_edge[:, 1:] |= big_ids[:, 1:] != big_ids[:, :-1]
    big_edge[1:, :] |= big_ids[1:, :] != big_ids[:-1, :]
    big[big_edge] = 0
    canvas = Image.fromarray(np.clip(np.round(big), 0, 255).astype(np.uint8))
    draw = ImageDraw.Draw(canvas)
    font = ImageFont.load_default()
    for node_id, mask, caption in segments:
        if not mask.any():
            continue
        x, y = _anchor(mask)
        x, y = x * scale, y * scale
        box = draw.textbbox((x, y), caption, font=font, anchor="mm")
        draw.rectangle(box, fill=(255, 255, 255))
        draw.text((x, y), caption, fill=(0, 0, 0), font=font, anchor="mm")
    return canvas
