"""Fully-connected CRF refinement of patch-level clusters to pixel masks."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from PIL import Image
from scipy.ndimage import correlate1d

from ..encoders import PatchFeatures, check_image

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CRFParams:
    iterations: int = 10
    gaussian_sxy: float = 3.0
    gaussian_weight: float = 3.0
    bilateral_sxy: float = 50.0
    bilateral_srgb: float = 13.0
    bilateral_weight: float = 5.0
    unary_weight: float = 10.0
    max_pixels: int = 4096   # mean-field runs at a working resolution capped to this many pixels
    min_area: int = 1


@dataclass
class SegmentMask:
    mask: np.ndarray               # H x W, bool (hard) or float in [0, 1]
    node_id: Optional[int] = None  # merge-tree node this mask belongs to

    @property
    def area(self) -> int:
        return int(np.count_nonzero(self.mask))


def nearest_upsample(labels: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    rows, cols = labels.shape
    H, W = shape
    ry = np.minimum((np.arange(H) * rows) // H, rows - 1)
    rx = np.minimum((np.arange(W) * cols) // W, cols - 1)
    return labels[ry[:, None], rx[None, :]]


def bilinear_upsample(field: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Half-pixel-centred bilinear resize of an (h, w, k) field."""
    h, w = field.shape[:2]
    H, W = shape

    def axis(n_in, n_out):
        pos = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis(h, H)
    x0, x1, fx = axis(w, W)
    top = field[y0][:, x0] * (1 - fx)[None, :, None] + field[y0][:, x1] * fx[None, :, None]
    bot = field[y1][:, x0] * (1 - fx)[None, :, None] + field[y1][:, x1] * fx[None, :, None]
    return top * (1 - fy)[:, None, None] + bot * fy[:, None, None]


def patch_unaries(features: PatchFeatures, labels: np.ndarray) -> np.ndarray:
    """Per-patch distance to every cluster centroid, normalised by the patch's largest distance."""
    x = features.data
    flat = labels.reshape(-1)
    k = int(flat.max()) + 1
    centroids = np.stack([x[flat == j].mean(axis=0) for j in range(k)])
    d = np.linalg.norm(x[:, None, :] - centroids[None], axis=-1)
    dmax = d.max(axis=1, keepdims=True)
    d = np.divide(d, dmax, out=np.zeros_like(d), where=dmax > 0)
    return d.reshape(*features.grid, k)


def _softmax(e):
    e = e - e.max(axis=-1, keepdims=True)
    p = np.exp(e)
    return p / p.sum(axis=-1, keepdims=True)


def _gaussian_filter(q: np.ndarray, sxy: float) -> np.ndarray:
    r = max(1, int(np.ceil(4 * sxy)))
    t = np.arange(-r, r + 1)
    k = np.exp(-t ** 2 / (2 * sxy ** 2))
    out = correlate1d(q, k, axis=0, mode="constant")
    return correlate1d(out, k, axis=1, mode="constant")


class _Gaussian:
    """Spatial kernel, symmetrically normalised: D^-1/2 K D^-1/2 without the self term."""

    def __init__(self, shape: tuple[int, int], sxy: float):
        self.sxy = sxy
        self.norm = 1.0 / np.sqrt(_gaussian_filter(np.ones(shape), sxy))[..., None]

    def message(self, q: np.ndarray) -> np.ndarray:
        nq = self.norm * q
        return self.norm * (_gaussian_filter(nq, self.sxy) - nq)


class _Bilateral:
    """Position + colour kernel, symmetrically normalised, self term excluded."""

    def __init__(self, image: np.ndarray, sxy: float, srgb: float, chunk: int = 1024):
        H, W = image.shape[:2]
        yy, xx = np.mgrid[0:H, 0:W]
        f = np.concatenate([
            np.stack([yy, xx], -1).reshape(-1, 2) / sxy,
            image.reshape(-1, 3).astype(np.float64) / srgb], axis=1)
        self.f = f
        self.sq = np.einsum("ij,ij->i", f, f)
        self.chunk = chunk
        n = len(f)
        self.dense = self._rows(0, n).astype(np.float32) if n * n <= (1 << 24) else None
        self.norm = 1.0 / np.sqrt(self._apply(np.ones((n, 1))))

    def _rows(self, lo, hi):
        d2 = self.sq[lo:hi, None] + self.sq[None, :] - 2.0 * self.f[lo:hi] @ self.f.T
        return np.exp(-0.5 * np.maximum(d2, 0.0))

    def _apply(self, flat: np.ndarray) -> np.ndarray:
        if self.dense is not None:
            return (self.dense @ flat.astype(np.float32)).astype(np.float64)
        return np.concatenate([self._rows(lo, min(lo + self.chunk, len(flat))) @ flat
                               for lo in range(0, len(flat), self.chunk)])

    def message(self, q: np.ndarray) -> np.ndarray:
        nq = self.norm * q.reshape(-1, q.shape[-1])
        return (self.norm * (self._apply(nq) - nq)).reshape(q.shape)


def mean_field(unary: np.ndarray, image: np.ndarray, params: CRFParams, scale: float = 1.0) -> np.ndarray:
    """Potts-model mean-field inference; returns per-pixel label marginals."""
    q = _softmax(-unary)
    gauss = _Gaussian(image.shape[:2], params.gaussian_sxy * scale)
    bil = _Bilateral(image, params.bilateral_sxy * scale, params.bilateral_srgb)
    for _ in range(params.iterations):
        msg = params.gaussian_weight * gauss.message(q) + params.bilateral_weight * bil.message(q)
        q = _softmax(-unary + msg)
    return q


def upsample_and_refine(labels: np.ndarray, features: PatchFeatures, image: np.ndarray,
                        params: CRFParams = CRFParams(),
                        node_ids: Optional[list[int]] = None) -> tuple[list[SegmentMask], list[str]]:
    """Refine a patch-grid labelling (values 0..k-1) into disjoint pixel masks covering the image.

    Returns the masks (in label order, empty labels dropped) and any warnings raised.
    """
    image = check_image(image)
    labels = np.asarray(labels)
    if labels.shape != tuple(features.grid):
        raise ValueError(f"label grid {labels.shape} does not match features {features.grid}")
    H, W = image.shape[:2]
    k = int(labels.max()) + 1
    node_ids = list(range(k)) if node_ids is None else list(node_ids)
    warnings: list[str] = []
    unary_grid = patch_unaries(features, labels)

    if params.iterations == 0 or k == 1:
        pixel = nearest_upsample(labels, (H, W))
    else:
        scale = min(1.0, np.sqrt(params.max_pixels / (H * W)))
        h, w = max(1, round(H * scale)), max(1, round(W * scale))
        work = image if (h, w) == (H, W) else np.asarray(Image.fromarray(image).resize((w, h), Image.BOX))
        unary = params.unary_weight * bilinear_upsample(unary_grid, (h, w))
        q = mean_field(unary, work, params, scale=h / H)
        if (h, w) != (H, W):
            q = bilinear_upsample(q, (H, W))
        pixel = q.argmax(axis=-1)

    areas = np.bincount(pixel.ravel(), minlength=k)
    keep = [j for j in range(k) if areas[j] >= params.min_area]
    if not keep:
        keep = [int(np.argmax(areas))]
    for j in range(k):
        if j in keep:
            continue
        msg = f"segment for node {node_ids[j]} degenerate after CRF (area {areas[j]}); dropped"
        log.warning(msg)
        warnings.append(msg)
        if areas[j]:
            full = bilinear_upsample(unary_grid, (H, W))[..., keep]
            sel = pixel == j
            pixel[sel] = np.asarray(keep)[full[sel].argmin(axis=-1)]
    masks = [SegmentMask(mask=pixel == j, node_id=node_ids[j]) for j in keep]
    return masks, warnings
