"""Segment embeddings via attention masking with saliency-weighted global subtraction."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .encoders import AttentionLayerState, EncoderSession, JointEncoder, check_image


class MaskedOutError(ValueError):
    """Every entry of a softmax row was masked out."""


def masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """``exp(x) * M / sum(exp(x) * M)`` along the last axis.

    Stabilised by subtracting ``max(x + log M)``; masked entries come out exactly 0.
    """
    x = np.asarray(logits, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    if np.any(m < 0) or np.any(m > 1):
        raise ValueError("mask values must lie in [0, 1]")
    with np.errstate(divide="ignore"):
        z = x + np.log(m)
    top = z.max(axis=-1, keepdims=True)
    if not np.all(np.isfinite(top)):
        raise MaskedOutError("masked softmax row has no unmasked finite logit")
    e = np.exp(z - top)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class AttentionMask:
    """Flattened token mask; entry 0 is the global token and is always 1."""
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or len(v) < 2:
            raise ValueError("attention mask must be a flat vector over global + patch tokens")
        if v[0] != 1.0:
            raise ValueError("global token entry must be 1")
        if np.any(v < 0) or np.any(v > 1):
            raise ValueError("mask values must lie in [0, 1]")
        if not np.any(v[1:] > 0):
            raise ValueError("attention mask selects no patch")
        object.__setattr__(self, "values", v)

    @property
    def tokens(self) -> int:
        return len(self.values)


def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) matrix of the fraction of each input pixel falling in each output cell."""
    edges = np.arange(n_out + 1) * (n_in / n_out)
    lo = np.maximum(edges[:-1, None], np.arange(n_in)[None, :])
    hi = np.minimum(edges[1:, None], np.arange(1, n_in + 1)[None, :])
    return np.clip(hi - lo, 0.0, None)


def downsample_mask(mask: np.ndarray, grid: tuple[int, int]) -> AttentionMask:
    """Area-interpolate a pixel mask onto the patch grid and prepend the global-token slot."""
    m = np.asarray(mask, dtype=np.float64)
    rows, cols = grid
    H, W = m.shape
    if H < rows or W < cols:
        raise ValueError(f"mask {m.shape} is coarser than grid {grid}")
    wy = _area_weights(H, rows)
    wx = _area_weights(W, cols)
    cells = wy @ m @ wx.T / (wy.sum(1)[:, None] * wx.sum(1)[None, :])
    return AttentionMask(np.concatenate([[1.0], np.clip(cells, 0.0, 1.0).ravel()]))


@dataclass(frozen=True)
class GlobalSubtractionConfig:
    sigma_sq: float = 2.5
    l_start: int = 21
    l_end: int = 24
    weight_override: Optional[float] = None  # pin w (e.g. 0 disables subtraction)

    def __post_init__(self):
        if not self.sigma_sq > 0:
            raise ValueError("sigma_sq must be positive")
        if not 1 <= self.l_start <= self.l_end:
            raise ValueError(f"invalid layer range [{self.l_start}, {self.l_end}]")


@dataclass(frozen=True)
class LayerSaliency:
    layer: int
    saliency: float
    weight: float


def subtraction_weight(saliency: float, sigma_sq: float) -> float:
    """Gaussian in (S + 1): 1 at S = -1, exp(-2 / sigma_sq) at S = 1."""
    return float(np.exp(-(saliency + 1.0) ** 2 / (2.0 * sigma_sq)))


def _rowwise_cos(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    denom = na * nb
    dots = np.einsum("ij,ij->i", a, b)
    cos = np.divide(dots, denom, out=np.zeros_like(dots), where=denom > 0)
    return np.clip(cos, -1.0, 1.0)


def layer_transform(state: AttentionLayerState, mask: AttentionMask,
                    cfg: GlobalSubtractionConfig) -> tuple[np.ndarray, LayerSaliency]:
    """Masked attention output minus the saliency-weighted unmasked global-token output.

    Returns the per-head output, shape (heads, T, d_k), and the layer's saliency record.
    """
    if not cfg.l_start <= state.layer <= cfg.l_end:
        raise ValueError(f"layer {state.layer} outside masking range [{cfg.l_start}, {cfg.l_end}]")
    if mask.tokens != state.tokens:
        raise ValueError(f"mask has {mask.tokens} entries for {state.tokens} tokens")
    logits = state.q @ state.k.transpose(0, 2, 1) / np.sqrt(state.d_k)
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    plain = (e / e.sum(axis=-1, keepdims=True)) @ state.v
    masked = masked_softmax(logits, mask.values) @ state.v
    T = state.tokens
    flat_plain = plain.transpose(1, 0, 2).reshape(T, -1)
    flat_masked = masked.transpose(1, 0, 2).reshape(T, -1)
    s = float(np.mean(_rowwise_cos(flat_plain, flat_masked)))
    w = subtraction_weight(s, cfg.sigma_sq) if cfg.weight_override is None else float(cfg.weight_override)
    out = masked - w * plain[:, :1, :]
    return out, LayerSaliency(layer=state.layer, saliency=s, weight=w)


@dataclass
class GlobalSubtractionHook:
    """Attention hook applying ``layer_transform``; records each layer's saliency."""
    mask: AttentionMask
    cfg: GlobalSubtractionConfig
    saliencies: list[LayerSaliency] = field(default_factory=list)

    def __call__(self, state: AttentionLayerState, attn: np.ndarray) -> np.ndarray:
        out, sal = layer_transform(state, self.mask, self.cfg)
        self.saliencies.append(sal)
        return out


def encode_segment(image: np.ndarray, mask: np.ndarray, encoder: JointEncoder,
                   cfg: GlobalSubtractionConfig = GlobalSubtractionConfig(),
                   saliencies: Optional[list[LayerSaliency]] = None) -> np.ndarray:
    """Joint-space embedding of one segment of ``image``.

    If ``saliencies`` is a list, the per-layer saliency records are appended to it.
    """
    image = check_image(image)
    mask = np.asarray(mask)
    if mask.shape != image.shape[:2]:
        raise ValueError(f"mask {mask.shape} does not match image {image.shape[:2]}")
    if not np.any(mask > 0):
        raise ValueError("cannot encode an empty segment mask")
    session = EncoderSession(encoder, cfg.l_start, cfg.l_end)
    hook = GlobalSubtractionHook(downsample_mask(mask, encoder.grid), cfg)
    emb = session.run(image, hook)
    if saliencies is not None:
        saliencies.extend(hook.saliencies)
    return emb


def write_saliency_csv(path: str | Path, rows: Iterable[tuple[str, int, LayerSaliency]]) -> None:
    """Debug dump: one row per (image id, segment id, layer) with S and w."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["image_id", "segment_id", "layer", "S", "w"])
        for image_id, segment_id, sal in rows:
            writer.writerow([image_id, segment_id, sal.layer, f"{sal.saliency:.9g}", f"{sal.weight:.9g}"])
