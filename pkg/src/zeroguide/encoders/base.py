from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Optional, Protocol

import numpy as np


class BackendUnavailable(RuntimeError):
    """A model backend could not be opened, or a lookup key is missing from a replay bank."""


class ShapeMismatch(ValueError):
    pass


def check_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 RGB raster, got shape {image.shape}")
    if image.dtype != np.uint8:
        raise ValueError(f"expected 8-bit image, got {image.dtype}")
    return image


def image_digest(image: np.ndarray) -> str:
    """Content key used to index per-image tensors in replay files."""
    image = check_image(image)
    h = hashlib.sha1()
    h.update(f"{image.shape[0]}x{image.shape[1]}".encode())
    h.update(np.ascontiguousarray(image).tobytes())
    return h.hexdigest()[:16]


@dataclass(frozen=True)
class PatchFeatureRequest:
    image: np.ndarray
    grid: tuple[int, int]

    def __post_init__(self):
        check_image(self.image)
        rows, cols = self.grid
        if rows < 1 or cols < 1:
            raise ValueError(f"invalid patch grid {self.grid}")


@dataclass(frozen=True)
class PatchFeatures:
    grid: tuple[int, int]
    data: np.ndarray

    def __post_init__(self):
        rows, cols = self.grid
        if self.data.ndim != 2 or self.data.shape[0] != rows * cols:
            raise ShapeMismatch(
                f"feature matrix {self.data.shape} does not match grid {self.grid}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("patch features contain NaN/Inf")

    @property
    def channels(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class AttentionLayerState:
    """Per-head projections of one attention layer; token 0 is the global token.

    ``q``, ``k`` and ``v`` have shape (heads, tokens, d_k). ``layer`` is 1-indexed.
    """
    layer: int
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray

    @property
    def heads(self) -> int:
        return self.q.shape[0]

    @property
    def tokens(self) -> int:
        return self.q.shape[1]

    @property
    def d_k(self) -> int:
        return self.q.shape[2]


# hook(state, attention_output) -> replacement attention output, same shape (heads, T, d_k)
AttentionHook = Callable[[AttentionLayerState, np.ndarray], np.ndarray]


def identity_hook(state: AttentionLayerState, attn: np.ndarray) -> np.ndarray:
    return attn


class PatchFeatureExtractor(Protocol):
    def extract_patch_features(self, req: PatchFeatureRequest) -> PatchFeatures: ...

    def feature_grid(self, image: np.ndarray) -> tuple[int, int]: ...


class JointEncoder(Protocol):
    num_layers: int
    grid: tuple[int, int]
    embed_dim: int

    def run_joint_encoder(self, image: np.ndarray, hook: Optional[AttentionHook] = None,
                          layers: Optional[tuple[int, int]] = None) -> np.ndarray: ...

    def image_embedding(self, image: np.ndarray) -> np.ndarray: ...

    def embed_text(self, text: str) -> np.ndarray: ...


class SentenceEncoder(Protocol):
    def embed_sentence_pairwise(self, text: str) -> np.ndarray: ...


@dataclass(frozen=True)
class EncoderSession:
    """A joint encoder plus the (1-indexed, inclusive) layer range that hooks apply to."""
    encoder: JointEncoder
    l_start: int
    l_end: int

    def __post_init__(self):
        if not 1 <= self.l_start <= self.l_end <= self.encoder.num_layers:
            raise ValueError(
                f"hook range [{self.l_start}, {self.l_end}] outside 1..{self.encoder.num_layers}")

    def run(self, image: np.ndarray, hook: Optional[AttentionHook] = None) -> np.ndarray:
        return self.encoder.run_joint_encoder(image, hook, (self.l_start, self.l_end))


def require_text(text: str) -> str:
    if not isinstance(text, str) or not text.strip():
        raise ValueError("text must be a non-empty string")
    return text
