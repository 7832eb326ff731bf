"""File-replay backend: every model output comes from a ZGTR container.

Keys used:
    patch/<image digest>   rows x cols x C patch features
    clip/...               joint image encoder weights (see ``vit.py``)
    clipimg/<digest>       recorded native whole-image embedding (optional)
    text/<phrase>          joint-space text embedding
    sbert/<phrase>         sentence-similarity embedding
"""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from .. import tensorio
from .base import (AttentionHook, BackendUnavailable, PatchFeatureRequest, PatchFeatures,
                   ShapeMismatch, image_digest, require_text)
from .vit import VisionTransformer


class ReplayBackend:
    def __init__(self, tensors: Mapping[str, np.ndarray], source: str = "<memory>"):
        self.tensors = dict(tensors)
        self.source = source
        self._vit: Optional[VisionTransformer] = None
        if "clip/config" in self.tensors:
            self._vit = VisionTransformer(self.tensors)

    @classmethod
    def open(cls, path: str | Path) -> "ReplayBackend":
        path = Path(path)
        if not path.is_file():
            raise BackendUnavailable(f"replay file not found: {path}")
        return cls(tensorio.load(path), source=str(path))

    def _lookup(self, key: str) -> np.ndarray:
        try:
            return self.tensors[key]
        except KeyError:
            raise BackendUnavailable(f"replay bank {self.source} has no entry {key!r}") from None

    # patch features

    def feature_grid(self, image: np.ndarray) -> tuple[int, int]:
        arr = self._lookup(f"patch/{image_digest(image)}")
        return arr.shape[0], arr.shape[1]

    def extract_patch_features(self, req: PatchFeatureRequest) -> PatchFeatures:
        arr = self._lookup(f"patch/{image_digest(req.image)}")
        if arr.ndim != 3:
            raise ShapeMismatch(f"patch entry must be rank 3, got {arr.shape}")
        rows, cols, c = arr.shape
        if (rows, cols) != tuple(req.grid):
            raise ShapeMismatch(f"replay features have grid {(rows, cols)}, request asked {tuple(req.grid)}")
        return PatchFeatures(grid=(rows, cols), data=arr.reshape(rows * cols, c).astype(np.float64))

    # joint encoder

    @property
    def vit(self) -> VisionTransformer:
        if self._vit is None:
            raise BackendUnavailable(f"replay bank {self.source} holds no joint encoder weights")
        return self._vit

    @property
    def num_layers(self) -> int:
        return self.vit.num_layers

    @property
    def grid(self) -> tuple[int, int]:
        return self.vit.grid

    @property
    def embed_dim(self) -> int:
        return self.vit.embed_dim

    def run_joint_encoder(self, image: np.ndarray, hook: Optional[AttentionHook] = None,
                          layers: Optional[tuple[int, int]] = None) -> np.ndarray:
        return self.vit.forward(image, hook, layers)

    def image_embedding(self, image: np.ndarray) -> np.ndarray:
        key = f"clipimg/{image_digest(image)}"
        if key in self.tensors:
            return self.tensors[key].astype(np.float64)
        return self.vit.forward(image)

    def embed_text(self, text: str) -> np.ndarray:
        return self._lookup(f"text/{require_text(text)}").astype(np.float64)

    # sentence space

    def embed_sentence_pairwise(self, text: str) -> np.ndarray:
        return self._lookup(f"sbert/{require_text(text)}").astype(np.float64)
