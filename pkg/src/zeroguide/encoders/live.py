"""Live backends over pretrained checkpoints (optional; needs torch + transformers).

The CLIP vision tower is converted into ``VisionTransformer`` parameters so the
hooked forward pass is the same code path as the replay backend.
"""
from __future__ import annotations

import os
from functools import lru_cache
from typing import Optional

import numpy as np
from PIL import Image

from .base import (AttentionHook, BackendUnavailable, PatchFeatureRequest, PatchFeatures,
                   ShapeMismatch, check_image, require_text)
from .vit import VisionTransformer

CLIP_MODEL = os.environ.get("ZEROGUIDE_CLIP_MODEL", "openai/clip-vit-large-patch14-336")
DINO_MODEL = os.environ.get("ZEROGUIDE_DINO_MODEL", "facebook/dino-vits8")
SBERT_MODEL = os.environ.get("ZEROGUIDE_SBERT_MODEL", "sentence-transformers/all-mpnet-base-v2")
CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)
DINO_SIZE = 224


def cache_dir() -> Optional[str]:
    return os.environ.get("ZEROGUIDE_CACHE")


def _import_torch():
    try:
        import torch
        import transformers
    except ImportError as exc:
        raise BackendUnavailable(f"live backend needs torch and transformers: {exc}") from exc
    return torch, transformers


def clip_to_params(model) -> dict[str, np.ndarray]:
    """Convert a transformers ``CLIPModel`` vision tower to flat ``clip/`` parameters."""
    sd = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    vc = model.config.vision_config
    act = {"quick_gelu": 0, "gelu": 1}[vc.hidden_act]
    v = "vision_model."
    out = {
        "clip/config": np.array([vc.patch_size, vc.num_attention_heads, vc.image_size, act], dtype=np.float32),
        "clip/pixel_mean": np.array(CLIP_MEAN),
        "clip/pixel_std": np.array(CLIP_STD),
        "clip/patch_embed": sd[v + "embeddings.patch_embedding.weight"].reshape(vc.hidden_size, -1),
        "clip/class_embed": sd[v + "embeddings.class_embedding"],
        "clip/pos_embed": sd[v + "embeddings.position_embedding.weight"],
        "clip/pre_ln/w": sd[v + "pre_layrnorm.weight"], "clip/pre_ln/b": sd[v + "pre_layrnorm.bias"],
        "clip/post_ln/w": sd[v + "post_layernorm.weight"], "clip/post_ln/b": sd[v + "post_layernorm.bias"],
        "clip/proj": sd["visual_projection.weight"],
    }
    for i in range(vc.num_hidden_layers):
        src = f"{v}encoder.layers.{i}."
        dst = f"clip/L{i + 1}/"
        for name, hf in (("q", "self_attn.q_proj"), ("k", "self_attn.k_proj"), ("v", "self_attn.v_proj"),
                         ("out", "self_attn.out_proj"), ("ln1", "layer_norm1"), ("ln2", "layer_norm2"),
                         ("fc1", "mlp.fc1"), ("fc2", "mlp.fc2")):
            out[dst + name + "/w"] = sd[src + hf + ".weight"]
            out[dst + name + "/b"] = sd[src + hf + ".bias"]
    return out


class LiveBackend:
    """DINO patch keys, CLIP joint space and Sentence-BERT, loaded lazily on first use."""

    def __init__(self, clip_model: str = CLIP_MODEL, dino_model: str = DINO_MODEL,
                 sbert_model: str = SBERT_MODEL):
        self.clip_name, self.dino_name, self.sbert_name = clip_model, dino_model, sbert_model
        self._clip = None
        self._vit: Optional[VisionTransformer] = None
        self._dino = None
        self._sbert = None
        _import_torch()

    def _load_clip(self):
        if self._clip is None:
            torch, transformers = _import_torch()
            try:
                model = transformers.CLIPModel.from_pretrained(self.clip_name, cache_dir=cache_dir())
                tok = transformers.CLIPTokenizer.from_pretrained(self.clip_name, cache_dir=cache_dir())
            except OSError as exc:
                raise BackendUnavailable(f"cannot load {self.clip_name}: {exc}") from exc
            model.eval()
            self._clip = (model, tok)
            self._vit = VisionTransformer(clip_to_params(model))
        return self._clip

    @property
    def vit(self) -> VisionTransformer:
        self._load_clip()
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

    def run_joint_encoder(self, image, hook: Optional[AttentionHook] = None, layers=None) -> np.ndarray:
        return self.vit.forward(image, hook, layers)

    def image_embedding(self, image) -> np.ndarray:
        torch, _ = _import_torch()
        model, _ = self._load_clip()
        x = self.vit.preprocess(image).transpose(2, 0, 1)[None]
        with torch.no_grad():
            feats = model.get_image_features(pixel_values=torch.tensor(x, dtype=torch.float32))
        return feats[0].numpy().astype(np.float64)

    @lru_cache(maxsize=4096)
    def embed_text(self, text: str) -> np.ndarray:
        torch, _ = _import_torch()
        model, tok = self._load_clip()
        inputs = tok([require_text(text)], padding=True, return_tensors="pt")
        with torch.no_grad():
            feats = model.get_text_features(**inputs)
        return feats[0].numpy().astype(np.float64)

    def _load_dino(self):
        if self._dino is None:
            torch, transformers = _import_torch()
            try:
                model = transformers.ViTModel.from_pretrained(self.dino_name, add_pooling_layer=False,
                                                              cache_dir=cache_dir())
            except OSError as exc:
                raise BackendUnavailable(f"cannot load {self.dino_name}: {exc}") from exc
            model.eval()
            self._dino = model
        return self._dino

    def feature_grid(self, image) -> tuple[int, int]:
        n = DINO_SIZE // self._load_dino().config.patch_size
        return n, n

    def extract_patch_features(self, req: PatchFeatureRequest) -> PatchFeatures:
        torch, _ = _import_torch()
        model = self._load_dino()
        grid = self.feature_grid(req.image)
        if tuple(req.grid) != grid:
            raise ShapeMismatch(f"backend grid is {grid}, request asked {tuple(req.grid)}")
        img = np.asarray(Image.fromarray(check_image(req.image)).resize((DINO_SIZE, DINO_SIZE), Image.BICUBIC))
        x = (img / 255.0 - np.array([0.485, 0.456, 0.406])) / np.array([0.229, 0.224, 0.225])
        captured = {}
        key_proj = model.encoder.layer[-1].attention.attention.key
        handle = key_proj.register_forward_hook(lambda m, i, o: captured.setdefault("k", o))
        try:
            with torch.no_grad():
                model(pixel_values=torch.tensor(x.transpose(2, 0, 1)[None], dtype=torch.float32))
        finally:
            handle.remove()
        keys = captured["k"][0, 1:].numpy().astype(np.float64)
        return PatchFeatures(grid=grid, data=keys)

    def embed_sentence_pairwise(self, text: str) -> np.ndarray:
        if self._sbert is None:
            try:
                from sentence_transformers import SentenceTransformer
                self._sbert = SentenceTransformer(self.sbert_name, cache_folder=cache_dir())
            except (ImportError, OSError) as exc:
                raise BackendUnavailable(f"cannot load {self.sbert_name}: {exc}") from exc
        return np.asarray(self._sbert.encode([require_text(text)])[0], dtype=np.float64)
