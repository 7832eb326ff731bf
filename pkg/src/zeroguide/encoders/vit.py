"""Numpy forward pass of a CLIP-style vision transformer with attention hooks.

Parameters live in a flat dict under the ``clip/`` prefix so the same weights can
be stored in a replay container or converted from a live checkpoint.
"""
from __future__ import annotations

from typing import Mapping, Optional

import numpy as np
from PIL import Image

from .base import AttentionHook, AttentionLayerState, ShapeMismatch, check_image

ACTIVATIONS = {0: "quick_gelu", 1: "gelu"}


def _layer_norm(x, w, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * w + b


def _quick_gelu(x):
    return x / (1.0 + np.exp(-1.702 * x))


def _gelu(x):
    from scipy.special import erf
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def softmax(x, axis=-1):
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=axis, keepdims=True)


class VisionTransformer:
    """Pre-LN ViT; ``layers`` passed to ``run_joint_encoder`` are 1-indexed and inclusive."""

    def __init__(self, params: Mapping[str, np.ndarray]):
        p = {k[len("clip/"):]: np.asarray(v, dtype=np.float64)
             for k, v in params.items() if k.startswith("clip/")}
        if "config" not in p:
            raise KeyError("missing clip/config entry")
        cfg = p["config"]
        self.patch_size = int(cfg[0])
        self.num_heads = int(cfg[1])
        self.image_size = int(cfg[2])
        self.activation = ACTIVATIONS[int(cfg[3])]
        self.p = p
        self.width = p["class_embed"].shape[0]
        self.embed_dim = p["proj"].shape[0]
        n = self.image_size // self.patch_size
        self.grid = (n, n)
        self.num_layers = 0
        while f"L{self.num_layers + 1}/q/w" in p:
            self.num_layers += 1
        if p["pos_embed"].shape[0] != n * n + 1:
            raise ShapeMismatch("position embedding does not match the patch grid")
        if self.width % self.num_heads:
            raise ValueError("width is not divisible by head count")
        self.mean = p.get("pixel_mean", np.zeros(3))
        self.std = p.get("pixel_std", np.ones(3))

    def preprocess(self, image: np.ndarray) -> np.ndarray:
        image = check_image(image)
        if image.shape[:2] != (self.image_size, self.image_size):
            image = np.asarray(Image.fromarray(image).resize(
                (self.image_size, self.image_size), Image.BICUBIC))
        return (image.astype(np.float64) / 255.0 - self.mean) / self.std

    def _patchify(self, x: np.ndarray) -> np.ndarray:
        ps = self.patch_size
        n = self.image_size // ps
        x = x.reshape(n, ps, n, ps, 3).transpose(0, 2, 4, 1, 3)
        return x.reshape(n * n, 3 * ps * ps)

    def forward(self, image: np.ndarray, hook: Optional[AttentionHook] = None,
                layers: Optional[tuple[int, int]] = None) -> np.ndarray:
        p = self.p
        patches = self._patchify(self.preprocess(image)) @ p["patch_embed"].T
        x = np.concatenate([p["class_embed"][None], patches], axis=0) + p["pos_embed"]
        x = _layer_norm(x, p["pre_ln/w"], p["pre_ln/b"])
        T = x.shape[0]
        H = self.num_heads
        dk = self.width // H
        lo, hi = layers if layers is not None else (1, self.num_layers)
        act = _quick_gelu if self.activation == "quick_gelu" else _gelu
        for l in range(1, self.num_layers + 1):
            pre = f"L{l}/"
            h = _layer_norm(x, p[pre + "ln1/w"], p[pre + "ln1/b"])
            q, k, v = (
                (h @ p[pre + n + "/w"].T + p[pre + n + "/b"]).reshape(T, H, dk).transpose(1, 0, 2)
                for n in ("q", "k", "v"))
            attn = softmax(q @ k.transpose(0, 2, 1) / np.sqrt(dk)) @ v
            if hook is not None and lo <= l <= hi:
                state = AttentionLayerState(layer=l, q=q, k=k, v=v)
                out = np.asarray(hook(state, attn))
                if out.shape != attn.shape:
                    raise ShapeMismatch(
                        f"hook at layer {l} returned {out.shape}, expected {attn.shape}")
                attn = out
            merged = attn.transpose(1, 0, 2).reshape(T, self.width)
            x = x + merged @ p[pre + "out/w"].T + p[pre + "out/b"]
            h = _layer_norm(x, p[pre + "ln2/w"], p[pre + "ln2/b"])
            x = x + act(h @ p[pre + "fc1/w"].T + p[pre + "fc1/b"]) @ p[pre + "fc2/w"].T + p[pre + "fc2/b"]
        cls = _layer_norm(x[0], p["post_ln/w"], p["post_ln/b"])
        return p["proj"] @ cls


def random_vit_params(rng: np.random.Generator, *, image_size=64, patch_size=8, width=32,
                      heads=2, layers=24, mlp=64, embed_dim=16, late_layers=4) -> dict[str, np.ndarray]:
    """Small randomly initialised encoder for synthetic replay fixtures.

    Attention branches before the last ``late_layers`` are scaled down so tokens keep
    their local content until the layers where segment masking applies.
    """
    n = image_size // patch_size
    T = n * n + 1
    s = 1.0 / np.sqrt(width)
    out = {
        "clip/config": np.array([patch_size, heads, image_size, 0], dtype=np.float32),
        "clip/pixel_mean": np.full(3, 0.5),
        "clip/pixel_std": np.full(3, 0.25),
        "clip/patch_embed": rng.normal(0, 1 / np.sqrt(3 * patch_size ** 2), (width, 3 * patch_size ** 2)),
        "clip/class_embed": rng.normal(0, 0.5, width),
        "clip/pos_embed": rng.normal(0, 0.1, (T, width)),
        "clip/pre_ln/w": np.ones(width), "clip/pre_ln/b": np.zeros(width),
        "clip/post_ln/w": np.ones(width), "clip/post_ln/b": np.zeros(width),
        "clip/proj": rng.normal(0, s, (embed_dim, width)),
    }
    for l in range(1, layers + 1):
        pre = f"clip/L{l}/"
        out[pre + "ln1/w"] = np.ones(width)
        out[pre + "ln1/b"] = np.zeros(width)
        out[pre + "ln2/w"] = np.ones(width)
        out[pre + "ln2/b"] = np.zeros(width)
        for name in ("q", "k"):
            out[pre + name + "/w"] = rng.normal(0, s, (width, width))
            out[pre + name + "/b"] = np.zeros(width)
        out[pre + "v/w"] = np.eye(width) + rng.normal(0, 0.3 * s, (width, width))
        out[pre + "v/b"] = np.zeros(width)
        gain = 1.0 if l > layers - late_layers else 0.05
        out[pre + "out/w"] = gain * (np.eye(width) + rng.normal(0, 0.2 * s, (width, width)))
        out[pre + "out/b"] = np.zeros(width)
        out[pre + "fc1/w"] = rng.normal(0, s, (mlp, width))
        out[pre + "fc1/b"] = np.zeros(mlp)
        out[pre + "fc2/w"] = rng.normal(0, 0.2 / np.sqrt(mlp), (width, mlp))
        out[pre + "fc2/b"] = np.zeros(width)
    return {k: np.asarray(v, dtype=np.float32) for k, v in out.items()}
