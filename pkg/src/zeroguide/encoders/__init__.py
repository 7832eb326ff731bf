from .base import (AttentionHook, AttentionLayerState, BackendUnavailable, EncoderSession,
                   JointEncoder, PatchFeatureExtractor, PatchFeatureRequest, PatchFeatures,
                   SentenceEncoder, ShapeMismatch, check_image, identity_hook, image_digest)
from .replay import ReplayBackend
from .vit import VisionTransformer

__all__ = [
    "AttentionHook", "AttentionLayerState", "BackendUnavailable", "EncoderSession",
    "JointEncoder", "PatchFeatureExtractor", "PatchFeatureRequest", "PatchFeatures",
    "ReplayBackend", "SentenceEncoder", "ShapeMismatch", "VisionTransformer",
    "check_image", "identity_hook", "image_digest", "open_backend",
]


def open_backend(name: str):
    """Open a backend from a CLI-style string: ``replay:<file>`` or ``live``."""
    if name.startswith("replay:"):
        return ReplayBackend.open(name[len("replay:"):])
    if name == "live":
        from .live import LiveBackend
        return LiveBackend()
    raise ValueError(f"unknown backend {name!r}; expected 'live' or 'replay:<file>'")
