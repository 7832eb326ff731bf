from __future__ import annotations

import numpy as np

from ..encoders import PatchFeatureExtractor, PatchFeatureRequest, check_image
from .crf import CRFParams, SegmentMask, upsample_and_refine
from .tree import ClusterNode, MergeTree, agglomerate, prune_siblings, replay_history

__all__ = [
    "CRFParams", "ClusterNode", "MergeTree", "SegmentMask", "agglomerate", "prune_siblings",
    "replay_history", "segment_candidates", "upsample_and_refine",
]


def segment_candidates(image: np.ndarray, backend: PatchFeatureExtractor, n_target: int = 20,
                       t_feature: float = 0.9, crf: CRFParams = CRFParams()
                       ) -> tuple[MergeTree, list[SegmentMask], list[str]]:
    """Over-segment an image: cluster patch features, prune similar siblings, refine to pixels."""
    image = check_image(image)
    grid = backend.feature_grid(image)
    if image.shape[0] < grid[0] or image.shape[1] < grid[1]:
        raise ValueError(f"image {image.shape[:2]} is smaller than one patch of the {grid} grid")
    features = backend.extract_patch_features(PatchFeatureRequest(image=image, grid=grid))
    tree = prune_siblings(agglomerate(features, n_target), t_feature)
    masks, warnings = upsample_and_refine(tree.label_grid(), features, image, crf, node_ids=tree.frontier)
    return tree, masks, warnings
