"""Merging sibling segments of the clustering tree by visual + text similarity."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .labeling import LabeledSegment, TextLabel, cossim
from .oversegmentation import MergeTree

# mask -> (segment embedding, label) for a freshly merged region
Relabel = Callable[[np.ndarray], tuple[np.ndarray, TextLabel]]


class FrontierMismatch(ValueError):
    pass


@dataclass(frozen=True)
class MergeDecision:
    a: int
    b: int
    parent: Optional[int]
    visual: float
    text: float
    combined: float
    merged: bool


def score_pair(a: LabeledSegment, b: LabeledSegment, tau_merge: float = 0.8,
               parent: Optional[int] = None) -> MergeDecision:
    for seg in (a, b):
        if seg.embedding is None or seg.label is None or seg.label.joint is None:
            raise ValueError(f"segment {seg.node_id} lacks an embedding or labelled text embedding")
    visual = cossim(a.embedding, b.embedding)
    text = cossim(a.label.joint, b.label.joint)
    combined = (visual + text) / 2.0
    return MergeDecision(a=a.node_id, b=b.node_id, parent=parent, visual=visual, text=text,
                         combined=combined, merged=combined >= tau_merge)


def _promote_orphans(tree: MergeTree, active: dict[int, LabeledSegment]) -> list[tuple[int, int]]:
    """Lift a segment to its parent when the sibling subtree holds no segment (e.g. dropped by CRF).

    Returns the (old, new) node id moves.
    """
    moves = []
    changed = True
    while changed:
        changed = False
        covered = set(active)
        for node_id in active:
            covered.update(tree.ancestors(node_id))
        for node_id in sorted(active):
            sib = tree.sibling(node_id)
            if sib is not None and sib not in covered:
                seg = replace(active.pop(node_id), node_id=tree.nodes[node_id].parent)
                active[seg.node_id] = seg
                moves.append((node_id, seg.node_id))
                changed = True
                break
    return moves


def merge_up_tree(tree: MergeTree, segments: list[LabeledSegment], tau_merge: float,
                  relabel: Relabel, decisions: Optional[list[MergeDecision]] = None
                  ) -> list[LabeledSegment]:
    """Merge sibling segments bottom-up while their combined similarity is at least ``tau_merge``.

    Merged regions are re-encoded and re-labelled through ``relabel`` and may then merge
    with their own sibling. Returns the surviving segments ordered by node id.
    """
    frontier = set(tree.frontier)
    active: dict[int, LabeledSegment] = {}
    for seg in segments:
        if seg.node_id not in frontier:
            raise FrontierMismatch(f"segment node {seg.node_id} is not on the tree frontier")
        if seg.node_id in active:
            raise FrontierMismatch(f"two segments claim node {seg.node_id}")
        active[seg.node_id] = seg
    # unmerged segments keep their candidate id even if promotion moved them
    origin = {n: n for n in active}

    def promote():
        for old, new in _promote_orphans(tree, active):
            origin[new] = origin.pop(old)

    promote()

    rejected: set[int] = set()
    while True:
        level = sorted({tree.nodes[n].parent for n in active if tree.nodes[n].parent is not None})
        level = [p for p in level if p not in rejected
                 and tree.nodes[p].left in active and tree.nodes[p].right in active]
        if not level:
            break
        for p in level:
            left, right = active[tree.nodes[p].left], active[tree.nodes[p].right]
            d = score_pair(left, right, tau_merge, parent=p)
            if decisions is not None:
                decisions.append(d)
            if not d.merged:
                rejected.add(p)
                continue
            mask = left.mask | right.mask
            embedding, label = relabel(mask)
            del active[left.node_id], active[right.node_id]
            origin.pop(left.node_id, None)
            origin.pop(right.node_id, None)
            active[p] = LabeledSegment(node_id=p, mask=mask, embedding=embedding, label=label)
        promote()
    out = [replace(seg, node_id=origin[k]) if k in origin else seg for k, seg in active.items()]
    return sorted(out, key=lambda seg: seg.node_id)
