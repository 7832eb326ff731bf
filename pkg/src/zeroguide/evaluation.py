"""Label reassignment, verification and the free-form segmentation metrics."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .encoders import JointEncoder, SentenceEncoder
from .labeling import LabeledSegment, TextLabel, unit

TT, ST = "tt", "st"
SBERT_SWEEP = tuple(round(0.1 * i, 2) for i in range(11))
CLIP_SWEEP = tuple(round(0.05 * i, 2) for i in range(8))
UNVERIFIED_NOTE = "unverified segments count as unlabeled prediction area"


@dataclass(frozen=True)
class Thresholds:
    sbert: float = 0.5
    clip: float = 0.1
    iou: float = 0.5

    def for_method(self, method: str) -> float:
        if method == TT:
            return self.sbert
        if method == ST:
            return self.clip
        raise ValueError(f"unknown reassignment method {method!r}")


@dataclass
class GroundTruth:
    labels: np.ndarray          # H x W class indices
    classes: list[str]
    ignore_index: int = 255

    def __post_init__(self):
        if not self.classes:
            raise ValueError("ground truth needs a non-empty class list")
        lab = self.labels
        bad = (lab != self.ignore_index) & ((lab < 0) | (lab >= len(self.classes)))
        if np.any(bad):
            raise ValueError(f"class index {int(lab[bad][0])} outside the class list")

    @property
    def valid(self) -> np.ndarray:
        return self.labels != self.ignore_index

    def present(self) -> list[int]:
        return [int(c) for c in np.unique(self.labels[self.valid])]

    def mask(self, c: int) -> np.ndarray:
        return self.labels == c


@dataclass
class ReassignedSegment:
    segment: LabeledSegment
    target: str
    target_index: int
    method: str
    score: float
    verified: bool


def _nearest(vec: np.ndarray, class_vecs: np.ndarray) -> tuple[int, float]:
    scores = np.stack([unit(v) for v in class_vecs]) @ unit(vec)
    i = int(np.argmax(scores))  # first maximum: class-list order breaks ties
    return i, float(np.clip(scores[i], -1.0, 1.0))


def reassign_tt(label: TextLabel, classes: Sequence[str], sentence_encoder: SentenceEncoder
                ) -> tuple[str, float]:
    """Nearest test class to the predicted text in sentence-similarity space."""
    if not classes:
        raise ValueError("class list is empty")
    vec = label.sentence if label.sentence.size else sentence_encoder.embed_sentence_pairwise(label.text)
    i, s = _nearest(vec, np.stack([sentence_encoder.embed_sentence_pairwise(c) for c in classes]))
    return classes[i], s


def reassign_st(segment: LabeledSegment, classes: Sequence[str], encoder: JointEncoder
                ) -> tuple[str, float]:
    """Nearest test class to the segment embedding in the joint image-text space."""
    if not classes:
        raise ValueError("class list is empty")
    i, s = _nearest(segment.embedding, np.stack([encoder.embed_text(c) for c in classes]))
    return classes[i], s


def verify(score: float, method: str, thresholds: Thresholds = Thresholds()) -> bool:
    return score >= thresholds.for_method(method)


def reassign(segments: Sequence[LabeledSegment], classes: Sequence[str], method: str,
             encoder: JointEncoder, sentence_encoder: SentenceEncoder,
             thresholds: Thresholds = Thresholds()) -> list[ReassignedSegment]:
    out = []
    for seg in segments:
        if method == TT:
            target, score = reassign_tt(seg.label, classes, sentence_encoder)
        elif method == ST:
            target, score = reassign_st(seg, classes, encoder)
        else:
            raise ValueError(f"unknown reassignment method {method!r}")
        out.append(ReassignedSegment(seg, target, list(classes).index(target), method, score,
                                     verify(score, method, thresholds)))
    return out


def with_threshold(reassigned: Sequence[ReassignedSegment], threshold: float) -> list[ReassignedSegment]:
    return [ReassignedSegment(r.segment, r.target, r.target_index, r.method, r.score, r.score >= threshold)
            for r in reassigned]


def prediction_map(reassigned: Sequence[ReassignedSegment], shape: tuple[int, int]) -> np.ndarray:
    """Per-pixel reassigned class index; -1 where no verified segment lies."""
    pred = np.full(shape, -1, dtype=np.int64)
    for r in reassigned:
        if r.verified:
            if r.segment.mask.shape != tuple(shape):
                raise ValueError(f"segment mask {r.segment.mask.shape} vs ground truth {tuple(shape)}")
            pred[r.segment.mask] = r.target_index
    return pred


@dataclass
class ImageIoU:
    intersection: np.ndarray  # per class, over the full class list
    union: np.ndarray
    present: list[int]        # classes present in the ground truth

    def iou(self, c: int) -> float:
        return float(self.intersection[c] / self.union[c]) if self.union[c] else 0.0

    @property
    def score(self) -> float:
        return float(np.mean([self.iou(c) for c in self.present])) if self.present else float("nan")


def segmentation_iou(reassigned: Sequence[ReassignedSegment], gt: GroundTruth) -> ImageIoU:
    pred = prediction_map(reassigned, gt.labels.shape)
    valid = gt.valid
    k = len(gt.classes)
    p = np.where(valid, pred, -1)
    g = np.where(valid, gt.labels, -1)
    inter = np.bincount(g[(p == g) & (g >= 0)], minlength=k)[:k]
    pred_area = np.bincount(p[p >= 0], minlength=k)[:k]
    gt_area = np.bincount(g[g >= 0], minlength=k)[:k]
    return ImageIoU(intersection=inter, union=pred_area + gt_area - inter, present=gt.present())


def segment_recall(reassigned: Sequence[ReassignedSegment], gt: GroundTruth,
                   tau_iou: float = 0.5) -> tuple[int, int]:
    """(true positives, ground-truth segments); one segment per class present in the image."""
    table = segmentation_iou(reassigned, gt)
    tp = sum(1 for c in table.present if table.iou(c) > tau_iou)
    return tp, len(table.present)


def rate(tp: int, total: int) -> float:
    return tp / total if total else float("nan")


def text_generation_quality(gt: GroundTruth, label_mask: Callable[[np.ndarray], tuple[np.ndarray, TextLabel]],
                            sentence_encoder: SentenceEncoder, tau_sbert: float = 0.5
                            ) -> tuple[int, int]:
    """Label every ground-truth segment with the pipeline; count sentence similarity > tau_sbert."""
    tp = 0
    present = gt.present()
    for c in present:
        _, label = label_mask(gt.mask(c))
        pred = label.sentence if label.sentence.size else sentence_encoder.embed_sentence_pairwise(label.text)
        ref = sentence_encoder.embed_sentence_pairwise(gt.classes[c])
        if float(unit(pred) @ unit(ref)) > tau_sbert:
            tp += 1
    return tp, len(present)


@dataclass
class EvalReport:
    """Accumulates per-image results; dataset mIoU pools intersections and unions per class."""
    classes: list[str]
    method: str
    thresholds: Thresholds = field(default_factory=Thresholds)
    intersection: np.ndarray = None
    union: np.ndarray = None
    rows: list[dict] = field(default_factory=list)
    image_scores: dict[str, float] = field(default_factory=dict)
    recall_tp: int = 0
    recall_total: int = 0
    tgq_tp: int = 0
    tgq_total: int = 0
    verified: int = 0
    segments: int = 0

    def __post_init__(self):
        k = len(self.classes)
        self.intersection = np.zeros(k, dtype=np.int64) if self.intersection is None else self.intersection
        self.union = np.zeros(k, dtype=np.int64) if self.union is None else self.union

    @property
    def threshold(self) -> float:
        return self.thresholds.for_method(self.method)

    def add_image(self, image_id: str, reassigned: Sequence[ReassignedSegment], gt: GroundTruth,
                  tgq: Optional[tuple[int, int]] = None) -> None:
        table = segmentation_iou(reassigned, gt)
        self.intersection += table.intersection
        self.union += table.union
        tp, total = segment_recall(reassigned, gt, self.thresholds.iou)
        self.recall_tp += tp
        self.recall_total += total
        if tgq is not None:
            self.tgq_tp += tgq[0]
            self.tgq_total += tgq[1]
        self.verified += sum(r.verified for r in reassigned)
        self.segments += len(reassigned)
        self.image_scores[image_id] = table.score
        for c in table.present:
            self.rows.append({
                "image_id": image_id, "class": gt.classes[c],
                "intersection": int(table.intersection[c]), "union": int(table.union[c]),
                "iou": table.iou(c), "tp": int(table.iou(c) > self.thresholds.iou),
            })

    def class_iou(self) -> dict[str, float]:
        return {c: float(self.intersection[i] / self.union[i])
                for i, c in enumerate(self.classes) if self.union[i] > 0}

    @property
    def miou(self) -> float:
        ious = list(self.class_iou().values())
        return float(np.mean(ious)) if ious else float("nan")

    def summary(self) -> dict:
        def r6(x):
            return None if x != x else round(float(x), 6)
        return {
            "method": self.method,
            "threshold": self.threshold,
            "thresholds": {"sbert": self.thresholds.sbert, "clip": self.thresholds.clip,
                           "iou": self.thresholds.iou},
            "mean_iou": r6(self.miou),
            "mean_image_iou": r6(np.mean(list(self.image_scores.values()))) if self.image_scores else None,
            "segment_recall": r6(rate(self.recall_tp, self.recall_total)),
            "tgq": r6(rate(self.tgq_tp, self.tgq_total)),
            "counts": {"images": len(self.image_scores), "recall_tp": self.recall_tp,
                       "gt_segments": self.recall_total, "tgq_tp": self.tgq_tp,
                       "tgq_total": self.tgq_total, "segments": self.segments,
                       "verified": self.verified},
            "class_iou": {k: r6(v) for k, v in self.class_iou().items()},
            "notes": [UNVERIFIED_NOTE],
        }

    def write(self, out_dir: str | Path, stem: str) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / f"{stem}.csv"
        with open(csv_path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=["image_id", "class", "intersection", "union", "iou", "tp"])
            writer.writeheader()
            for row in self.rows:
                writer.writerow({**row, "iou": f"{row['iou']:.6f}"})
        json_path = out_dir / f"{stem}.json"
        json_path.write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        return csv_path, json_path
