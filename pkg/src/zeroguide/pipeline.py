"""End-to-end orchestration: candidates -> embeddings -> labels -> merging -> reports."""
from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from . import tensorio
from .config import ConfigError, RunConfig, load_config
from .dataset import DatasetIndex, ingest_dataset
from .encoders import open_backend
from .evaluation import (CLIP_SWEEP, SBERT_SWEEP, ST, TT, EvalReport, Thresholds, reassign,
                         text_generation_quality, with_threshold)
from .labeling import (DecoderUnavailable, LabeledSegment, RetrievalDecoder, TextLabel, VocabularyBank,
                       build_bank, decode, load_generative_decoder, read_phrase_list)
from .masked_attention import GlobalSubtractionConfig, LayerSaliency, encode_segment, write_saliency_csv
from .merging import MergeDecision, merge_up_tree
from .oversegmentation import CRFParams, MergeTree, segment_candidates
from .overlay import render_overlay

log = logging.getLogger(__name__)

COMPLETE = "complete.json"


class RunError(RuntimeError):
    pass


def _bank_cache_path(cfg: RunConfig, phrases: list[str]) -> Optional[Path]:
    root = os.environ.get("ZEROGUIDE_CACHE")
    if not root or cfg.backend != "live":
        return None
    digest = hashlib.sha1("\n".join(phrases).encode()).hexdigest()[:16]
    return Path(root) / "banks" / f"{digest}.zgtr"


def make_decoder(cfg: RunConfig, encoder, classes: Optional[list[str]] = None):
    if cfg.decoder == "generative":
        try:
            return load_generative_decoder()
        except DecoderUnavailable as exc:
            raise ConfigError(str(exc)) from exc
    if cfg.vocabulary:
        phrases = read_phrase_list(cfg.vocabulary)
    elif classes:
        phrases = list(classes)
    else:
        raise ConfigError("retrieval decoder needs a vocabulary file or dataset class list")
    cached = _bank_cache_path(cfg, phrases)
    if cached is not None and cached.is_file():
        bank = VocabularyBank.load(cached)
    else:
        bank = build_bank(phrases, encoder, source=cfg.vocabulary or "dataset classes")
        if cached is not None:
            cached.parent.mkdir(parents=True, exist_ok=True)
            bank.save(cached)
    return RetrievalDecoder(bank)


@dataclass
class ImageResult:
    tree: MergeTree
    candidates: list[LabeledSegment]
    segments: list[LabeledSegment]
    decisions: list[MergeDecision]
    warnings: list[str]
    saliency: list[tuple[int, LayerSaliency]] = field(default_factory=list)


class Pipeline:
    def __init__(self, cfg: RunConfig, backend=None, classes: Optional[list[str]] = None):
        self.cfg = cfg
        self.backend = backend if backend is not None else open_backend(cfg.backend)
        self.gs = GlobalSubtractionConfig(cfg.sigma_sq, cfg.layer_start, cfg.layer_end)
        self.crf = CRFParams(iterations=cfg.crf_iterations)
        self.decoder = make_decoder(cfg, self.backend, classes)

    def make_label(self, text: str, decoder: str, score: float) -> TextLabel:
        return TextLabel(text=text, joint=self.backend.embed_text(text),
                         sentence=self.backend.embed_sentence_pairwise(text), decoder=decoder, score=score)

    def label_mask(self, image: np.ndarray, mask: np.ndarray,
                   saliencies: Optional[list[LayerSaliency]] = None) -> tuple[np.ndarray, TextLabel]:
        emb = encode_segment(image, mask, self.backend, self.gs, saliencies)
        return emb, decode(emb, self.decoder, self.backend, self.backend)

    def segment_image(self, image: np.ndarray) -> ImageResult:
        cfg = self.cfg
        tree, masks, warnings = segment_candidates(image, self.backend, cfg.n_target, cfg.t_feature, self.crf)
        saliency: list[tuple[int, LayerSaliency]] = []

        def relabel(mask, node_id=None):
            sal: list[LayerSaliency] = []
            out = self.label_mask(image, mask, sal)
            saliency.extend((node_id, s) for s in sal)
            return out

        candidates = []
        for m in masks:
            emb, label = relabel(m.mask, m.node_id)
            candidates.append(LabeledSegment(node_id=m.node_id, mask=m.mask, embedding=emb, label=label))
        decisions: list[MergeDecision] = []
        segments = merge_up_tree(tree, candidates, cfg.tau_merge, relabel, decisions)
        return ImageResult(tree, candidates, segments, decisions, warnings, saliency)


# persistence

def _save_mask(path: Path, mask: np.ndarray) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8)).save(path, optimize=False)


def _load_mask(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path)) > 127


def _segment_records(segs: list[LabeledSegment], folder: str) -> list[dict]:
    return [{"index": k, "node_id": s.node_id, "area": s.area, "mask": f"{folder}/{k:03d}.png",
             "label": s.label.text, "score": round(s.label.score, 6), "decoder": s.label.decoder}
            for k, s in enumerate(segs)]


def check_partition(masks: list[np.ndarray], shape: tuple[int, int]) -> None:
    cover = np.zeros(shape, dtype=np.int64)
    for m in masks:
        cover += m
    if np.any(cover != 1):
        raise RunError("segment masks do not partition the image")


def save_image_result(out: Path, image: np.ndarray, result: ImageResult, debug_saliency: bool = False,
                      image_id: str = "") -> None:
    out.mkdir(parents=True, exist_ok=True)
    Image.fromarray(image).save(out / "image.png")
    (out / "tree.json").write_text(result.tree.to_json())
    for folder, segs in (("candidates", result.candidates), ("segments", result.segments)):
        (out / folder).mkdir(exist_ok=True)
        for k, s in enumerate(segs):
            _save_mask(out / folder / f"{k:03d}.png", s.mask)
    (out / "candidates.json").write_text(json.dumps(
        {"warnings": result.warnings, "candidates": _segment_records(result.candidates, "candidates")},
        indent=1) + "\n")
    (out / "segments.json").write_text(json.dumps(_segment_records(result.segments, "segments"), indent=1) + "\n")
    (out / "merges.json").write_text(json.dumps(
        [{"a": d.a, "b": d.b, "parent": d.parent, "visual": round(d.visual, 6), "text": round(d.text, 6),
          "combined": round(d.combined, 6), "merged": d.merged} for d in result.decisions], indent=1) + "\n")
    tensors = {f"candidate/{s.node_id}": s.embedding for s in result.candidates}
    tensors.update({f"segment/{s.node_id}": s.embedding for s in result.segments})
    tensorio.save(out / "embeddings.zgtr", tensors)
    if debug_saliency:
        write_saliency_csv(out / "saliency.csv", [(image_id, node, s) for node, s in result.saliency])
    render_overlay(image, [(s.node_id, s.mask, s.label.text) for s in result.segments]).save(out / "overlay.png")


def load_segments(image_dir: Path, pipeline: Pipeline) -> list[LabeledSegment]:
    records = json.loads((image_dir / "segments.json").read_text())
    tensors = tensorio.load(image_dir / "embeddings.zgtr")
    segs = []
    for r in records:
        mask = _load_mask(image_dir / r["mask"])
        label = pipeline.make_label(r["label"], r["decoder"], r["score"])
        segs.append(LabeledSegment(node_id=r["node_id"], mask=mask,
                                   embedding=tensors[f"segment/{r['node_id']}"].astype(np.float64), label=label))
    if segs:
        check_partition([s.mask for s in segs], segs[0].mask.shape)
    return segs


# run orchestration

@dataclass
class RunResult:
    run_dir: Path
    processed: list[str]
    skipped: list[str]
    failures: dict[str, str]

    @property
    def ok(self) -> bool:
        return not self.failures


def _process_one(pipeline: Pipeline, index: DatasetIndex, image_id: str, images_dir: Path) -> str:
    final = images_dir / image_id
    if (final / COMPLETE).is_file():
        return "skipped"
    partial = images_dir / f"{image_id}.partial"
    shutil.rmtree(partial, ignore_errors=True)
    if final.exists():
        shutil.rmtree(final)
    image = index.load_image(image_id)
    result = pipeline.segment_image(image)
    save_image_result(partial, image, result, pipeline.cfg.debug_saliency, image_id)
    (partial / COMPLETE).write_text(json.dumps({"image_id": image_id, "segments": len(result.segments)}) + "\n")
    os.replace(partial, final)
    return "processed"


def run_pipeline(cfg: RunConfig, index: Optional[DatasetIndex] = None, backend=None,
                 evaluate: bool = True, limit: Optional[int] = None) -> RunResult:
    """Segment every dataset image into ``cfg.out`` and write TT and ST reports.

    Images with complete outputs are skipped, so an interrupted run can be resumed.
    ``limit`` stops after that many images have been processed (used to simulate interruption).
    """
    if cfg.out is None:
        raise ConfigError("no output directory configured")
    if index is None:
        if cfg.dataset is None:
            raise ConfigError("no dataset configured")
        index = ingest_dataset(cfg.dataset, cfg.class_subset, max_images=cfg.max_images)
    pipeline = Pipeline(cfg, backend, index.classes)
    run_dir = Path(cfg.out)
    images_dir = run_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(cfg.to_text())
    (run_dir / "index.json").write_text(json.dumps(
        {"dataset": str(index.root), "split": index.split, "classes": index.classes, "ids": index.ids,
         "order": "lexicographic image id"}, indent=1) + "\n")

    ids = index.ids if limit is None else index.ids[:limit]
    processed, skipped, failures = [], [], {}

    def work(image_id):
        try:
            return image_id, _process_one(pipeline, index, image_id, images_dir), None
        except Exception as exc:  # per-image isolation
            log.exception("image %s failed", image_id)
            return image_id, "failed", f"{type(exc).__name__}: {exc}"

    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        for image_id, status, err in pool.map(work, ids):
            if status == "processed":
                processed.append(image_id)
            elif status == "skipped":
                skipped.append(image_id)
            else:
                failures[image_id] = err
    (run_dir / "failures.json").write_text(json.dumps(failures, indent=1, sort_keys=True) + "\n")
    result = RunResult(run_dir, processed, skipped, failures)
    if evaluate and limit is None:
        for method in (TT, ST):
            evaluate_run(run_dir, method, pipeline=pipeline, index=index)
    return result


def open_run(run_dir: str | Path, backend=None) -> tuple[RunConfig, DatasetIndex, Pipeline]:
    run_dir = Path(run_dir)
    if not (run_dir / "config.txt").is_file():
        raise RunError(f"{run_dir} is not a run directory (no config.txt)")
    cfg = load_config(run_dir / "config.txt", {"out": str(run_dir)})
    index = ingest_dataset(cfg.dataset, cfg.class_subset, max_images=cfg.max_images)
    return cfg, index, Pipeline(cfg, backend, index.classes)


def completed_ids(run_dir: Path, index: DatasetIndex) -> list[str]:
    return [i for i in index.ids if (run_dir / "images" / i / COMPLETE).is_file()]


def evaluate_run(run_dir: str | Path, method: str, sweep: Optional[str] = None,
                 pipeline: Optional[Pipeline] = None, index: Optional[DatasetIndex] = None,
                 backend=None) -> list[EvalReport]:
    """Reassign, verify and score a finished run; returns one report per threshold."""
    run_dir = Path(run_dir)
    if pipeline is None or index is None:
        _, index, pipeline = open_run(run_dir, backend)
    cfg = pipeline.cfg
    base = Thresholds(sbert=cfg.tau_sbert, clip=cfg.tau_clip, iou=cfg.tau_iou)
    if sweep is None:
        grid = [base.for_method(method)]
    elif (sweep, method) in (("clip", ST), ("sbert", TT)):
        grid = list(CLIP_SWEEP if sweep == "clip" else SBERT_SWEEP)
    else:
        raise ConfigError(f"--sweep {sweep} does not apply to method {method}")
    ids = completed_ids(run_dir, index)
    if not ids:
        raise RunError(f"no completed images under {run_dir}")

    per_image = []
    for image_id in ids:
        gt = index.load_gt(image_id)
        segs = load_segments(run_dir / "images" / image_id, pipeline)
        if segs and segs[0].mask.shape != gt.labels.shape:
            raise RunError(f"{image_id}: segment masks {segs[0].mask.shape} vs ground truth {gt.labels.shape}")
        image = index.load_image(image_id)
        tgq = text_generation_quality(gt, lambda m: pipeline.label_mask(image, m), pipeline.backend, cfg.tau_sbert)
        per_image.append((image_id, gt, reassign(segs, index.classes, method, pipeline.backend,
                                                 pipeline.backend, base), tgq))

    reports = []
    for thr in grid:
        th = Thresholds(sbert=thr if method == TT else base.sbert, clip=thr if method == ST else base.clip,
                        iou=base.iou)
        report = EvalReport(classes=index.classes, method=method, thresholds=th)
        for image_id, gt, reassigned, tgq in per_image:
            report.add_image(image_id, with_threshold(reassigned, thr), gt, tgq)
        stem = method if sweep is None else f"{method}_sweep_{sweep}_{thr:.2f}"
        report.write(run_dir / "reports", stem)
        reports.append(report)
    return reports


def emit_overlays(run_dir: str | Path) -> list[Path]:
    """Render ``overlays/<id>.png`` for every completed image of a run."""
    run_dir = Path(run_dir)
    images_dir = run_dir / "images"
    done = sorted(p.parent for p in images_dir.glob(f"*/{COMPLETE}")) if images_dir.is_dir() else []
    if not done:
        raise RunError(f"no completed images under {run_dir}")
    out_dir = run_dir / "overlays"
    out_dir.mkdir(exist_ok=True)
    written = []
    for d in done:
        image = np.asarray(Image.open(d / "image.png").convert("RGB"))
        records = json.loads((d / "segments.json").read_text())
        segs = [(r["node_id"], _load_mask(d / r["mask"]), r["label"]) for r in records]
        check_partition([m for _, m, _ in segs], image.shape[:2])
        path = out_dir / f"{d.name}.png"
        render_overlay(image, segs).save(path)
        written.append(path)
    return written
