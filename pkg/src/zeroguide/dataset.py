"""VOC-style dataset layout::

    <root>/classes.txt        one class name per line; line i is index i
    <root>/images/<id>.png    (or .jpg / .jpeg)
    <root>/gt/<id>.png        8-bit class-index map, 255 = ignore
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .evaluation import GroundTruth

IGNORE = 255
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


class DatasetError(ValueError):
    pass


@dataclass
class DatasetIndex:
    root: Path
    ids: list[str]
    image_paths: dict[str, Path]
    gt_paths: dict[str, Path]
    classes: list[str]
    split: str = "all"
    remap: Optional[np.ndarray] = field(default=None, repr=False)  # full-list index -> subset index

    def __len__(self):
        return len(self.ids)

    def load_image(self, image_id: str) -> np.ndarray:
        return np.asarray(Image.open(self.image_paths[image_id]).convert("RGB"))

    def load_gt(self, image_id: str) -> GroundTruth:
        labels = np.asarray(Image.open(self.gt_paths[image_id])).astype(np.int64)
        if self.remap is not None:
            labels = np.where(labels == IGNORE, IGNORE, self.remap[np.minimum(labels, len(self.remap) - 1)])
        return GroundTruth(labels=labels, classes=list(self.classes), ignore_index=IGNORE)


def _read_lines(path: Path) -> list[str]:
    return [ln.strip() for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]


def ingest_dataset(root: str | Path, subset: Optional[str | Path] = None, split: str = "all",
                   max_images: Optional[int] = None) -> DatasetIndex:
    """Index and validate a dataset; image ids are taken in lexicographic order."""
    root = Path(root)
    classes_file = root / "classes.txt"
    if not classes_file.is_file():
        raise DatasetError(f"missing class list {classes_file}")
    classes = _read_lines(classes_file)
    if not classes:
        raise DatasetError("class list is empty")
    images = {}
    for p in sorted((root / "images").iterdir()) if (root / "images").is_dir() else []:
        if p.suffix.lower() in IMAGE_SUFFIXES:
            images.setdefault(p.stem, p)
    if not images:
        raise DatasetError(f"no images under {root / 'images'}")
    ids = sorted(images)
    if max_images is not None:
        ids = ids[:max_images]
    gts = {}
    for image_id in ids:
        gt = root / "gt" / f"{image_id}.png"
        if not gt.is_file():
            raise DatasetError(f"ground truth missing for image {image_id!r}")
        labels = np.asarray(Image.open(gt))
        used = np.unique(labels[labels != IGNORE])
        if used.size and used.max() >= len(classes):
            raise DatasetError(f"image {image_id!r} uses unknown class index {int(used.max())}")
        gts[image_id] = gt

    remap = None
    if subset is not None:
        names = _read_lines(Path(subset))
        missing = [n for n in names if n not in classes]
        if missing:
            raise DatasetError(f"subset names not in class list: {missing[:5]}")
        remap = np.full(len(classes), IGNORE, dtype=np.int64)
        for j, name in enumerate(names):
            remap[classes.index(name)] = j
        classes = names
    return DatasetIndex(root=root, ids=ids, image_paths={i: images[i] for i in ids}, gt_paths=gts,
                        classes=classes, split=split, remap=remap)
