"""Read-only loaders for TT100K, GTSDB and persisted synthetic datasets."""
from __future__ import annotations

import json
import logging
import os
from collections import Counter
from pathlib import Path

from PIL import Image

from .records import DatasetIndex, ImageRecord
from ..geometry import Box
from ..metrics import GroundTruth

log = logging.getLogger(__name__)

TT100K_MIXED = ("ph5", "w32", "wo")
TT100K_SIZE = 2048
GTSDB_SIZE = (1360, 800)

# GTSDB class id -> super-category
GTSDB_SUPER = {}
for _i in (0, 1, 2, 3, 4, 5, 7, 8, 9, 10, 15, 16):
    GTSDB_SUPER[_i] = "prohibitory"
for _i in (11, 18, 19, 20, 21, 22, 23, 24, 25, 26, 27, 28, 29, 30, 31):
    GTSDB_SUPER[_i] = "danger"
for _i in (33, 34, 35, 36, 37, 38, 39, 40):
    GTSDB_SUPER[_i] = "mandatory"
for _i in (6, 12, 13, 14, 17, 32, 41, 42):
    GTSDB_SUPER[_i] = "other"
GTSDB_CATEGORIES = sorted(set(GTSDB_SUPER.values()))
GTSDB_TRAIN_IMAGES = 600


class AnnotationError(ValueError):
    pass


def _image_size(path: Path, default):
    try:
        with Image.open(path) as im:
            return im.size
    except OSError:
        return default


def tt100k_categories(doc: dict, min_instances: int = 100, exclude_mixed: bool = True,
                      count_splits=("train", "test")) -> list[str]:
    """Categories with at least ``min_instances`` objects over ``count_splits``."""
    counts = Counter()
    for img in doc["imgs"].values():
        if img.get("path", "").split("/")[0] not in count_splits:
            continue
        counts.update(o["category"] for o in img.get("objects", []))
    keep = {c for c, n in counts.items() if n >= min_instances}
    if exclude_mixed:
        keep -= set(TT100K_MIXED)
    return sorted(keep)


def load_tt100k(root, split: str = "train", min_instances: int = 100, num_categories: int = 42,
                annotation_file: str = "annotations.json") -> DatasetIndex:
    """Parse the TT100K annotation document.

    ``num_categories=42`` drops the three mixed-content categories, 45 keeps
    them. Images whose objects all fall outside the kept set are still
    indexed.
    """
    if num_categories not in (42, 45):
        raise ValueError("num_categories must be 42 or 45")
    root = Path(root)
    ann_path = root / annotation_file
    if not ann_path.is_file():
        raise FileNotFoundError(f"TT100K annotation document not found: {ann_path}")
    with open(ann_path) as f:
        doc = json.load(f)
    known = set(doc.get("types", []))
    categories = tt100k_categories(doc, min_instances, exclude_mixed=num_categories == 42)
    cat_index = {c: i for i, c in enumerate(categories)}

    records = []
    for key in sorted(doc["imgs"], key=lambda k: str(k)):
        img = doc["imgs"][key]
        rel = img.get("path", "")
        if rel.split("/")[0] != split:
            continue
        path = root / rel
        w, h = _image_size(path, (TT100K_SIZE, TT100K_SIZE)) if path.exists() else (TT100K_SIZE, TT100K_SIZE)
        image_id = img.get("id", key)
        anns = []
        for obj in img.get("objects", []):
            cat = obj["category"]
            if known and cat not in known:
                log.warning("unknown category %r in image %s; skipped", cat, image_id)
                continue
            if cat not in cat_index:
                continue
            bb = obj["bbox"]
            box = Box(float(bb["xmin"]), float(bb["ymin"]), float(bb["xmax"]), float(bb["ymax"]))
            anns.append(GroundTruth(box.clip(w, h), cat_index[cat], image_id))
        records.append(ImageRecord(image_id, w, h, anns, path=str(path)))
    return DatasetIndex(records, categories, split)


def parse_gtsdb_gt(path) -> list[tuple[str, float, float, float, float, int]]:
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(";")
            if len(parts) != 6:
                raise AnnotationError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
            try:
                x1, y1, x2, y2 = (float(p) for p in parts[1:5])
                cid = int(parts[5])
            except ValueError as e:
                raise AnnotationError(f"{path}:{lineno}: {e}") from None
            if cid not in GTSDB_SUPER:
                raise AnnotationError(f"{path}:{lineno}: unknown class id {cid}")
            rows.append((parts[0], x1, y1, x2, y2, cid))
    return rows


def load_gtsdb(root, split: str = "all", gt_file: str = "gt.txt") -> DatasetIndex:
    """GTSDB with class ids folded into four super-categories.

    Splits: ``train`` is images 00000-00599, ``test`` 00600-00899, ``all``
    every image found.
    """
    if split not in ("train", "test", "all"):
        raise ValueError(f"unknown GTSDB split {split!r}")
    root = Path(root)
    gt_path = root / gt_file
    if not gt_path.is_file():
        raise FileNotFoundError(f"GTSDB ground-truth file not found: {gt_path}")
    rows = parse_gtsdb_gt(gt_path)
    names = sorted({p.name for p in root.glob("*.ppm")} | {r[0] for r in rows})
    cat_index = {c: i for i, c in enumerate(GTSDB_CATEGORIES)}
    w, h = GTSDB_SIZE
    by_name = {n: [] for n in names}
    for name, x1, y1, x2, y2, cid in rows:
        box = Box(x1, y1, x2, y2).clip(w, h)
        by_name[name].append(GroundTruth(box, cat_index[GTSDB_SUPER[cid]], name))

    def in_split(name):
        if split == "all":
            return True
        stem = Path(name).stem
        idx = int(stem) if stem.isdigit() else 0
        return (idx < GTSDB_TRAIN_IMAGES) == (split == "train")

    records = [
        ImageRecord(n, w, h, by_name[n], path=str(root / n)) for n in names if in_split(n)
    ]
    return DatasetIndex(records, list(GTSDB_CATEGORIES), split)


SYNTH_FORMAT = "emdfnet-synth"
SYNTH_VERSION = 1


def save_dataset(index: DatasetIndex, out_dir, config: dict | None = None) -> Path:
    """Write images as PNG plus one annotations.json document."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    images = []
    for r in index.records:
        fname = f"images/{r.image_id}.png"
        Image.fromarray(r.load_pixels()).save(out / fname)
        images.append({
            "image_id": r.image_id, "file": fname, "width": r.width, "height": r.height,
            "boxes": [list(a.box.as_tuple()) for a in r.annotations],
            "class_ids": [a.class_id for a in r.annotations],
        })
    doc = {
        "format": SYNTH_FORMAT, "version": SYNTH_VERSION, "split": index.split,
        "categories": list(index.category_names), "config": config or {}, "images": images,
    }
    path = out / "annotations.json"
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")
    return path


def load_synth(root) -> DatasetIndex:
    root = Path(root)
    path = root / "annotations.json"
    if not path.is_file():
        raise FileNotFoundError(f"annotation document not found: {path}")
    with open(path) as f:
        doc = json.load(f)
    if doc.get("format") != SYNTH_FORMAT:
        raise AnnotationError(f"{path}: not an {SYNTH_FORMAT} document")
    records = []
    for im in doc["images"]:
        anns = ImageRecord.make_annotations(im["image_id"], im["boxes"], im["class_ids"])
        records.append(ImageRecord(im["image_id"], im["width"], im["height"], anns,
                                   path=os.fspath(root / im["file"])))
    return DatasetIndex(records, doc["categories"], doc.get("split", "train"))


def load_dataset(kind: str, root, split: str = "test") -> DatasetIndex:
    if kind == "tt100k":
        return load_tt100k(root, split)
    if kind == "gtsdb":
        return load_gtsdb(root, split)
    if kind == "synth":
        return load_synth(root)
    raise ValueError(f"unknown dataset kind {kind!r}")
