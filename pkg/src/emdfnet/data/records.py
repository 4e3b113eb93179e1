from __future__ import annotations

from collections.abc import Hashable
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from ..geometry import Box
from ..metrics import GroundTruth


@dataclass
class ImageRecord:
    image_id: Hashable
    width: int
    height: int
    annotations: list[GroundTruth] = field(default_factory=list)
    path: str | None = None
    pixels: np.ndarray | None = None  # (H, W, 3) uint8

    def load_pixels(self) -> np.ndarray:
        if self.pixels is not None:
            return self.pixels
        if self.path is None:
            raise ValueError(f"record {self.image_id!r} has neither pixels nor a path")
        with Image.open(self.path) as im:
            return np.asarray(im.convert("RGB"))

    def boxes_array(self) -> np.ndarray:
        if not self.annotations:
            return np.zeros((0, 4), dtype=np.float64)
        return np.array([a.box.as_tuple() for a in self.annotations], dtype=np.float64)

    def classes_array(self) -> np.ndarray:
        return np.array([a.class_id for a in self.annotations], dtype=np.int64)

    @staticmethod
    def make_annotations(image_id, boxes, classes) -> list[GroundTruth]:
        return [
            GroundTruth(Box(*map(float, b)), int(c), image_id)
            for b, c in zip(np.asarray(boxes).reshape(-1, 4), classes)
        ]


@dataclass
class DatasetIndex:
    records: list[ImageRecord]
    category_names: list[str]
    split: str = "train"

    def __post_init__(self):
        n = len(self.category_names)
        for r in self.records:
            for a in r.annotations:
                if not 0 <= a.class_id < n:
                    raise ValueError(
                        f"class id {a.class_id} in record {r.image_id!r} outside {n} categories"
                    )

    def __len__(self):
        return len(self.records)

    @property
    def num_classes(self) -> int:
        return len(self.category_names)

    def ground_truths(self) -> list[GroundTruth]:
        return [a for r in self.records for a in r.annotations]

    def subset(self, indices, split=None) -> DatasetIndex:
        return DatasetIndex([self.records[i] for i in indices], list(self.category_names),
                            split or self.split)
