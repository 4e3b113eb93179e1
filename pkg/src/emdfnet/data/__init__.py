from .augment import letterbox, mixup, mosaic, random_mosaic, to_tensor
from .loaders import (
    AnnotationError,
    GTSDB_CATEGORIES,
    GTSDB_SUPER,
    load_dataset,
    load_gtsdb,
    load_synth,
    load_tt100k,
    parse_gtsdb_gt,
    save_dataset,
)
from .records import DatasetIndex, ImageRecord
from .synth import SynthConfig, category_names, render_image, synth_generate

__all__ = [
    "AnnotationError", "DatasetIndex", "GTSDB_CATEGORIES", "GTSDB_SUPER", "ImageRecord", "SynthConfig",
    "category_names", "letterbox", "load_dataset", "load_gtsdb", "load_synth", "load_tt100k",
    "mixup", "mosaic", "parse_gtsdb_gt", "random_mosaic", "render_image", "save_dataset", "synth_generate",
    "to_tensor",
]
