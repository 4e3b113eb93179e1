"""Procedural traffic-sign-like scenes for smoke tests and toy training.

Every image is rendered from its own generator seeded with ``(seed, index)``
so any single image can be reproduced without rendering the others.
"""
from __future__ import annotations

import itertools
import warnings
from dataclasses import asdict, dataclass

import numpy as np
from PIL import Image, ImageDraw

from .records import DatasetIndex, ImageRecord

SHAPES = ("circle", "triangle", "square", "diamond", "octagon", "triangle_down")
# (fill, border, glyph colour)
PALETTES = {
    "red_ring": ((245, 245, 245), (200, 20, 20), (20, 20, 20)),
    "blue": ((20, 70, 190), (240, 240, 240), (245, 245, 245)),
    "yellow": ((240, 200, 20), (20, 20, 20), (20, 20, 20)),
    "green": ((20, 140, 60), (240, 240, 240), (245, 245, 245)),
    "red": ((200, 20, 20), (245, 245, 245), (245, 245, 245)),
}
GLYPHS = ("none", "bar", "dot")

# hand-picked so the first ten classes are easy to tell apart by colour and shape
_CURATED = [
    ("circle", "red_ring", "none"),
    ("circle", "blue", "dot"),
    ("triangle", "red_ring", "none"),
    ("triangle", "yellow", "dot"),
    ("square", "blue", "none"),
    ("square", "green", "bar"),
    ("diamond", "yellow", "none"),
    ("octagon", "red", "bar"),
    ("triangle_down", "red_ring", "none"),
    ("circle", "red", "bar"),
]
SIGN_DESIGNS = _CURATED + [
    d for d in itertools.product(SHAPES, PALETTES, GLYPHS) if d not in _CURATED
]

SUPERSAMPLE = 4


MIN_SIGN_SIZE = 8


@dataclass
class SynthConfig:
    seed: int = 0
    num_images: int = 100
    image_size: int = 320
    num_classes: int = 10
    min_signs: int = 1
    max_signs: int = 6
    min_size: int = 8
    max_size: int = 48
    clutter: float = 0.5
    noise_std: float = 3.0
    split: str = "train"
    max_attempts: int = 50

    def validate(self):
        # smaller signs are below the smallest stride-8 cell the detector can resolve
        if not 1 <= self.num_classes <= len(SIGN_DESIGNS):
            raise ValueError(f"num_classes must be in [1, {len(SIGN_DESIGNS)}]")
        if not MIN_SIGN_SIZE <= self.min_size <= self.max_size:
            raise ValueError(f"need {MIN_SIGN_SIZE} <= min_size <= max_size")
        if self.max_size > self.image_size:
            raise ValueError("max_size larger than the canvas")
        if not 0 <= self.min_signs <= self.max_signs:
            raise ValueError("need 0 <= min_signs <= max_signs")
        if self.num_images < 0:
            raise ValueError("num_images must be non-negative")


def category_names(num_classes: int) -> list[str]:
    return ["-".join(d) for d in SIGN_DESIGNS[:num_classes]]


def _polygon(shape, s):
    if shape == "triangle":
        return [(s / 2, 0), (s, s), (0, s)]
    if shape == "triangle_down":
        return [(0, 0), (s, 0), (s / 2, s)]
    if shape == "square":
        return [(0, 0), (s, 0), (s, s), (0, s)]
    if shape == "diamond":
        return [(s / 2, 0), (s, s / 2), (s / 2, s), (0, s / 2)]
    if shape == "octagon":
        a = s * 0.2929
        return [(a, 0), (s - a, 0), (s, a), (s, s - a), (s - a, s), (a, s), (0, s - a), (0, a)]
    raise ValueError(shape)


def _shrink(points, s, f):
    c = s / 2
    return [(c + (x - c) * f, c + (y - c) * f) for x, y in points]


def render_sign(design, size: int, brightness: float = 1.0) -> Image.Image:
    """RGBA patch of ``size`` x ``size`` whose shape touches the patch edges."""
    shape, palette, glyph = design
    fill, border, ink = PALETTES[palette]
    fill, border, ink = ([min(255, int(c * brightness)) for c in col] for col in (fill, border, ink))
    S = size * SUPERSAMPLE
    patch = Image.new("RGBA", (S, S), (0, 0, 0, 0))
    d = ImageDraw.Draw(patch)
    last = S - 1
    inner = 0.72 if shape in ("circle", "octagon", "square", "diamond") else 0.58
    if shape == "circle":
        d.ellipse([0, 0, last, last], fill=(*border, 255))
        m = last * (1 - inner) / 2
        d.ellipse([m, m, last - m, last - m], fill=(*fill, 255))
    else:
        pts = _polygon(shape, last)
        d.polygon(pts, fill=(*border, 255))
        cy = {"triangle": last * 0.62, "triangle_down": last * 0.38}.get(shape, last / 2)
        inner_pts = [(x, y + (cy - last / 2) * (1 - inner)) for x, y in _shrink(pts, last, inner)]
        d.polygon(inner_pts, fill=(*fill, 255))
    c = last / 2
    cy = {"triangle": last * 0.62, "triangle_down": last * 0.38}.get(shape, c)
    if glyph == "bar":
        hw, hh = last * 0.22, last * 0.07
        d.rectangle([c - hw, cy - hh, c + hw, cy + hh], fill=(*ink, 255))
    elif glyph == "dot":
        r = last * 0.1
        d.ellipse([c - r, cy - r, c + r, cy + r], fill=(*ink, 255))
    return patch.resize((size, size), Image.LANCZOS)


def _background(rng, size, cfg: SynthConfig) -> Image.Image:
    coarse = rng.integers(60, 200, size=(4, 4, 3), dtype=np.uint8)
    bg = Image.fromarray(coarse).resize((size, size), Image.BILINEAR)
    d = ImageDraw.Draw(bg)
    for _ in range(int(round(cfg.clutter * 12))):
        grey = int(rng.integers(40, 220))
        tint = rng.integers(-20, 21, size=3)
        col = tuple(int(np.clip(grey + t, 0, 255)) for t in tint)
        x0, y0 = rng.uniform(-40, size, size=2)
        w, h = rng.uniform(8, 120, size=2)
        kind = rng.integers(3)
        if kind == 0:
            d.rectangle([x0, y0, x0 + w, y0 + h], fill=col)
        elif kind == 1:
            d.ellipse([x0, y0, x0 + w, y0 + h], fill=col)
        else:
            d.line([x0, y0, x0 + w, y0 + h], fill=col, width=int(rng.integers(1, 5)))
    return bg


def _overlaps(box, placed, margin=2):
    x1, y1, x2, y2 = box
    return any(
        x1 < b[2] + margin and b[0] < x2 + margin and y1 < b[3] + margin and b[1] < y2 + margin
        for b in placed
    )


def render_image(cfg: SynthConfig, index: int):
    """Return ``(background, image, boxes, classes)`` for image ``index``.

    ``background`` is the scene before signs were pasted and before noise
    was added; it is kept for inspection and tests.
    """
    rng = np.random.default_rng([cfg.seed, index])
    size = cfg.image_size
    bg = _background(rng, size, cfg)
    canvas = bg.copy()
    n = int(rng.integers(cfg.min_signs, cfg.max_signs + 1))
    boxes, classes = [], []
    dropped = 0
    for _ in range(n):
        cls = int(rng.integers(cfg.num_classes))
        s = int(rng.integers(cfg.min_size, cfg.max_size + 1))
        brightness = float(rng.uniform(0.75, 1.05))
        for _attempt in range(cfg.max_attempts):
            x, y = (int(v) for v in rng.integers(0, size - s + 1, size=2))
            box = (x, y, x + s, y + s)
            if not _overlaps(box, boxes):
                break
        else:
            dropped += 1
            continue
        patch = render_sign(SIGN_DESIGNS[cls], s, brightness)
        canvas.paste(patch, (x, y), patch)
        boxes.append(box)
        classes.append(cls)
    if dropped:
        warnings.warn(
            f"synthetic image {index}: could not place {dropped} of {n} signs without overlap",
            RuntimeWarning, stacklevel=2,
        )
    img = np.asarray(canvas, dtype=np.float64)
    if cfg.noise_std > 0:
        img = img + rng.normal(0.0, cfg.noise_std, size=img.shape)
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    boxes_arr = np.array(boxes, dtype=np.float64).reshape(-1, 4)
    return np.asarray(bg), img, boxes_arr, np.array(classes, dtype=np.int64)


def synth_generate(cfg: SynthConfig) -> DatasetIndex:
    cfg.validate()
    records = []
    for i in range(cfg.num_images):
        _, img, boxes, classes = render_image(cfg, i)
        image_id = f"{cfg.split}_{i:05d}"
        anns = ImageRecord.make_annotations(image_id, boxes, classes)
        records.append(ImageRecord(image_id, cfg.image_size, cfg.image_size, anns, pixels=img))
    return DatasetIndex(records, category_names(cfg.num_classes), cfg.split)


def synth_config_dict(cfg: SynthConfig) -> dict:
    return asdict(cfg)
