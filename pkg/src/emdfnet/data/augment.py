"""Letterbox resize, mosaic and mixup on ``(image, boxes, classes)`` samples.

Images are ``(H, W, 3)`` uint8 arrays, boxes ``(N, 4)`` float xyxy in pixels.
"""
from __future__ import annotations

import numpy as np
import torch
from PIL import Image

PAD_VALUE = 114
MIN_BOX_SIDE = 2.0


def to_tensor(images) -> torch.Tensor:
    """Stack uint8 HWC images into a float (B, 3, H, W) tensor scaled to [0, 1]."""
    arr = np.stack([np.asarray(im) for im in images])
    return torch.from_numpy(arr).permute(0, 3, 1, 2).float().div_(255.0)


def resize(image: np.ndarray, boxes: np.ndarray, scale: float):
    h, w = image.shape[:2]
    nw, nh = max(1, int(round(w * scale))), max(1, int(round(h * scale)))
    if (nw, nh) != (w, h):
        image = np.asarray(Image.fromarray(image).resize((nw, nh), Image.BILINEAR))
    sx, sy = nw / w, nh / h
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4) * np.array([sx, sy, sx, sy])
    return image, boxes


def letterbox(image: np.ndarray, boxes: np.ndarray, size: int):
    """Fit the image inside a ``size`` x ``size`` canvas, padding right and bottom.

    Returns ``(canvas, boxes, scale)``; original coordinates are ``boxes / scale``.
    """
    h, w = image.shape[:2]
    scale = min(size / h, size / w)
    nw, nh = min(size, int(round(w * scale))), min(size, int(round(h * scale)))
    if (nw, nh) != (w, h):
        image = np.asarray(Image.fromarray(image).resize((nw, nh), Image.BILINEAR))
    canvas = np.full((size, size, 3), PAD_VALUE, dtype=np.uint8)
    canvas[:nh, :nw] = image
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4) * scale
    return canvas, boxes, scale


def clip_and_filter(boxes, classes, x1, y1, x2, y2, min_side=MIN_BOX_SIDE):
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4).copy()
    boxes[:, [0, 2]] = boxes[:, [0, 2]].clip(x1, x2)
    boxes[:, [1, 3]] = boxes[:, [1, 3]].clip(y1, y2)
    keep = ((boxes[:, 2] - boxes[:, 0]) >= min_side) & ((boxes[:, 3] - boxes[:, 1]) >= min_side)
    return boxes[keep], np.asarray(classes)[keep]


def mosaic(samples, out_size: int, center: tuple[int, int]):
    """Compose four samples around ``center`` on an ``out_size`` canvas.

    Sample 0 goes top-left with its bottom-right corner at the centre, then
    top-right, bottom-left and bottom-right likewise. Boxes are clipped to
    the visible part of their quadrant; boxes narrower or shorter than 2 px
    after clipping are dropped.
    """
    if len(samples) != 4:
        raise ValueError("mosaic needs exactly 4 samples")
    xc, yc = int(center[0]), int(center[1])
    if not (0 <= xc <= out_size and 0 <= yc <= out_size):
        raise ValueError("mosaic centre outside the canvas")
    canvas = np.full((out_size, out_size, 3), PAD_VALUE, dtype=np.uint8)
    all_boxes, all_classes = [], []
    for q, (img, boxes, classes) in enumerate(samples):
        h, w = img.shape[:2]
        ox = xc - w if q in (0, 2) else xc
        oy = yc - h if q in (0, 1) else yc
        x_lo, x_hi = (max(ox, 0), xc) if q in (0, 2) else (xc, min(ox + w, out_size))
        y_lo, y_hi = (max(oy, 0), yc) if q in (0, 1) else (yc, min(oy + h, out_size))
        if x_hi <= x_lo or y_hi <= y_lo:
            continue
        canvas[y_lo:y_hi, x_lo:x_hi] = img[y_lo - oy:y_hi - oy, x_lo - ox:x_hi - ox]
        b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4) + np.array([ox, oy, ox, oy])
        b, c = clip_and_filter(b, classes, x_lo, y_lo, x_hi, y_hi)
        all_boxes.append(b)
        all_classes.append(c)
    boxes = np.concatenate(all_boxes) if all_boxes else np.zeros((0, 4))
    classes = np.concatenate(all_classes).astype(np.int64) if all_classes else np.zeros(0, np.int64)
    return canvas, boxes, classes


def random_mosaic(samples, out_size: int, rng: np.random.Generator, scale_range=(0.75, 1.25)):
    scaled = []
    for img, boxes, classes in samples:
        s = float(rng.uniform(*scale_range)) * out_size / max(img.shape[:2])
        img, boxes = resize(img, boxes, s)
        scaled.append((img, boxes, classes))
    xc, yc = (int(v) for v in rng.uniform(0.25, 0.75, size=2) * out_size)
    return mosaic(scaled, out_size, (xc, yc))


def mixup(a, b, lam: float = 0.5):
    """Blend two equally sized samples; annotations are the union."""
    img_a, boxes_a, cls_a = a
    img_b, boxes_b, cls_b = b
    if img_a.shape != img_b.shape:
        raise ValueError(f"mixup needs equal image shapes, got {img_a.shape} and {img_b.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lam must lie in [0, 1]")
    img = lam * img_a.astype(np.float64) + (1.0 - lam) * img_b.astype(np.float64)
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    boxes = np.concatenate([np.reshape(boxes_a, (-1, 4)), np.reshape(boxes_b, (-1, 4))])
    classes = np.concatenate([np.asarray(cls_a), np.asarray(cls_b)]).astype(np.int64)
    return img, boxes, classes
