"""Box types, conversions and overlap computations.

Continuous-coordinate convention throughout: a box (x1, y1, x2, y2) has area
(x2 - x1) * (y2 - y1), with no "+1" pixel inclusivity.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch


class InvalidBoxError(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise InvalidBoxError(f"non-finite box coordinates {coords}")
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise InvalidBoxError(f"negative box extent {coords}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def to_center(self) -> CenterBox:
        return CenterBox(
            (self.x1 + self.x2) / 2, (self.y1 + self.y2) / 2, self.width, self.height
        )

    def translate(self, dx: float, dy: float) -> Box:
        return Box(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)

    def scale(self, s: float) -> Box:
        return Box(self.x1 * s, self.y1 * s, self.x2 * s, self.y2 * s)

    def clip(self, width: float, height: float) -> Box:
        return Box(
            min(max(self.x1, 0.0), width),
            min(max(self.y1, 0.0), height),
            min(max(self.x2, 0.0), width),
            min(max(self.y2, 0.0), height),
        )

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class CenterBox:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidBoxError(f"non-finite center box {vals}")
        if self.w < 0 or self.h < 0:
            raise InvalidBoxError(f"negative size in center box {vals}")

    def to_box(self) -> Box:
        return Box(
            self.cx - self.w / 2, self.cy - self.h / 2,
            self.cx + self.w / 2, self.cy + self.h / 2,
        )


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes; 0 when the union is empty."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


# Array forms. Boxes are (..., 4) in xyxy unless stated otherwise.

def xyxy_to_cxcywh(boxes):
    x1, y1, x2, y2 = boxes[..., 0], boxes[..., 1], boxes[..., 2], boxes[..., 3]
    parts = ((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)
    if isinstance(boxes, torch.Tensor):
        return torch.stack(parts, dim=-1)
    return np.stack(parts, axis=-1)


def cxcywh_to_xyxy(boxes):
    cx, cy, w, h = boxes[..., 0], boxes[..., 1], boxes[..., 2], boxes[..., 3]
    parts = (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
    if isinstance(boxes, torch.Tensor):
        return torch.stack(parts, dim=-1)
    return np.stack(parts, axis=-1)


def box_area(boxes):
    return (boxes[..., 2] - boxes[..., 0]) * (boxes[..., 3] - boxes[..., 1])


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU matrix between (N, 4) and (M, 4) numpy boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def pairwise_iou_torch(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    lt = torch.maximum(a[:, None, :2], b[None, :, :2])
    rb = torch.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    return torch.where(union > 0, inter / union.clamp(min=1e-12), torch.zeros_like(inter))


def aligned_iou_torch(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Elementwise IoU of two (..., 4) tensors."""
    lt = torch.maximum(a[..., :2], b[..., :2])
    rb = torch.minimum(a[..., 2:], b[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a) + box_area(b) - inter
    return torch.where(union > 0, inter / union.clamp(min=1e-12), torch.zeros_like(inter))


def validate_boxes(boxes: np.ndarray) -> None:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if not np.isfinite(boxes).all():
        raise InvalidBoxError("non-finite box coordinates")
    if (boxes[:, 2] < boxes[:, 0]).any() or (boxes[:, 3] < boxes[:, 1]).any():
        raise InvalidBoxError("negative box extent")


# Grid box coder shared by the heads and the losses.

def decode_grid(raw: torch.Tensor, grids: torch.Tensor, strides: torch.Tensor,
                max_log_size: float = 10.0) -> torch.Tensor:
    """Raw (..., 4) regression -> xyxy boxes.

    centre = (grid + offset) * stride, size = exp(raw_size) * stride.
    """
    s = strides.unsqueeze(-1).to(raw.dtype)
    ctr = (grids.to(raw.dtype) + raw[..., :2]) * s
    wh = torch.exp(raw[..., 2:].clamp(max=max_log_size)) * s
    return torch.cat([ctr - wh / 2, ctr + wh / 2], dim=-1)


def encode_grid(boxes: torch.Tensor, grids: torch.Tensor, strides: torch.Tensor) -> torch.Tensor:
    """Inverse of decode_grid for boxes with positive extent."""
    s = strides.unsqueeze(-1).to(boxes.dtype)
    cxcywh = xyxy_to_cxcywh(boxes)
    off = cxcywh[..., :2] / s - grids.to(boxes.dtype)
    return torch.cat([off, torch.log(cxcywh[..., 2:] / s)], dim=-1)
