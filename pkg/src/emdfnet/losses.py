"""Box regression (SIoU / IoU), focal classification and the weighted total."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .geometry import Box, aligned_iou_torch, decode_grid

ASIN_CLAMP = 1 - 1e-7


@dataclass
class LossConfig:
    w_box: float = 5.0
    w_cls: float = 1.0
    theta: float = 4.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    box_variant: str = "siou"  # siou | iou

    def __post_init__(self):
        if self.box_variant not in ("siou", "iou"):
            raise ValueError(f"unknown box loss variant {self.box_variant!r}")
        if self.w_box <= 0 or self.w_cls <= 0:
            raise ValueError("loss weights must be positive")


@dataclass
class SiouTerms:
    iou: torch.Tensor
    angle_cost: torch.Tensor
    l_dis: torch.Tensor
    l_shape: torch.Tensor


@dataclass
class LossBreakdown:
    l_box: torch.Tensor
    l_cls: torch.Tensor
    l_obj: torch.Tensor
    w_box: float
    w_cls: float
    total: torch.Tensor
    num_fg: int = 0

    @classmethod
    def combine(cls, l_box, l_cls, l_obj, w_box=5.0, w_cls=1.0, num_fg=0) -> LossBreakdown:
        total = w_box * l_box + w_cls * l_cls + l_obj
        return cls(l_box, l_cls, l_obj, w_box, w_cls, total, num_fg)

    def as_dict(self) -> dict[str, float]:
        return {
            "l_box": float(self.l_box.detach()), "l_cls": float(self.l_cls.detach()),
            "l_obj": float(self.l_obj.detach()), "total": float(self.total.detach()),
        }


def siou_terms(pred: torch.Tensor, gt: torch.Tensor, theta: float = 4.0):
    """Elementwise SIoU loss for broadcastable (..., 4) xyxy tensors.

    Returns (loss, SiouTerms) with
    loss = 1 - IoU + (L_dis + L_shape) / 2.
    """
    pw, ph = pred[..., 2] - pred[..., 0], pred[..., 3] - pred[..., 1]
    gw, gh = gt[..., 2] - gt[..., 0], gt[..., 3] - gt[..., 1]
    iou = aligned_iou_torch(pred, gt)

    dx = (gt[..., 0] + gt[..., 2] - pred[..., 0] - pred[..., 2]) / 2
    dy = (gt[..., 1] + gt[..., 3] - pred[..., 1] - pred[..., 3]) / 2
    cw = torch.maximum(pred[..., 2], gt[..., 2]) - torch.minimum(pred[..., 0], gt[..., 0])
    ch = torch.maximum(pred[..., 3], gt[..., 3]) - torch.minimum(pred[..., 1], gt[..., 1])

    # angle of the centre offset to its nearest axis; zero offset -> 0
    d2 = dx * dx + dy * dy
    moved = d2 > 0
    sigma = torch.sqrt(torch.where(moved, d2, torch.ones_like(d2)))
    sin_a = torch.where(moved, torch.minimum(dx.abs(), dy.abs()) / sigma, torch.zeros_like(d2))
    sin_a = sin_a.clamp(-ASIN_CLAMP, ASIN_CLAMP)
    angle = 1 - 2 * torch.sin(torch.asin(sin_a) - math.pi / 4) ** 2

    gamma = 2 - angle
    rho_x = (dx / cw) ** 2
    rho_y = (dy / ch) ** 2
    l_dis = (1 - torch.exp(-gamma * rho_x)) + (1 - torch.exp(-gamma * rho_y))

    omega_w = (pw - gw).abs() / torch.maximum(pw, gw)
    omega_h = (ph - gh).abs() / torch.maximum(ph, gh)
    l_shape = (1 - torch.exp(-omega_w)) ** theta + (1 - torch.exp(-omega_h)) ** theta

    loss = 1 - iou + (l_dis + l_shape) / 2
    return loss, SiouTerms(iou, angle, l_dis, l_shape)


def siou_loss(pred: Box, gt: Box, theta: float = 4.0):
    """Scalar SIoU loss between two Box values (double precision)."""
    if gt.area <= 0:
        raise ValueError(f"ground-truth box has zero area: {gt}")
    p = torch.tensor(pred.as_tuple(), dtype=torch.float64)
    g = torch.tensor(gt.as_tuple(), dtype=torch.float64)
    loss, terms = siou_terms(p, g, theta)
    return float(loss), SiouTerms(*(float(t) for t in (terms.iou, terms.angle_cost, terms.l_dis, terms.l_shape)))


def box_loss(pred: torch.Tensor, gt: torch.Tensor, variant: str = "siou", theta: float = 4.0):
    if variant == "siou":
        return siou_terms(pred, gt, theta)[0]
    return 1 - aligned_iou_torch(pred, gt)


def focal_terms(logits: torch.Tensor, targets: torch.Tensor, alpha=0.25, gamma=2.0):
    """Elementwise focal-modulated binary cross-entropy."""
    p = torch.sigmoid(logits)
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p_t = p * targets + (1 - p) * (1 - targets)
    alpha_t = alpha * targets + (1 - alpha) * (1 - targets)
    return alpha_t * (1 - p_t) ** gamma * ce


def cls_loss(logits: torch.Tensor, targets: torch.Tensor, num_fg: int | None = None,
             alpha=0.25, gamma=2.0) -> torch.Tensor:
    """Focal loss summed over foreground locations and classes, divided by
    the foreground count (defaults to the number of rows)."""
    if logits.shape != targets.shape:
        raise ValueError(f"shape mismatch {tuple(logits.shape)} vs {tuple(targets.shape)}")
    n = logits.shape[0] if num_fg is None else num_fg
    if n == 0:
        return logits.sum() * 0
    return focal_terms(logits, targets, alpha, gamma).sum() / n


def total_loss(assignments, outputs, cfg: LossConfig) -> LossBreakdown:
    """Composite loss over a batch.

    ``outputs`` is the flattened head output dict (cls, reg, obj, grids,
    strides); ``assignments`` is one AssignmentResult per image.
    """
    cls_logits, reg, obj = outputs["cls"], outputs["reg"], outputs["obj"]
    grids, strides = outputs["grids"], outputs["strides"]
    if len(assignments) != cls_logits.shape[0]:
        raise ValueError("one assignment per image required")

    fg = torch.stack([a.fg_mask for a in assignments])
    num_fg = int(fg.sum())
    obj_target = fg.to(obj.dtype)
    l_obj = F.binary_cross_entropy_with_logits(obj, obj_target, reduction="sum") / max(num_fg, 1)

    if num_fg == 0:
        zero = obj.sum() * 0
        l_box, l_cls = zero, zero
    else:
        box_t = torch.cat([a.box_targets[a.fg_mask] for a in assignments]).to(reg.dtype)
        cls_t = torch.cat([a.cls_targets[a.fg_mask] for a in assignments])
        b_idx, n_idx = fg.nonzero(as_tuple=True)
        pred_boxes = decode_grid(reg[b_idx, n_idx], grids[n_idx], strides[n_idx])
        l_box = box_loss(pred_boxes, box_t, cfg.box_variant, cfg.theta).sum() / num_fg
        onehot = F.one_hot(cls_t, cls_logits.shape[-1]).to(cls_logits.dtype)
        l_cls = cls_loss(cls_logits[b_idx, n_idx], onehot, num_fg, cfg.focal_alpha, cfg.focal_gamma)

    return LossBreakdown.combine(l_box, l_cls, l_obj, cfg.w_box, cfg.w_cls, num_fg)
