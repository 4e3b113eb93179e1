"""Anchor-free decoupled heads, decoding, NMS and target assignment."""
from __future__ import annotations

import logging
import math
from collections.abc import Hashable
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import Box, decode_grid, pairwise_iou, pairwise_iou_torch
from .layers import ConvNormAct
from .losses import siou_terms

log = logging.getLogger(__name__)

STRIDES = (8, 16, 32)


@dataclass
class HeadConfig:
    num_classes: int = 10
    width: int = 64
    num_convs: int = 2
    nms_iou: float = 0.65
    score_thresh: float = 0.01
    vis_score_thresh: float = 0.25
    pre_nms_topk: int = 1000
    max_detections: int = 100
    prior_prob: float = 0.01
    center_radius: float = 2.5
    topk_iou: int = 10
    cls_cost_weight: float = 1.0
    box_cost_weight: float = 3.0


@dataclass
class HeadOutput:
    cls_logits: torch.Tensor  # (B, C, h, w)
    reg: torch.Tensor  # (B, 4, h, w)
    obj_logits: torch.Tensor  # (B, 1, h, w)
    stride: int


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    score: float
    image_id: Hashable = None


class NumericError(RuntimeError):
    pass


class DecoupledHead(nn.Module):
    def __init__(self, c_in, num_classes, width, num_convs=2, prior_prob=0.01):
        super().__init__()
        self.stem = ConvNormAct(c_in, width, 1)
        self.cls_convs = nn.Sequential(*(ConvNormAct(width, width, 3) for _ in range(num_convs)))
        self.reg_convs = nn.Sequential(*(ConvNormAct(width, width, 3) for _ in range(num_convs)))
        self.cls_pred = nn.Conv2d(width, num_classes, 1)
        self.reg_pred = nn.Conv2d(width, 4, 1)
        self.obj_pred = nn.Conv2d(width, 1, 1)
        bias = -math.log((1 - prior_prob) / prior_prob)
        nn.init.constant_(self.cls_pred.bias, bias)
        nn.init.constant_(self.obj_pred.bias, bias)

    def forward(self, x):
        x = self.stem(x)
        c = self.cls_convs(x)
        r = self.reg_convs(x)
        return self.cls_pred(c), self.reg_pred(r), self.obj_pred(r)


class Heads(nn.Module):
    def __init__(self, in_channels: int, cfg: HeadConfig):
        super().__init__()
        self.cfg = cfg
        self.heads = nn.ModuleList(
            DecoupledHead(in_channels, cfg.num_classes, cfg.width, cfg.num_convs, cfg.prior_prob)
            for _ in STRIDES
        )

    def forward(self, fused) -> list[HeadOutput]:
        out = []
        for head, x, s in zip(self.heads, fused, STRIDES):
            cls, reg, obj = head(x)
            out.append(HeadOutput(cls, reg, obj, s))
        return out


def make_grid(h, w, stride, device=None, dtype=torch.float32):
    ys, xs = torch.meshgrid(
        torch.arange(h, device=device, dtype=dtype),
        torch.arange(w, device=device, dtype=dtype),
        indexing="ij",
    )
    grids = torch.stack([xs, ys], dim=-1).reshape(-1, 2)
    strides = torch.full((h * w,), float(stride), device=device, dtype=dtype)
    return grids, strides


def level_grids(image_size, device=None, dtype=torch.float32):
    """(grids, strides) over all levels for an (H, W) input."""
    h, w = image_size
    gs, ss = zip(*(make_grid(h // s, w // s, s, device, dtype) for s in STRIDES))
    return torch.cat(gs), torch.cat(ss)


def flatten_outputs(outputs: list[HeadOutput]) -> dict:
    """Concatenate levels into (B, N, ...) tensors, finest level first."""
    cls, reg, obj, grids, strides = [], [], [], [], []
    for o in outputs:
        b, c, h, w = o.cls_logits.shape
        cls.append(o.cls_logits.flatten(2).transpose(1, 2))
        reg.append(o.reg.flatten(2).transpose(1, 2))
        obj.append(o.obj_logits.flatten(2).squeeze(1))
        g, s = make_grid(h, w, o.stride, o.reg.device, o.reg.dtype)
        grids.append(g)
        strides.append(s)
    return {
        "cls": torch.cat(cls, 1), "reg": torch.cat(reg, 1), "obj": torch.cat(obj, 1),
        "grids": torch.cat(grids), "strides": torch.cat(strides),
    }


def check_finite(outputs: list[HeadOutput]):
    for o in outputs:
        for name in ("cls_logits", "reg", "obj_logits"):
            t = getattr(o, name)
            bad = ~torch.isfinite(t)
            if bad.any():
                b, c, y, x = bad.nonzero()[0].tolist()
                raise NumericError(
                    f"non-finite {name} at stride {o.stride}, image {b}, channel {c}, cell (x={x}, y={y})"
                )


def decode_outputs(outputs: list[HeadOutput], image_size=None):
    """Per-location boxes (B, N, 4), class ids (B, N) and scores (B, N).

    score = sigmoid(cls) * sigmoid(obj) for the best class.
    """
    check_finite(outputs)
    flat = flatten_outputs(outputs)
    boxes = decode_grid(flat["reg"], flat["grids"], flat["strides"])
    if image_size is not None:
        h, w = image_size
        boxes = torch.stack([
            boxes[..., 0].clamp(0, w), boxes[..., 1].clamp(0, h),
            boxes[..., 2].clamp(0, w), boxes[..., 3].clamp(0, h),
        ], dim=-1)
    probs = flat["cls"].sigmoid() * flat["obj"].sigmoid().unsqueeze(-1)
    scores, classes = probs.max(dim=-1)
    return boxes, classes, scores


def head_forward_and_decode(fused, heads: Heads, image_size) -> list[list[Detection]]:
    """Run the heads on fused maps and return every candidate location as a
    Detection (pre-NMS), one list per image."""
    boxes, classes, scores = decode_outputs(heads(fused), image_size)
    result = []
    for b in range(boxes.shape[0]):
        bx = boxes[b].detach().cpu().double().numpy()
        result.append([
            Detection(Box(*map(float, bx[i])), int(classes[b, i]), float(scores[b, i]), b)
            for i in range(bx.shape[0])
        ])
    return result


def nms_indices(boxes: np.ndarray, scores: np.ndarray, classes: np.ndarray, iou_thresh: float):
    """Class-wise greedy NMS; returns kept indices in descending score order.
    Equal scores keep input order."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    if order.size == 0:
        return order
    boxes, classes = boxes[order], np.asarray(classes)[order]
    ious = pairwise_iou(boxes, boxes)
    same = classes[:, None] == classes[None, :]
    suppressed = np.zeros(len(order), dtype=bool)
    keep = []
    for i in range(len(order)):
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= same[i] & (ious[i] >= iou_thresh)
    return order[np.array(keep, dtype=np.int64)]


def nms(dets: list[Detection], iou_thresh: float, score_thresh: float) -> list[Detection]:
    if not (0 <= iou_thresh <= 1 and 0 <= score_thresh <= 1):
        raise ValueError("thresholds must lie in [0, 1]")
    dets = [d for d in dets if d.score >= score_thresh]
    if not dets:
        return []
    keep = nms_indices(
        np.array([d.box.as_tuple() for d in dets]),
        np.array([d.score for d in dets]),
        np.array([d.class_id for d in dets]),
        iou_thresh,
    )
    return [dets[i] for i in keep]


def postprocess(outputs: list[HeadOutput], image_size, cfg: HeadConfig, score_thresh=None):
    """Decode, threshold and NMS. Returns per image (boxes, scores, classes)
    numpy arrays in descending score order."""
    thresh = cfg.score_thresh if score_thresh is None else score_thresh
    boxes, classes, scores = decode_outputs(outputs, image_size)
    results = []
    for b in range(boxes.shape[0]):
        s = scores[b].detach().cpu().numpy().astype(np.float64)
        idx = np.nonzero(s >= thresh)[0]
        idx = idx[np.argsort(-s[idx], kind="stable")][: cfg.pre_nms_topk]
        bx = boxes[b].detach().cpu().numpy().astype(np.float64)[idx]
        cl = classes[b].cpu().numpy()[idx]
        keep = nms_indices(bx, s[idx], cl, cfg.nms_iou)[: cfg.max_detections]
        results.append((bx[keep], s[idx][keep], cl[keep]))
    return results


@dataclass
class AssignmentResult:
    fg_mask: torch.Tensor  # (N,) bool
    matched_gt: torch.Tensor  # (N,) long, -1 for background
    box_targets: torch.Tensor  # (N, 4)
    cls_targets: torch.Tensor  # (N,) long, -1 for background
    skipped: list[int] = field(default_factory=list)


def _empty_assignment(n, dtype, device):
    return AssignmentResult(
        torch.zeros(n, dtype=torch.bool, device=device),
        torch.full((n,), -1, dtype=torch.long, device=device),
        torch.zeros(n, 4, dtype=dtype, device=device),
        torch.full((n,), -1, dtype=torch.long, device=device),
    )


@torch.no_grad()
def assign_targets(gt_boxes, gt_classes, grids, strides, cfg: HeadConfig | None = None,
                   pred_boxes=None, pred_probs=None, image_size=None) -> AssignmentResult:
    """Simplified dynamic assignment.

    Candidates are locations whose cell centre lies inside a GT box and
    within ``center_radius`` cells of its centre. Each GT takes its
    ``k`` cheapest candidates, k = clamp(int(sum of top-10 candidate IoUs),
    1, 10); a location claimed by several GTs goes to the cheapest one.
    Cost = cls BCE + box_cost_weight * SIoU; without predictions, stride-sized
    prior boxes at each cell stand in for them.
    """
    cfg = cfg or HeadConfig()
    gt_boxes = torch.as_tensor(gt_boxes, dtype=torch.float64).reshape(-1, 4)
    gt_classes = torch.as_tensor(gt_classes, dtype=torch.long).reshape(-1)
    grids = grids.to(torch.float64)
    strides = strides.to(torch.float64)
    n = grids.shape[0]
    result = _empty_assignment(n, torch.float64, grids.device)

    keep = []
    for j, b in enumerate(gt_boxes.tolist()):
        if image_size is not None:
            h, w = image_size
            b = [min(max(b[0], 0), w), min(max(b[1], 0), h), min(max(b[2], 0), w), min(max(b[3], 0), h)]
        if b[2] - b[0] <= 0 or b[3] - b[1] <= 0:
            log.warning("skipping ground truth %d: empty after clipping to image", j)
            result.skipped.append(j)
            continue
        gt_boxes[j] = torch.tensor(b, dtype=torch.float64)
        keep.append(j)
    if not keep:
        return result
    keep_t = torch.tensor(keep, dtype=torch.long)
    gtb, gtc = gt_boxes[keep_t], gt_classes[keep_t]
    g = gtb.shape[0]

    centers = (grids + 0.5) * strides[:, None]  # (N, 2)
    cx, cy = centers[:, 0][None], centers[:, 1][None]
    in_box = (cx > gtb[:, 0:1]) & (cx < gtb[:, 2:3]) & (cy > gtb[:, 1:2]) & (cy < gtb[:, 3:4])
    gcx = (gtb[:, 0:1] + gtb[:, 2:3]) / 2
    gcy = (gtb[:, 1:2] + gtb[:, 3:4]) / 2
    r = cfg.center_radius * strides[None]
    in_ctr = ((cx - gcx).abs() < r) & ((cy - gcy).abs() < r)
    cand = in_box & in_ctr  # (G, N)

    if pred_boxes is None:
        half = strides[:, None] / 2
        pb = torch.cat([centers - half, centers + half], dim=1)
    else:
        pb = pred_boxes.detach().to(torch.float64)
    ious = pairwise_iou_torch(gtb, pb)  # (G, N)
    box_cost = siou_terms(pb[None], gtb[:, None], 4.0)[0]
    cost = cfg.box_cost_weight * box_cost
    if pred_probs is not None:
        p = pred_probs.detach().to(torch.float64).clamp(1e-12, 1).sqrt()  # (N, C)
        onehot = F.one_hot(gtc, p.shape[1]).to(torch.float64)
        cls_cost = F.binary_cross_entropy(
            p[None].expand(g, -1, -1), onehot[:, None].expand(-1, n, -1), reduction="none"
        ).sum(-1)
        cost = cost + cfg.cls_cost_weight * cls_cost
    cost = torch.where(cand, cost, torch.full_like(cost, math.inf))

    claim = torch.zeros(g, n, dtype=torch.bool)
    for j in range(g):
        nc = int(cand[j].sum())
        if nc == 0:
            continue
        top = torch.topk(torch.where(cand[j], ious[j], torch.zeros_like(ious[j])), min(cfg.topk_iou, nc)).values
        k = int(min(max(int(top.sum()), 1), 10, nc))
        idx = torch.topk(cost[j], k, largest=False).indices
        claim[j, idx] = True

    owner = torch.full((n,), -1, dtype=torch.long)
    claimed = claim.any(0)
    masked = torch.where(claim, cost, torch.full_like(cost, math.inf))
    owner[claimed] = masked[:, claimed].argmin(0)

    # coverage: a GT that lost all its locations takes back its cheapest
    # candidate from an owner that can spare one
    counts = torch.bincount(owner[owner >= 0], minlength=g)
    for j in range(g):
        if counts[j] > 0 or not cand[j].any():
            continue
        order = torch.argsort(cost[j], stable=True)
        for loc in order[: int(cand[j].sum())].tolist():
            o = int(owner[loc])
            if o < 0 or counts[o] > 1:
                if o >= 0:
                    counts[o] -= 1
                owner[loc] = j
                counts[j] += 1
                break

    # fallback for GTs without any candidate: nearest free cell centre
    for j in range(g):
        if cand[j].any():
            continue
        d = ((centers[:, 0] - gcx[j, 0]) ** 2 + (centers[:, 1] - gcy[j, 0]) ** 2)
        d = torch.where(owner >= 0, torch.full_like(d, math.inf), d)
        loc = int(torch.argmin(d))
        if math.isfinite(float(d[loc])):
            owner[loc] = j

    fg = owner >= 0
    result.fg_mask = fg
    result.matched_gt[fg] = keep_t[owner[fg]]
    result.box_targets[fg] = gtb[owner[fg]]
    result.cls_targets[fg] = gtc[owner[fg]]
    return result
