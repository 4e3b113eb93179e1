"""Detection matching, COCO-style AP/mAP and TIDE error decomposition."""
from __future__ import annotations

import json
from collections import defaultdict
from collections.abc import Hashable
from dataclasses import dataclass, field

import numpy as np

from .geometry import Box, pairwise_iou
from .heads import Detection

REPORT_VERSION = 1
IOU_THRESHOLDS = np.round(np.linspace(0.5, 0.95, 10), 2)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
AREA_RANGES = {
    "small": (0.0, 32.0**2),
    "medium": (32.0**2, 96.0**2),
    "large": (96.0**2, float("inf")),
}


@dataclass(frozen=True)
class GroundTruth:
    box: Box
    class_id: int
    image_id: Hashable = None


@dataclass
class MatchResult:
    detections: list[Detection]  # score-descending
    tp: np.ndarray  # bool per detection
    matched_gt: np.ndarray  # index into gts or -1
    num_gt: int

    @property
    def num_tp(self) -> int:
        return int(self.tp.sum())

    @property
    def num_fp(self) -> int:
        return int((~self.tp).sum())

    @property
    def num_fn(self) -> int:
        return self.num_gt - self.num_tp


@dataclass
class EvalResult:
    per_class_ap: dict[int, float]
    map50: float
    map75: float
    map5095: float
    ap_small: float | None
    ap_medium: float | None
    ap_large: float | None
    per_class_ap5095: dict[int, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "mAP@.5": self.map50, "mAP@.75": self.map75, "mAP@.5:.95": self.map5095,
            "AP_s": self.ap_small, "AP_m": self.ap_medium, "AP_l": self.ap_large,
            "per_class_AP@.5": {str(k): v for k, v in sorted(self.per_class_ap.items())},
        }


@dataclass
class TideReport:
    cls: float
    loc: float
    both: float
    dupe: float
    bkg: float
    miss: float
    fp: float
    fn: float
    counts: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "Cls": self.cls, "Loc": self.loc, "Both": self.both, "Dupe": self.dupe,
            "Bkg": self.bkg, "Miss": self.miss, "FalsePos": self.fp, "FalseNeg": self.fn,
            "counts": dict(self.counts),
        }


def _sort_dets(dets):
    # stable, so equal scores keep input order
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    return [dets[i] for i in order]


def _group(items):
    groups = defaultdict(list)
    for i, it in enumerate(items):
        groups[(it.image_id, it.class_id)].append(i)
    return groups


def _greedy(ious: np.ndarray, thresh: float, gt_ignore=None):
    """Greedy matching of score-sorted detections (rows) to GTs (columns).

    Each detection takes the highest-IoU unmatched GT with IoU >= thresh,
    preferring non-ignored GTs. Returns matched column per row (-1 if none).
    """
    n_det, n_gt = ious.shape
    matched = np.full(n_det, -1, dtype=np.int64)
    used = np.zeros(n_gt, dtype=bool)
    if gt_ignore is None:
        gt_ignore = np.zeros(n_gt, dtype=bool)
    for i in range(n_det):
        best = -1
        for pool in (~gt_ignore, gt_ignore):
            cand = pool & ~used & (ious[i] >= thresh)
            if cand.any():
                vals = np.where(cand, ious[i], -1.0)
                best = int(np.argmax(vals))
                break
        if best >= 0:
            used[best] = True
            matched[i] = best
    return matched


def match_detections(dets: list[Detection], gts: list[GroundTruth], iou_thresh: float = 0.5) -> MatchResult:
    dets = _sort_dets(dets)
    tp = np.zeros(len(dets), dtype=bool)
    matched = np.full(len(dets), -1, dtype=np.int64)
    gt_groups = _group(gts)
    for key, d_idx in _group(dets).items():
        g_idx = gt_groups.get(key, [])
        if not g_idx:
            continue
        ious = pairwise_iou(
            np.array([dets[i].box.as_tuple() for i in d_idx]),
            np.array([gts[j].box.as_tuple() for j in g_idx]),
        )
        m = _greedy(ious, iou_thresh)
        for row, col in enumerate(m):
            if col >= 0:
                tp[d_idx[row]] = True
                matched[d_idx[row]] = g_idx[col]
    return MatchResult(dets, tp, matched, len(gts))


def average_precision(tp, num_gt: int, ignore=None) -> float:
    """101-point interpolated AP from score-ordered TP flags.

    Precision is made monotone (running max from the right) before sampling
    at recall 0, 0.01, ..., 1. Returns nan for num_gt == 0.
    """
    if num_gt < 0:
        raise ValueError("num_gt must be non-negative")
    if num_gt == 0:
        return float("nan")
    tp = np.asarray(tp, dtype=bool)
    if ignore is not None:
        tp = tp[~np.asarray(ignore, dtype=bool)]
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / num_gt
    precision = ctp / (ctp + cfp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(sampled.mean())


def _area(box: Box) -> float:
    return box.area


def _class_tp_tables(dets, gts, thresholds, area_range=None):
    """Per class: (tp flags [T, D], ignore flags [T, D], num_gt) with detections
    in global score order for that class."""
    dets = _sort_dets(dets)
    classes = sorted({g.class_id for g in gts} | {d.class_id for d in dets})
    gt_groups = _group(gts)
    det_groups = _group(dets)
    lo, hi = area_range if area_range is not None else (0.0, float("inf"))
    gt_ignore_all = np.array([not (lo <= _area(g.box) < hi) for g in gts], dtype=bool)
    det_out = np.array([not (lo <= _area(d.box) < hi) for d in dets], dtype=bool)
    tables = {}
    for c in classes:
        d_idx = [i for i, d in enumerate(dets) if d.class_id == c]
        num_gt = sum(1 for j, g in enumerate(gts) if g.class_id == c and not gt_ignore_all[j])
        pos = {i: k for k, i in enumerate(d_idx)}
        tp = np.zeros((len(thresholds), len(d_idx)), dtype=bool)
        ign = np.zeros((len(thresholds), len(d_idx)), dtype=bool)
        for (img, cls), rows in det_groups.items():
            if cls != c:
                continue
            cols = gt_groups.get((img, cls), [])
            if cols:
                ious = pairwise_iou(
                    np.array([dets[i].box.as_tuple() for i in rows]),
                    np.array([gts[j].box.as_tuple() for j in cols]),
                )
                g_ign = gt_ignore_all[cols]
            for t, thr in enumerate(thresholds):
                m = _greedy(ious, thr, g_ign) if cols else np.full(len(rows), -1)
                for r, col in enumerate(m):
                    k = pos[rows[r]]
                    if col >= 0:
                        if g_ign[col]:
                            ign[t, k] = True
                        else:
                            tp[t, k] = True
                    elif det_out[rows[r]]:
                        ign[t, k] = True
        tables[c] = (tp, ign, num_gt)
    return tables


def mean_average_precision(aps) -> float:
    """Unweighted mean of per-class APs (a dict or a sequence); nan entries are skipped."""
    vals = list(aps.values()) if isinstance(aps, dict) else list(aps)
    m = _mean(vals)
    if m is None:
        raise ValueError("no per-class AP values to average")
    return m


def _mean(xs):
    xs = [x for x in xs if not np.isnan(x)]
    return float(np.mean(xs)) if xs else None


def evaluate(dets: list[Detection], gts: list[GroundTruth]) -> EvalResult:
    if not gts:
        raise ValueError("no ground truth to evaluate against")
    tables = _class_tp_tables(dets, gts, IOU_THRESHOLDS)
    per_class = {}
    per_class_5095 = {}
    ap_by_thr = defaultdict(list)
    for c, (tp, ign, num_gt) in tables.items():
        if num_gt == 0:
            continue
        aps = [average_precision(tp[t], num_gt, ign[t]) for t in range(len(IOU_THRESHOLDS))]
        per_class[c] = aps[0]
        per_class_5095[c] = float(np.mean(aps))
        for t, a in enumerate(aps):
            ap_by_thr[t].append(a)
    map50 = mean_average_precision(ap_by_thr[0])
    map75 = mean_average_precision(ap_by_thr[5])
    map5095 = float(np.mean([mean_average_precision(ap_by_thr[t]) for t in range(len(IOU_THRESHOLDS))]))

    bucket = {}
    for name, rng in AREA_RANGES.items():
        vals = []
        for c, (tp, ign, num_gt) in _class_tp_tables(dets, gts, IOU_THRESHOLDS, rng).items():
            if num_gt == 0:
                continue
            vals.append(np.mean([average_precision(tp[t], num_gt, ign[t]) for t in range(len(IOU_THRESHOLDS))]))
        bucket[name] = _mean(vals)
    return EvalResult(per_class, map50, map75, map5095,
                      bucket["small"], bucket["medium"], bucket["large"], per_class_5095)


def tide_classify(dets: list[Detection], gts: list[GroundTruth],
                  pos_thresh: float = 0.5, bg_thresh: float = 0.1) -> TideReport:
    """Assign every false positive exactly one error type and count misses.

    Precedence for a false positive: Loc (same class, bg <= IoU < pos), Cls
    (other class, IoU >= pos), Dupe (same class, IoU >= pos, GT already
    taken), Bkg (IoU < bg with every GT), otherwise Both.
    """
    match = match_detections(dets, gts, pos_thresh)
    dets = match.detections
    by_image = defaultdict(list)
    for j, g in enumerate(gts):
        by_image[g.image_id].append(j)

    counts = dict.fromkeys(("cls", "loc", "both", "dupe", "bkg", "miss"), 0)
    explained = set()
    for i, d in enumerate(dets):
        if match.tp[i]:
            continue
        cols = by_image.get(d.image_id, [])
        if cols:
            ious = pairwise_iou(np.array([d.box.as_tuple()]),
                                np.array([gts[j].box.as_tuple() for j in cols]))[0]
            same = np.array([gts[j].class_id == d.class_id for j in cols])
        else:
            ious, same = np.zeros(0), np.zeros(0, dtype=bool)
        iou_same = np.where(same, ious, -1.0)
        iou_other = np.where(~same, ious, -1.0)
        best_same = iou_same.max() if cols else -1.0
        best_other = iou_other.max() if cols else -1.0
        best_any = ious.max() if cols else 0.0
        if bg_thresh <= best_same < pos_thresh:
            counts["loc"] += 1
            explained.add(cols[int(np.argmax(iou_same))])
        elif best_other >= pos_thresh:
            counts["cls"] += 1
            explained.add(cols[int(np.argmax(iou_other))])
        elif best_same >= pos_thresh:
            counts["dupe"] += 1
        elif best_any < bg_thresh:
            counts["bkg"] += 1
        else:
            counts["both"] += 1

    used = set(int(j) for j in match.matched_gt[match.tp])
    counts["miss"] = sum(1 for j in range(len(gts)) if j not in used and j not in explained)
    n_det, n_gt = len(dets), len(gts)
    counts["fp"] = match.num_fp
    counts["fn"] = n_gt - match.num_tp
    counts["detections"], counts["ground_truths"] = n_det, n_gt

    pd = lambda k: 100.0 * counts[k] / n_det if n_det else 0.0
    pg = lambda k: 100.0 * counts[k] / n_gt if n_gt else 0.0
    return TideReport(pd("cls"), pd("loc"), pd("both"), pd("dupe"), pd("bkg"), pg("miss"),
                      pd("fp"), pg("fn"), counts)


def _round(obj, nd=4):
    if isinstance(obj, float):
        return round(obj, nd)
    if isinstance(obj, dict):
        return {k: _round(v, nd) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_round(v, nd) for v in obj]
    return obj


def build_report(eval_result: EvalResult | None = None, tide: TideReport | None = None, **extra) -> dict:
    doc = {"format_version": REPORT_VERSION}
    if eval_result is not None:
        doc["eval"] = eval_result.to_dict()
    if tide is not None:
        doc["tide"] = tide.to_dict()
    doc.update(extra)
    return _round(doc)


def write_report(path, report: dict) -> None:
    with open(path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
