import logging

import numpy as np
import pytest
import torch

from emdfnet.geometry import Box, decode_grid, encode_grid
from emdfnet.heads import (
    Detection, HeadConfig, HeadOutput, Heads, NumericError, assign_targets, decode_outputs,
    flatten_outputs, head_forward_and_decode, level_grids, make_grid, nms, postprocess,
)

from oracles import nms_reference


def zero_outputs(h, w, nc=2, stride=8):
    return HeadOutput(torch.zeros(1, nc, h, w), torch.zeros(1, 4, h, w), torch.zeros(1, 1, h, w), stride)


def test_decode_zero_offsets():
    out = zero_outputs(6, 5)
    boxes, classes, scores = decode_outputs([out])
    # grid (x=3, y=4) -> flat index y * w + x
    b = Box(*boxes[0, 4 * 5 + 3].tolist())
    c = b.to_center()
    assert (c.cx, c.cy, c.w, c.h) == (24.0, 32.0, 8.0, 8.0)
    assert torch.allclose(scores, torch.full_like(scores, 0.25))


def test_location_count_640():
    torch.manual_seed(0)
    heads = Heads(16, HeadConfig(num_classes=20, width=16))
    fused = [torch.randn(1, 16, 640 // s, 640 // s) for s in (8, 16, 32)]
    with torch.no_grad():
        outs = heads(fused)
    assert [o.stride for o in outs] == [8, 16, 32]
    assert flatten_outputs(outs)["cls"].shape == (1, 8400, 20)
    grids, strides = level_grids((640, 640))
    assert grids.shape == (8400, 2)


def test_head_forward_and_decode_scores_and_clipping():
    torch.manual_seed(0)
    heads = Heads(8, HeadConfig(num_classes=3, width=8))
    fused = [torch.randn(2, 8, 64 // s, 64 // s) for s in (8, 16, 32)]
    with torch.no_grad():
        dets = head_forward_and_decode(fused, heads, (64, 64))
    assert len(dets) == 2 and len(dets[0]) == 64 + 16 + 4
    for d in dets[0]:
        assert 0.0 <= d.score <= 1.0
        assert 0 <= d.class_id < 3
        assert 0 <= d.box.x1 <= d.box.x2 <= 64 and 0 <= d.box.y1 <= d.box.y2 <= 64


def test_non_finite_logits_reported_with_context():
    out = zero_outputs(4, 4)
    out.cls_logits[0, 1, 2, 3] = float("nan")
    with pytest.raises(NumericError, match=r"stride 8.*x=3, y=2"):
        decode_outputs([out])


def test_encode_decode_roundtrip():
    rng = torch.Generator().manual_seed(0)
    grids, strides = level_grids((64, 96), dtype=torch.float64)
    raw = torch.randn(grids.shape[0], 4, generator=rng, dtype=torch.float64)
    back = encode_grid(decode_grid(raw, grids, strides), grids, strides)
    assert torch.allclose(back, raw, atol=1e-6)


def _det(box, cls, score):
    return Detection(Box(*box), cls, score)


def test_nms_examples():
    a = _det((0, 0, 10, 10), 0, 0.9)
    b = _det((0, 0, 10, 10), 0, 0.8)
    assert nms([a, b], 0.65, 0.0) == [a]
    c = _det((0, 0, 10, 10), 1, 0.8)
    assert nms([a, c], 0.65, 0.0) == [a, c]
    assert nms([a, c], 0.65, 0.85) == [a]
    with pytest.raises(ValueError):
        nms([a], 1.5, 0.0)


def _random_dets(rng, n, n_cls=2):
    xy = rng.uniform(0, 30, size=(n, 2))
    wh = rng.uniform(2, 20, size=(n, 2))
    boxes = np.concatenate([xy, xy + wh], 1)
    scores = rng.permutation(n) / n + 0.01  # distinct
    classes = rng.integers(0, n_cls, n)
    return boxes, scores, classes


def test_nms_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(200):
        boxes, scores, classes = _random_dets(rng, 10)
        dets = [_det(b, int(c), float(s)) for b, c, s in zip(boxes, classes, scores)]
        thresh = float(rng.uniform(0.1, 0.9))
        got = nms(dets, thresh, 0.0)
        ref = nms_reference([tuple(b) for b in boxes], list(scores), list(classes), thresh)
        assert got == [dets[i] for i in ref]


def test_nms_permutation_invariant():
    rng = np.random.default_rng(1)
    boxes, scores, classes = _random_dets(rng, 12)
    dets = [_det(b, int(c), float(s)) for b, c, s in zip(boxes, classes, scores)]
    ref = nms(dets, 0.5, 0.0)
    for _ in range(20):
        perm = rng.permutation(len(dets))
        assert nms([dets[i] for i in perm], 0.5, 0.0) == ref


def test_nms_ties_keep_input_order():
    a = _det((0, 0, 10, 10), 0, 0.5)
    b = _det((1, 0, 11, 10), 0, 0.5)
    assert nms([a, b], 0.5, 0.0) == [a]
    assert nms([b, a], 0.5, 0.0) == [b]


def test_postprocess_limits():
    out = zero_outputs(4, 4, nc=2)
    out.obj_logits[0, 0, 1, 1] = 5.0
    out.cls_logits[0, 1, 1, 1] = 5.0
    res = postprocess([out], (32, 32), HeadConfig(num_classes=2), score_thresh=0.3)
    boxes, scores, classes = res[0]
    assert len(scores) == 1 and classes[0] == 1
    assert scores[0] == pytest.approx(1 / (1 + np.exp(-5.0)) ** 2)


def grids_for(h, w, stride=8):
    return make_grid(h, w, stride, dtype=torch.float64)


def test_assign_single_cell():
    grids, strides = level_grids((64, 64))
    # only the stride-8 centre (20, 36) lies inside this box
    res = assign_targets([[17, 33, 23, 39]], [1], grids, strides)
    fg = torch.nonzero(res.fg_mask).flatten().tolist()
    assert fg == [4 * 8 + 2]
    assert int(res.cls_targets[fg[0]]) == 1
    assert int(res.matched_gt[fg[0]]) == 0
    assert res.box_targets[fg[0]].tolist() == [17, 33, 23, 39]


def test_assign_fallback_for_tiny_gt():
    grids, strides = level_grids((64, 64))
    res = assign_targets([[1, 1, 3, 3]], [0], grids, strides)
    assert torch.nonzero(res.fg_mask).flatten().tolist() == [0]


def test_assign_skips_boxes_outside_image(caplog):
    grids, strides = level_grids((64, 64))
    with caplog.at_level(logging.WARNING):
        res = assign_targets([[70, 70, 90, 90], [17, 33, 23, 39]], [0, 1], grids, strides,
                             image_size=(64, 64))
    assert res.skipped == [0]
    assert "skipping" in caplog.text
    assert set(res.matched_gt[res.fg_mask].tolist()) == {1}


def test_assign_two_disjoint_gts_brute_force():
    grids, strides = grids_for(20, 20)
    gts = np.array([[10.0, 12.0, 50.0, 44.0], [90.0, 100.0, 130.0, 150.0]])
    cfg = HeadConfig()
    res = assign_targets(gts, [0, 1], grids, strides, cfg)
    owners = res.matched_gt.tolist()
    sets = [set(i for i, o in enumerate(owners) if o == j) for j in range(2)]
    assert sets[0] and sets[1]
    assert not sets[0] & sets[1]
    # every assigned location must be a genuine candidate of its GT
    for loc in range(400):
        gx, gy = loc % 20, loc // 20
        cx, cy = (gx + 0.5) * 8, (gy + 0.5) * 8
        for j, (x1, y1, x2, y2) in enumerate(gts):
            inside = x1 < cx < x2 and y1 < cy < y2
            near = abs(cx - (x1 + x2) / 2) < 2.5 * 8 and abs(cy - (y1 + y2) / 2) < 2.5 * 8
            if loc in sets[j]:
                assert inside and near
    for j in range(2):
        assert 1 <= len(sets[j]) <= 10


def test_assign_unique_owner_and_coverage_random():
    rng = np.random.default_rng(0)
    grids, strides = level_grids((128, 128))
    for _ in range(30):
        n = int(rng.integers(1, 6))
        xy = rng.uniform(0, 100, size=(n, 2))
        gts = np.concatenate([xy, xy + rng.uniform(4, 40, size=(n, 2))], 1).clip(0, 128)
        res = assign_targets(gts, rng.integers(0, 3, n), grids, strides)
        fg = res.fg_mask
        # each foreground location maps to exactly one ground truth
        assert (res.matched_gt[fg] >= 0).all() and (res.matched_gt[~fg] == -1).all()
        counts = np.bincount(res.matched_gt[fg].numpy(), minlength=n)
        assert (counts >= 1).all(), counts


def test_assign_with_predictions_prefers_better_boxes():
    grids, strides = grids_for(8, 8)
    gt = torch.tensor([[8.0, 8.0, 56.0, 56.0]], dtype=torch.float64)
    pred = torch.zeros(64, 4, dtype=torch.float64)
    pred[:] = torch.tensor([0.0, 0.0, 4.0, 4.0])
    good = 3 * 8 + 3
    pred[good] = gt[0]
    probs = torch.full((64, 2), 0.1, dtype=torch.float64)
    res = assign_targets(gt, [1], grids, strides, pred_boxes=pred, pred_probs=probs)
    assert bool(res.fg_mask[good])
