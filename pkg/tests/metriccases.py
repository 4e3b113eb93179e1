"""Random fixtures for the evaluator and TIDE tests."""
import numpy as np

from emdfnet.geometry import Box
from emdfnet.heads import Detection
from emdfnet.metrics import GroundTruth


def _jitter(rng, box, scale):
    x1, y1, x2, y2 = box
    w, h = x2 - x1, y2 - y1
    d = rng.normal(0, scale, 4) * np.array([w, h, w, h])
    nx1, ny1 = x1 + d[0], y1 + d[1]
    return (nx1, ny1, max(nx1 + 1, x2 + d[2]), max(ny1 + 1, y2 + d[3]))


def micro_dataset(rng, n_images=3, max_gts=10, max_dets=20, n_classes=3):
    """Few images, boxes of mixed sizes; detections mostly perturb the GTs."""
    gts = []
    for _ in range(int(rng.integers(1, max_gts + 1))):
        xy = rng.uniform(0, 150, 2)
        wh = rng.uniform(8, 120, 2)
        gts.append(GroundTruth(Box(*xy, *(xy + wh)), int(rng.integers(n_classes)),
                               int(rng.integers(n_images))))
    dets = []
    for _ in range(int(rng.integers(0, max_dets + 1))):
        if rng.random() < 0.7:
            g = gts[int(rng.integers(len(gts)))]
            box = _jitter(rng, g.box.as_tuple(), 0.15)
            cls = g.class_id if rng.random() < 0.8 else int(rng.integers(n_classes))
            img = g.image_id
        else:
            xy = rng.uniform(0, 150, 2)
            box = (*xy, *(xy + rng.uniform(8, 120, 2)))
            cls, img = int(rng.integers(n_classes)), int(rng.integers(n_images))
        dets.append(Detection(Box(*box), cls, float(rng.random()), img))
    return dets, gts


def tide_fixtures():
    """One fixture per error type; each holds a single instance of it."""
    g = GroundTruth(Box(0, 0, 10, 10), 0, "a")
    shifted_3 = Box(5.4, 0, 15.4, 10)  # IoU ~0.30 with g
    out = {
        "cls": ([Detection(Box(1, 0, 11, 10), 1, 0.9, "a")], [g]),
        "loc": ([Detection(shifted_3, 0, 0.9, "a")], [g]),
        "both": ([Detection(shifted_3, 1, 0.9, "a"), Detection(Box(0, 0, 10, 10), 0, 0.8, "a")], [g]),
        "dupe": ([Detection(Box(0, 0, 10, 10), 0, 0.9, "a"),
                  Detection(Box(0, 0, 10, 9), 0, 0.8, "a")], [g]),
        "bkg": ([Detection(Box(0, 0, 10, 10), 0, 0.9, "a"), Detection(Box(50, 50, 60, 60), 0, 0.8, "a")], [g]),
        "miss": ([Detection(Box(0, 0, 10, 10), 0, 0.9, "a")],
                 [g, GroundTruth(Box(40, 40, 50, 50), 1, "a")]),
    }
    return out
