import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emdfnet.geometry import Box, iou
from emdfnet.data import (
    GTSDB_CATEGORIES, GTSDB_SUPER, AnnotationError, DatasetIndex, ImageRecord, SynthConfig,
    letterbox, load_dataset, load_gtsdb, load_synth, load_tt100k, mixup, mosaic,
    parse_gtsdb_gt, random_mosaic, render_image, save_dataset, synth_generate, to_tensor,
)


# -- TT100K -------------------------------------------------------------------

def _obj(cat, x1, y1, x2, y2):
    return {"category": cat, "bbox": {"xmin": x1, "ymin": y1, "xmax": x2, "ymax": y2}}


@pytest.fixture
def tt100k_root(tmp_path):
    doc = {
        "types": ["pl40", "ph5", "i5"],
        "imgs": {
            "1": {"id": 1, "path": "train/1.jpg",
                  "objects": [_obj("pl40", 10, 10, 30, 30), _obj("ph5", 50, 50, 70, 70)]},
            "2": {"id": 2, "path": "train/2.jpg",
                  "objects": [_obj("ph5", 5, 5, 25, 25), _obj("pl40", 2000, 2000, 2100, 2100)]},
            "3": {"id": 3, "path": "test/3.jpg", "objects": [_obj("i5", 0, 0, 9, 9)]},
        },
    }
    (tmp_path / "annotations.json").write_text(json.dumps(doc))
    return tmp_path


def test_tt100k_filters_mixed_categories(tt100k_root):
    idx = load_tt100k(tt100k_root, "train", min_instances=1)
    assert len(idx) == 2
    assert idx.category_names == ["i5", "pl40"]
    assert "ph5" not in idx.category_names
    first = idx.records[0]
    assert [a.class_id for a in first.annotations] == [1]
    # out-of-image box clipped to the 2048 canvas
    assert idx.records[1].annotations[0].box.as_tuple() == (2000, 2000, 2048, 2048)


def test_tt100k_keeps_mixed_in_45_mode(tt100k_root):
    idx = load_tt100k(tt100k_root, "train", min_instances=1, num_categories=45)
    assert "ph5" in idx.category_names
    assert sum(len(r.annotations) for r in idx.records) == 4


def test_tt100k_instance_threshold(tt100k_root):
    idx = load_tt100k(tt100k_root, "train", min_instances=2)
    assert idx.category_names == ["pl40"]
    assert load_tt100k(tt100k_root, "test", min_instances=1).records[0].image_id == 3


def test_tt100k_unknown_category_warns(tt100k_root, caplog):
    doc = json.loads((tt100k_root / "annotations.json").read_text())
    doc["imgs"]["1"]["objects"].append(_obj("zz9", 1, 1, 5, 5))
    (tt100k_root / "annotations.json").write_text(json.dumps(doc))
    idx = load_tt100k(tt100k_root, "train", min_instances=1)
    assert "unknown category" in caplog.text
    assert len(idx.records[0].annotations) == 1


def test_tt100k_missing_document(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_tt100k(tmp_path)


def test_loaders_idempotent(tt100k_root):
    a = load_tt100k(tt100k_root, "train", min_instances=1)
    b = load_tt100k(tt100k_root, "train", min_instances=1)
    assert a == b


# -- GTSDB --------------------------------------------------------------------

def test_gtsdb_super_category_table():
    assert sorted(GTSDB_SUPER) == list(range(43))
    assert GTSDB_CATEGORIES == ["danger", "mandatory", "other", "prohibitory"]
    assert GTSDB_SUPER[1] == "prohibitory"
    assert GTSDB_SUPER[14] == "other"  # stop
    assert GTSDB_SUPER[38] == "mandatory"
    assert GTSDB_SUPER[25] == "danger"


def test_gtsdb_fixture_line(tmp_path):
    (tmp_path / "gt.txt").write_text("00001.ppm;10;20;60;80;1\n")
    idx = load_gtsdb(tmp_path)
    (rec,) = idx.records
    (g,) = rec.annotations
    assert g.box.as_tuple() == (10, 20, 60, 80)
    assert idx.category_names[g.class_id] == "prohibitory"
    assert (rec.width, rec.height) == (1360, 800)


def test_gtsdb_empty_file_still_indexes_images(tmp_path):
    (tmp_path / "gt.txt").write_text("")
    for n in ("00000.ppm", "00700.ppm"):
        (tmp_path / n).write_bytes(b"")
    idx = load_gtsdb(tmp_path)
    assert len(idx) == 2 and all(not r.annotations for r in idx.records)
    assert [r.image_id for r in load_gtsdb(tmp_path, "train").records] == ["00000.ppm"]
    assert [r.image_id for r in load_gtsdb(tmp_path, "test").records] == ["00700.ppm"]


@pytest.mark.parametrize("line", ["00001.ppm;10;20;60;80", "00001.ppm;a;20;60;80;1", "x.ppm;1;1;2;2;99"])
def test_gtsdb_malformed_line_reports_line_number(tmp_path, line):
    path = tmp_path / "gt.txt"
    path.write_text("00000.ppm;1;1;5;5;2\n" + line + "\n")
    with pytest.raises(AnnotationError, match=r"gt.txt:2"):
        parse_gtsdb_gt(path)


def test_gtsdb_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_gtsdb(tmp_path)


def test_dataset_index_validates_class_ids():
    rec = ImageRecord("a", 10, 10, ImageRecord.make_annotations("a", [[0, 0, 5, 5]], [3]))
    with pytest.raises(ValueError):
        DatasetIndex([rec], ["x", "y"])


# -- synthetic data -----------------------------------------------------------

def test_synth_contract_and_determinism():
    cfg = SynthConfig(seed=7, num_images=10, image_size=128, max_signs=4, max_size=24)
    a, b = synth_generate(cfg), synth_generate(cfg)
    assert len(a) == 10
    for ra, rb in zip(a.records, b.records):
        assert 1 <= len(ra.annotations) <= 4
        assert np.array_equal(ra.pixels, rb.pixels)
        assert ra.annotations == rb.annotations
        assert ra.pixels.shape == (128, 128, 3) and ra.pixels.dtype == np.uint8
    other = synth_generate(SynthConfig(seed=8, num_images=10, image_size=128, max_signs=4, max_size=24))
    assert not np.array_equal(a.records[0].pixels, other.records[0].pixels)


def test_synth_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(min_size=4).validate()
    with pytest.raises(ValueError):
        SynthConfig(min_signs=3, max_signs=2).validate()


def test_synth_foreground_inside_boxes():
    cfg = SynthConfig(seed=3, num_images=20, image_size=160, noise_std=0.0)
    for i in range(cfg.num_images):
        bg, img, boxes, _ = render_image(cfg, i)
        fg = np.any(bg != img, axis=2)
        # signs are 2 px apart, so a 1 px ring around a box belongs to that sign only
        for x1, y1, x2, y2 in boxes.astype(int):
            ring = fg[max(y1 - 1, 0):y2 + 1, max(x1 - 1, 0):x2 + 1].sum()
            inside = fg[y1:y2, x1:x2].sum()
            assert inside > 0
            assert inside >= 0.9 * ring
        covered = np.zeros_like(fg)
        for x1, y1, x2, y2 in boxes.astype(int):
            covered[y1:y2, x1:x2] = True
        assert (fg & ~covered).sum() == 0


def test_synth_crowded_image_warns():
    cfg = SynthConfig(seed=0, num_images=1, image_size=64, min_signs=6, max_signs=6,
                      min_size=40, max_size=48, max_attempts=5)
    with pytest.warns(RuntimeWarning, match="could not place"):
        idx = synth_generate(cfg)
    assert len(idx.records[0].annotations) < 6


def test_synth_save_load_roundtrip(tmp_path):
    cfg = SynthConfig(seed=1, num_images=3, image_size=96, max_size=24)
    idx = synth_generate(cfg)
    path = save_dataset(idx, tmp_path, {"seed": 1})
    doc = json.loads(path.read_text())
    assert doc["format"] == "emdfnet-synth" and doc["config"] == {"seed": 1}
    back = load_synth(tmp_path)
    assert back.category_names == idx.category_names
    for a, b in zip(idx.records, back.records):
        assert a.annotations == b.annotations
        assert np.array_equal(a.pixels, b.load_pixels())
    assert load_dataset("synth", tmp_path).records[0].image_id == idx.records[0].image_id
    with pytest.raises(ValueError):
        load_dataset("coco", tmp_path)


# -- augmentation -------------------------------------------------------------

def _sample(rng, size, n):
    img = rng.integers(0, 255, size=(size, size, 3), dtype=np.uint8)
    xy = rng.uniform(0, size - 12, size=(n, 2))
    wh = rng.uniform(4, 12, size=(n, 2))
    return img, np.concatenate([xy, np.minimum(xy + wh, size)], 1), rng.integers(0, 5, n)


def test_mosaic_without_annotations():
    img = np.zeros((32, 32, 3), np.uint8)
    canvas, boxes, classes = mosaic([(img, np.zeros((0, 4)), np.zeros(0, int))] * 4, 64, (32, 32))
    assert canvas.shape == (64, 64, 3) and len(boxes) == 0 and len(classes) == 0


def test_mosaic_center_translation():
    rng = np.random.default_rng(0)
    img, boxes, classes = _sample(rng, 32, 3)
    canvas, out, out_cls = mosaic([(img, boxes, classes)] * 4, 64, (32, 32))
    offsets = [(0, 0), (32, 0), (0, 32), (32, 32)]
    expect = np.concatenate([boxes + np.array([dx, dy, dx, dy]) for dx, dy in offsets])
    assert np.allclose(out, expect)
    assert out_cls.tolist() == classes.tolist() * 4
    for dx, dy in offsets:
        assert np.array_equal(canvas[dy:dy + 32, dx:dx + 32], img)


def test_random_mosaic_boxes_stay_in_quadrant():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        samples = [_sample(rng, int(rng.integers(24, 64)), int(rng.integers(0, 4))) for _ in range(4)]
        xc, yc = (int(v) for v in rng.integers(0, 65, size=2))
        _, boxes, classes = mosaic(samples, 64, (xc, yc))
        assert len(boxes) == len(classes)
        for x1, y1, x2, y2 in boxes:
            assert 0 <= x1 < x2 <= 64 and 0 <= y1 < y2 <= 64
            assert x2 - x1 >= 2 and y2 - y1 >= 2
            # every box sits wholly on one side of both split lines
            assert x2 <= xc or x1 >= xc
            assert y2 <= yc or y1 >= yc


def test_random_mosaic_runs():
    rng = np.random.default_rng(2)
    samples = [_sample(rng, 48, 3) for _ in range(4)]
    canvas, boxes, _ = random_mosaic(samples, 64, rng)
    assert canvas.shape == (64, 64, 3)
    assert ((boxes >= 0) & (boxes <= 64)).all()


def test_mosaic_rejects_bad_input():
    s = (np.zeros((8, 8, 3), np.uint8), np.zeros((0, 4)), np.zeros(0, int))
    with pytest.raises(ValueError):
        mosaic([s] * 3, 16, (8, 8))
    with pytest.raises(ValueError):
        mosaic([s] * 4, 16, (20, 8))


def test_mixup():
    rng = np.random.default_rng(0)
    a, b = _sample(rng, 16, 2), _sample(rng, 16, 3)
    img, boxes, classes = mixup(a, b, 1.0)
    assert np.array_equal(img, a[0])
    assert len(boxes) == len(classes) == 5
    img, _, _ = mixup(a, a, 0.5)
    assert np.array_equal(img, a[0])
    with pytest.raises(ValueError):
        mixup(a, _sample(rng, 8, 1))
    with pytest.raises(ValueError):
        mixup(a, b, 1.5)


@settings(max_examples=100, deadline=None)
@given(st.integers(20, 200), st.integers(20, 200), st.sampled_from([320, 416, 640]),
       st.integers(0, 2**31 - 1))
def test_letterbox_preserves_iou(h, w, size, seed):
    rng = np.random.default_rng(seed)
    xy = rng.uniform(0, min(h, w) / 2, size=(2, 2))
    boxes = np.concatenate([xy, xy + rng.uniform(1, min(h, w) / 2, size=(2, 2))], 1)
    canvas, out, scale = letterbox(np.zeros((h, w, 3), np.uint8), boxes, size)
    assert canvas.shape == (size, size, 3)
    assert iou(Box(*out[0]), Box(*out[1])) == pytest.approx(iou(Box(*boxes[0]), Box(*boxes[1])), abs=1e-6)
    assert np.allclose(out / scale, boxes)
    assert (out <= size + 1e-9).all()


def test_letterbox_pads_right_and_bottom():
    img = np.full((50, 100, 3), 7, np.uint8)
    canvas, _, scale = letterbox(img, np.zeros((0, 4)), 64)
    assert scale == pytest.approx(0.64)
    assert (canvas[:32, :64] == 7).all()
    assert (canvas[32:] == 114).all()


def test_to_tensor():
    t = to_tensor([np.full((4, 6, 3), 255, np.uint8)])
    assert t.shape == (1, 3, 4, 6) and float(t.max()) == 1.0
