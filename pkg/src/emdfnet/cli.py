"""Command-line entry point: ``emdfnet {train,eval,detect,tide,synth}``."""
from __future__ import annotations

import argparse
import colorsys
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw

from .data import (
    AnnotationError, DatasetIndex, ImageRecord, SynthConfig, load_dataset, save_dataset,
    synth_generate,
)
from .data.synth import synth_config_dict
from .geometry import Box, InvalidBoxError
from .heads import Detection
from .metrics import build_report, evaluate, tide_classify, write_report
from .train import TrainingError, detect_records, fit, load_checkpoint, load_config

log = logging.getLogger("emdfnet")

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".ppm", ".bmp"}


@dataclass
class CommandOutcome:
    status: int
    artifacts: list[str] = field(default_factory=list)


class UsageError(Exception):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config (default: $EMDFNET_CONFIG)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--deterministic", type=_bool, default=True, metavar="BOOL")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", help="dataset root, image file or image directory")
    data.add_argument("--dataset", choices=["tt100k", "gtsdb", "synth"])
    data.add_argument("--split", default=None,
                      help="dataset split (default: train for training, test otherwise)")

    infer = argparse.ArgumentParser(add_help=False)
    infer.add_argument("--checkpoint")
    infer.add_argument("--input-size", type=int, default=None)
    infer.add_argument("--score-thresh", type=float, default=None)

    p = _Parser(prog="emdfnet", description="EMDFNet traffic-sign detector toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", parents=[common, data], help="train a model")
    t.add_argument("--val-data", help="held-out dataset root for periodic evaluation")
    t.add_argument("--epochs", type=int, default=None)

    e = sub.add_parser("eval", parents=[common, data, infer], help="mAP report")
    e.add_argument("--detections", help="JSON detections to score instead of running a model")

    sub.add_parser("detect", parents=[common, data, infer], help="render detections on images")

    td = sub.add_parser("tide", parents=[common, data, infer], help="TIDE error breakdown")
    td.add_argument("--detections", help="JSON detections to score instead of running a model")

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--n", type=int, default=100, help="number of images")
    s.add_argument("--num-classes", type=int, default=10)
    s.add_argument("--image-size", type=int, default=320)
    s.add_argument("--split", default="train", help="split name stored in the annotations")
    return p


def _require(args, *names):
    for n in names:
        if getattr(args, n) in (None, ""):
            raise UsageError(f"emdfnet {args.command}: --{n.replace('_', '-')} is required")


def _load_data(args) -> DatasetIndex:
    root = Path(args.data)
    if not root.exists():
        raise FileNotFoundError(f"data path not found: {root}")
    split = args.split or ("train" if args.command == "train" else "test")
    return load_dataset(args.dataset or "synth", root, split)


def read_detections(path) -> list[Detection]:
    """Detections file: JSON list of {image_id, box: [x1,y1,x2,y2], class_id, score}."""
    with open(path) as f:
        rows = json.load(f)
    try:
        return [Detection(Box(*r["box"]), int(r["class_id"]), float(r["score"]), r["image_id"])
                for r in rows]
    except (KeyError, TypeError) as e:
        raise ValueError(f"{path}: malformed detection entry ({e})") from None


def _detections(args, data: DatasetIndex) -> list[Detection]:
    if args.detections:
        return read_detections(args.detections)
    _require(args, "checkpoint")
    model, payload = load_checkpoint(args.checkpoint)
    size = args.input_size or _eval_size(payload)
    per = detect_records(model, data.records, size, args.score_thresh)
    return [d for dets in per for d in dets]


def _eval_size(payload) -> int:
    tc = payload.get("train_config") or {}
    return int(tc.get("eval_size") or max(tc.get("input_sizes") or [640]))


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(args) -> CommandOutcome:
    _require(args, "out")
    cfg = SynthConfig(seed=args.seed or 0, num_images=args.n, num_classes=args.num_classes,
                      image_size=args.image_size, split=args.split)
    path = save_dataset(synth_generate(cfg), args.out, synth_config_dict(cfg))
    print(f"wrote {cfg.num_images} images to {args.out}")
    return CommandOutcome(0, [str(path)])


def cmd_train(args) -> CommandOutcome:
    _require(args, "data")
    mcfg, tcfg, _ = load_config(args.config)
    if args.seed is not None:
        tcfg.seed = args.seed
    if args.epochs is not None:
        if args.epochs < 1:
            raise UsageError("emdfnet train: --epochs must be positive")
        tcfg.epochs = args.epochs
        tcfg.warmup_epochs = min(tcfg.warmup_epochs, args.epochs - 1)
        tcfg.no_aug_epochs = min(tcfg.no_aug_epochs, args.epochs)
    tcfg.deterministic = args.deterministic
    train = _load_data(args)
    val = load_dataset(args.dataset or "synth", args.val_data, "test") if args.val_data else None
    out = _out_dir(args, "runs/train")
    hist_path = out / "history.jsonl"
    hist_path.write_text("")

    def progress(row):
        with open(hist_path, "a") as f:
            f.write(json.dumps(row, sort_keys=True) + "\n")
        print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}"
                       for k, v in row.items()))

    result = fit(mcfg, train, tcfg, val, out_dir=out, progress=progress)
    return CommandOutcome(0, [*result.checkpoint_paths.values(), str(hist_path)])


def cmd_eval(args) -> CommandOutcome:
    _require(args, "data")
    data = _load_data(args)
    dets = _detections(args, data)
    res = evaluate(dets, data.ground_truths())
    report = build_report(res, num_images=len(data), num_detections=len(dets))
    out = _out_dir(args, ".") / "eval_report.json"
    write_report(out, report)
    print(json.dumps(report["eval"], indent=2, sort_keys=True))
    return CommandOutcome(0, [str(out)])


def cmd_tide(args) -> CommandOutcome:
    _require(args, "data")
    data = _load_data(args)
    dets = _detections(args, data)
    tide = tide_classify(dets, data.ground_truths())
    report = build_report(tide=tide, num_images=len(data), num_detections=len(dets))
    out = _out_dir(args, ".") / "tide_report.json"
    write_report(out, report)
    print(json.dumps(report["tide"], indent=2, sort_keys=True))
    return CommandOutcome(0, [str(out)])


def class_color(class_id: int) -> tuple[int, int, int]:
    h = (class_id * 0.618033988749895) % 1.0
    r, g, b = colorsys.hsv_to_rgb(h, 0.85, 0.95)
    return int(r * 255), int(g * 255), int(b * 255)


def render_detections(image: np.ndarray, dets: list[Detection], names) -> Image.Image:
    im = Image.fromarray(image).convert("RGB")
    draw = ImageDraw.Draw(im)
    for d in dets:
        col = class_color(d.class_id)
        b = d.box
        draw.rectangle([b.x1, b.y1, b.x2, b.y2], outline=col, width=2)
        name = names[d.class_id] if 0 <= d.class_id < len(names) else str(d.class_id)
        label = f"{name} {d.score:.2f}"
        tx, ty = b.x1, max(0.0, b.y1 - 12)
        l, t, r, bt = draw.textbbox((tx, ty), label)
        draw.rectangle([l - 1, t - 1, r + 1, bt + 1], fill=col)
        draw.text((tx, ty), label, fill=(0, 0, 0))
    return im


def _image_records(path: Path) -> list[ImageRecord]:
    files = [path] if path.is_file() else sorted(
        p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES
    )
    records = []
    for f in files:
        with Image.open(f) as im:
            w, h = im.size
        records.append(ImageRecord(f.stem, w, h, path=str(f)))
    return records


def cmd_detect(args) -> CommandOutcome:
    _require(args, "data", "checkpoint")
    root = Path(args.data)
    if not root.exists():
        raise FileNotFoundError(f"data path not found: {root}")
    model, payload = load_checkpoint(args.checkpoint)
    names = payload.get("category_names") or []
    records = _load_data(args).records if args.dataset else _image_records(root)
    size = args.input_size or _eval_size(payload)
    thresh = args.score_thresh if args.score_thresh is not None else model.cfg.heads.vis_score_thresh
    out = _out_dir(args, "detections")
    per = detect_records(model, records, size, thresh)
    written = []
    for r, dets in zip(records, per):
        suffix = Path(r.path).suffix if r.path else ".png"
        dest = out / f"{Path(r.path).stem if r.path else r.image_id}{suffix}"
        render_detections(r.load_pixels(), dets, names).save(dest)
        written.append(str(dest))
    rows = [{"image_id": d.image_id, "box": list(d.box.as_tuple()), "class_id": d.class_id,
             "score": round(d.score, 4)} for dets in per for d in dets]
    with open(out / "detections.json", "w") as f:
        json.dump(rows, f, indent=1)
    print(f"rendered {len(written)} images to {out}")
    return CommandOutcome(0, written + [str(out / "detections.json")])


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "detect": cmd_detect, "tide": cmd_tide,
            "synth": cmd_synth}


def dispatch(argv=None) -> CommandOutcome:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(parser.format_usage().rstrip(), file=sys.stderr)
        print(e, file=sys.stderr)
        return CommandOutcome(2)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.seed is not None:
        torch.manual_seed(args.seed)
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return CommandOutcome(2)
    except (OSError, ValueError, AnnotationError, InvalidBoxError, TrainingError, KeyError) as e:
        print(f"emdfnet {args.command}: error: {e}", file=sys.stderr)
        return CommandOutcome(1)


def main(argv=None) -> int:
    return dispatch(argv).status


if __name__ == "__main__":
    sys.exit(main())
