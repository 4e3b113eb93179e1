"""Training loop, learning-rate schedule, checkpoints and evaluation helpers."""
from __future__ import annotations

import copy
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import yaml

from .data.augment import letterbox, mixup, random_mosaic, to_tensor
from .data.records import DatasetIndex, ImageRecord
from .heads import Detection, NumericError, assign_targets, check_finite, flatten_outputs
from .geometry import Box, decode_grid
from .losses import total_loss
from .metrics import EvalResult, evaluate
from .model import EMDFNet, ModelConfig, PRESETS

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
CONFIG_ENV = "EMDFNET_CONFIG"


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 50
    warmup_epochs: int = 5
    base_lr: float | None = None  # None -> 0.01 * batch_size / 64
    min_lr_ratio: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 8
    input_sizes: list[int] = field(default_factory=lambda: [320])
    eval_size: int | None = None  # None -> max(input_sizes)
    seed: int = 0
    eval_interval: int = 5
    no_aug_epochs: int = 15
    mosaic_prob: float = 0.5
    mosaic_scale: tuple[float, float] = (0.75, 1.25)
    mixup_prob: float = 0.15
    grad_clip: float = 35.0
    deterministic: bool = True
    num_threads: int | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError("warmup_epochs must lie in [0, epochs)")
        if any(s % 32 for s in self.input_sizes):
            raise ValueError("input sizes must be multiples of 32")
        self.mosaic_scale = tuple(self.mosaic_scale)

    @property
    def lr(self) -> float:
        return self.base_lr if self.base_lr is not None else 0.01 * self.batch_size / 64

    @property
    def min_lr(self) -> float:
        return self.lr * self.min_lr_ratio

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mosaic_scale"] = list(self.mosaic_scale)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def lr_at(step: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    """Linear warm-up from 0, then cosine decay reaching min_lr at the last step."""
    if step < 0:
        raise ValueError("step must be non-negative")
    warm = cfg.warmup_epochs * steps_per_epoch
    last = cfg.epochs * steps_per_epoch - 1
    if step < warm:
        return cfg.lr * step / warm
    if last <= warm:
        # no decay phase; the final step still lands on min_lr
        return cfg.lr if step < last else cfg.min_lr
    if step == warm:
        return cfg.lr
    t = min(1.0, (step - warm) / (last - warm))
    if t == 1.0:
        return cfg.min_lr
    return cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1.0 + math.cos(math.pi * t))


def set_determinism(cfg: TrainConfig):
    torch.manual_seed(cfg.seed)
    if cfg.num_threads:
        torch.set_num_threads(cfg.num_threads)
    torch.use_deterministic_algorithms(cfg.deterministic)


def build_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.SGD:
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        (decay if p.ndim > 1 else no_decay).append(p)
    return torch.optim.SGD(
        [{"params": decay, "weight_decay": cfg.weight_decay},
         {"params": no_decay, "weight_decay": 0.0}],
        lr=0.0, momentum=cfg.momentum, nesterov=cfg.momentum > 0,
    )


def _sample(record: ImageRecord):
    return record.load_pixels(), record.boxes_array(), record.classes_array()


def _letterboxed(record: ImageRecord, size: int):
    img, boxes, classes = _sample(record)
    img, boxes, _ = letterbox(img, boxes, size)
    return img, boxes, classes


def make_training_sample(data: DatasetIndex, idx: int, size: int, augment: bool,
                         rng: np.random.Generator, cfg: TrainConfig):
    n = len(data)
    if augment and rng.random() < cfg.mosaic_prob:
        others = rng.integers(0, n, size=3)
        picks = [_sample(data.records[idx])] + [_sample(data.records[int(j)]) for j in others]
        img, boxes, classes = random_mosaic(picks, size, rng, cfg.mosaic_scale)
    else:
        img, boxes, classes = _letterboxed(data.records[idx], size)
    if augment and rng.random() < cfg.mixup_prob:
        other = _letterboxed(data.records[int(rng.integers(0, n))], size)
        img, boxes, classes = mixup((img, boxes, classes), other, 0.5)
    return img, boxes, classes


def compute_loss(model: EMDFNet, images: torch.Tensor, targets):
    """Forward, assign and score one batch. ``targets`` is a list of (boxes, classes)."""
    outputs = model(images)
    check_finite(outputs)
    flat = flatten_outputs(outputs)
    with torch.no_grad():
        pred_boxes = decode_grid(flat["reg"], flat["grids"], flat["strides"])
        probs = flat["cls"].sigmoid() * flat["obj"].sigmoid().unsqueeze(-1)
    assignments = [
        assign_targets(boxes, classes, flat["grids"], flat["strides"], model.cfg.heads,
                       pred_boxes=pred_boxes[i], pred_probs=probs[i], image_size=images.shape[-2:])
        for i, (boxes, classes) in enumerate(targets)
    ]
    return total_loss(assignments, flat, model.cfg.loss)


@torch.no_grad()
def detect_records(model: EMDFNet, records, input_size: int, score_thresh=None,
                   batch_size: int = 8) -> list[list[Detection]]:
    """Letterbox, predict and map detections back to original image pixels."""
    out = []
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        imgs, scales = [], []
        for r in chunk:
            img, _, s = letterbox(r.load_pixels(), np.zeros((0, 4)), input_size)
            imgs.append(img)
            scales.append(s)
        preds = model.predict(to_tensor(imgs), score_thresh)
        for r, s, (boxes, scores, classes) in zip(chunk, scales, preds):
            boxes = boxes / s
            boxes[:, [0, 2]] = boxes[:, [0, 2]].clip(0, r.width)
            boxes[:, [1, 3]] = boxes[:, [1, 3]].clip(0, r.height)
            dets = []
            for b, sc, c in zip(boxes, scores, classes):
                if b[2] <= b[0] or b[3] <= b[1]:
                    continue
                dets.append(Detection(Box(*map(float, b)), int(c), float(sc), r.image_id))
            out.append(dets)
    return out


def evaluate_model(model: EMDFNet, data: DatasetIndex, input_size: int,
                   score_thresh=None) -> tuple[EvalResult, list[Detection]]:
    dets = [d for per in detect_records(model, data.records, input_size, score_thresh) for d in per]
    return evaluate(dets, data.ground_truths()), dets


@dataclass
class FitResult:
    model: EMDFNet
    history: list[dict]
    best_map50: float
    best_epoch: int
    checkpoint_paths: dict[str, str]


def _history_row(epoch, sums, nb, lr) -> dict:
    row = {"epoch": epoch, "lr": float(lr)}
    for k, v in sums.items():
        row[k] = float(v / max(nb, 1))
    return row


def fit(model_cfg: ModelConfig, train_data: DatasetIndex, cfg: TrainConfig,
        val_data: DatasetIndex | None = None, out_dir=None, progress=None) -> FitResult:
    """Train from scratch. Returns the final model and the per-epoch history.

    ``progress`` is called with each history row as it is produced.
    """
    if len(train_data) == 0:
        raise ValueError("training set is empty")
    if model_cfg.heads.num_classes != train_data.num_classes:
        model_cfg = copy.deepcopy(model_cfg)
        model_cfg.heads.num_classes = train_data.num_classes
    set_determinism(cfg)
    model = EMDFNet(model_cfg)
    model.train()
    opt = build_optimizer(model, cfg)
    n = len(train_data)
    spe = max(1, n // cfg.batch_size)
    eval_size = cfg.eval_size or max(cfg.input_sizes)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    history, paths = [], {}
    best, best_epoch = -1.0, -1
    step = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        augment = epoch < cfg.epochs - cfg.no_aug_epochs
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        sums = {"loss": 0.0, "l_box": 0.0, "l_cls": 0.0, "l_obj": 0.0}
        for b in range(spe):
            idxs = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            size_rng = np.random.default_rng([cfg.seed, epoch, b, 1])
            size = int(cfg.input_sizes[int(size_rng.integers(len(cfg.input_sizes)))])
            samples = [
                make_training_sample(train_data, int(i), size, augment,
                                     np.random.default_rng([cfg.seed, epoch, int(i)]), cfg)
                for i in idxs
            ]
            images = to_tensor([s[0] for s in samples])
            targets = [(s[1], s[2]) for s in samples]
            lr = lr_at(step, spe, cfg)
            for g in opt.param_groups:
                g["lr"] = lr
            try:
                losses = compute_loss(model, images, targets)
            except NumericError as e:
                raise TrainingError(f"epoch {epoch} batch {b}: {e}") from e
            if not torch.isfinite(losses.total):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} batch {b} (images {list(map(int, idxs))}): "
                    f"{losses.as_dict()}"
                )
            opt.zero_grad(set_to_none=True)
            losses.total.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            step += 1
            sums["loss"] += losses.total.item()
            sums["l_box"] += losses.l_box.item()
            sums["l_cls"] += losses.l_cls.item()
            sums["l_obj"] += losses.l_obj.item()
        row = _history_row(epoch + 1, sums, spe, lr)
        log.info("epoch %d done in %.1fs", epoch + 1, time.perf_counter() - t0)
        last_epoch = epoch == cfg.epochs - 1
        if val_data is not None and (last_epoch or (epoch + 1) % cfg.eval_interval == 0):
            res, _ = evaluate_model(model, val_data, eval_size)
            model.train()
            row.update(map50=res.map50, map75=res.map75, map5095=res.map5095)
            if res.map50 > best:
                best, best_epoch = res.map50, epoch + 1
                if out is not None:
                    paths["best"] = str(save_checkpoint(out / "best.pt", model, cfg, epoch + 1,
                                                        train_data.category_names, history + [row]))
        history.append(row)
        if progress is not None:
            progress(row)
        if out is not None:
            paths["last"] = str(save_checkpoint(out / "last.pt", model, cfg, epoch + 1,
                                                train_data.category_names, history))
    return FitResult(model, history, best, best_epoch, paths)


def save_checkpoint(path, model: EMDFNet, train_cfg: TrainConfig | None, epoch: int,
                    category_names, history=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": model.cfg.to_dict(),
        "train_config": train_cfg.to_dict() if train_cfg is not None else None,
        "epoch": int(epoch),
        "category_names": list(category_names),
        "state_dict": model.state_dict(),
        "rng_state": torch.get_rng_state(),
        "history": list(history or []),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> tuple[EMDFNet, dict]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {version!r}")
    model = EMDFNet(ModelConfig.from_dict(payload["model_config"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload


# -- config files ------------------------------------------------------------

CONFIG_KEYS = {"preset", "num_classes", "model", "toggles", "train", "data"}


def _merge(dst, overrides: dict, where: str):
    for k, v in overrides.items():
        if not hasattr(dst, k):
            raise ValueError(f"unknown key {where}.{k}")
        cur = getattr(dst, k)
        if isinstance(v, dict) and hasattr(cur, "__dataclass_fields__"):
            _merge(cur, v, f"{where}.{k}")
        else:
            setattr(dst, k, v)


def config_from_dict(doc: dict) -> tuple[ModelConfig, TrainConfig, dict]:
    """Build model and training configs from a parsed config document.

    Keys: ``preset`` (tiny|paper), ``num_classes``, ``model`` (nested
    overrides of backbone/asm/ehe/heads/loss fields), ``toggles`` (asm, ehe,
    siou, res2net), ``train`` (TrainConfig fields) and ``data`` (free-form,
    e.g. kind/root/val_root), which is returned untouched.
    """
    doc = doc or {}
    unknown = set(doc) - CONFIG_KEYS
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    preset = doc.get("preset", "tiny")
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    mcfg = PRESETS[preset](doc.get("num_classes", 10))
    _merge(mcfg, doc.get("model") or {}, "model")
    toggles = doc.get("toggles") or {}
    bad = set(toggles) - {"asm", "ehe", "siou", "res2net"}
    if bad:
        raise ValueError(f"unknown toggles: {sorted(bad)}")
    mcfg = mcfg.with_toggles(**toggles)
    tcfg = TrainConfig.from_dict(doc.get("train") or {})
    return mcfg, tcfg, dict(doc.get("data") or {})


def load_config(path=None) -> tuple[ModelConfig, TrainConfig, dict]:
    """Read a YAML config; falls back to $EMDFNET_CONFIG, then to defaults."""
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return config_from_dict({})
    with open(path) as f:
        return config_from_dict(yaml.safe_load(f))
