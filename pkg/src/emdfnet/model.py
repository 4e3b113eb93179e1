"""Full detector: backbone -> ASM on S5 -> neck -> three heads."""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields

import torch
import torch.nn as nn

from .asm import ASM, AsmConfig
from .backbone import Backbone, BackboneConfig
from .ehe import EncoderConfig, Neck
from .heads import HeadConfig, Heads, postprocess
from .layers import count_parameters
from .losses import LossConfig


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    asm: AsmConfig = field(default_factory=AsmConfig)
    ehe: EncoderConfig = field(default_factory=EncoderConfig)
    heads: HeadConfig = field(default_factory=HeadConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    # ablation toggles
    use_asm: bool = True
    use_ehe: bool = True

    @property
    def toggles(self) -> dict[str, bool]:
        return {
            "asm": self.use_asm, "ehe": self.use_ehe,
            "siou": self.loss.box_variant == "siou", "res2net": self.backbone.res2net,
        }

    def with_toggles(self, asm=None, ehe=None, siou=None, res2net=None) -> ModelConfig:
        cfg = copy.deepcopy(self)
        if asm is not None:
            cfg.use_asm = asm
        if ehe is not None:
            cfg.use_ehe = ehe
        if siou is not None:
            cfg.loss.box_variant = "siou" if siou else "iou"
        if res2net is not None:
            cfg.backbone.res2net = res2net
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        sub = {"backbone": BackboneConfig, "asm": AsmConfig, "ehe": EncoderConfig,
               "heads": HeadConfig, "loss": LossConfig}
        kwargs = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            kwargs[f.name] = sub[f.name](**d[f.name]) if f.name in sub else d[f.name]
        return cls(**kwargs)


def tiny_config(num_classes=10) -> ModelConfig:
    cfg = ModelConfig()
    cfg.heads.num_classes = num_classes
    cfg.asm.channels = cfg.backbone.stage_channels[-1]
    return cfg


def paper_config(num_classes=45) -> ModelConfig:
    """Full-width preset for 640 px inputs, sized to a ~29.7M parameter target."""
    backbone = BackboneConfig(
        stem_channels=64, stage_channels=[256, 512, 512], res2_scale=4, blocks_per_stage=[3, 4, 3]
    )
    return ModelConfig(
        backbone=backbone,
        asm=AsmConfig(channels=512),
        ehe=EncoderConfig(d_model=256, num_heads=8, ffn_dim=1024, num_layers=1),
        heads=HeadConfig(num_classes=num_classes, width=256),
    )


PRESETS = {"tiny": tiny_config, "paper": paper_config}


class EMDFNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg.backbone)
        c3, c4, c5 = cfg.backbone.stage_channels
        if cfg.use_asm:
            if cfg.asm.channels != c5:
                cfg.asm = copy.deepcopy(cfg.asm)
                cfg.asm.channels = c5
            self.asm = ASM(cfg.asm)
        else:
            self.asm = None
        self.neck = Neck((c3, c4, c5), cfg.ehe, enable_ehe=cfg.use_ehe)
        self.heads = Heads(cfg.ehe.d_model, cfg.heads)

    def forward(self, images):
        s3, s4, s5 = self.backbone(images).as_tuple()
        if self.asm is not None:
            s5 = self.asm(s5)
        return self.heads(self.neck(s3, s4, s5))

    @torch.no_grad()
    def predict(self, images, score_thresh=None):
        was_training = self.training
        self.eval()
        try:
            outputs = self(images)
        finally:
            self.train(was_training)
        return postprocess(outputs, images.shape[-2:], self.cfg.heads, score_thresh)

    def num_parameters(self) -> int:
        return count_parameters(self)


def parameter_count(cfg: ModelConfig) -> int:
    torch.manual_seed(0)
    return EMDFNet(cfg).num_parameters()
