"""Res2Net-style feature extractor producing strides 8/16/32."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .layers import ConvNormAct


class InputShapeError(ValueError):
    pass


@dataclass
class BackboneConfig:
    stem_channels: int = 32
    stage_channels: list[int] = field(default_factory=lambda: [64, 128, 256])
    res2_scale: int = 4
    blocks_per_stage: list[int] = field(default_factory=lambda: [2, 2, 2])
    # False swaps Res2 blocks for plain bottlenecks (ablation baseline).
    res2net: bool = True

    def __post_init__(self):
        if len(self.stage_channels) != 3 or len(self.blocks_per_stage) != 3:
            raise ValueError("stage_channels and blocks_per_stage need 3 entries")
        if self.res2_scale < 2:
            raise ValueError("res2_scale must be >= 2")
        for c in self.stage_channels:
            if c % self.res2_scale:
                raise ValueError(f"stage channels {c} not divisible by res2_scale {self.res2_scale}")


@dataclass
class PyramidFeatures:
    s3: torch.Tensor
    s4: torch.Tensor
    s5: torch.Tensor

    def as_tuple(self):
        return self.s3, self.s4, self.s5


class Res2Block(nn.Module):
    """Hierarchical split block: each group after the first sees the
    previous group's output, so later groups cover larger neighbourhoods."""

    def __init__(self, channels: int, scale: int):
        super().__init__()
        self.scale = scale
        width = channels // scale
        self.reduce = ConvNormAct(channels, channels, 1)
        self.convs = nn.ModuleList(ConvNormAct(width, width, 3) for _ in range(scale - 1))
        self.expand = ConvNormAct(channels, channels, 1, act=False)
        self.act = nn.SiLU()

    def split_outputs(self, x):
        """Per-group outputs (before concat) of the hierarchical stage."""
        groups = torch.chunk(self.reduce(x), self.scale, dim=1)
        outs = [groups[0]]
        prev = None
        for g, conv in zip(groups[1:], self.convs):
            prev = conv(g if prev is None else g + prev)
            outs.append(prev)
        return outs

    def forward(self, x):
        y = torch.cat(self.split_outputs(x), dim=1)
        return self.act(x + self.expand(y))


class Bottleneck(nn.Module):
    """Plain residual bottleneck used when res2net is toggled off."""

    def __init__(self, channels: int):
        super().__init__()
        hidden = channels // 2
        self.cv1 = ConvNormAct(channels, hidden, 1)
        self.cv2 = ConvNormAct(hidden, hidden, 3)
        self.cv3 = ConvNormAct(hidden, channels, 1, act=False)
        self.act = nn.SiLU()

    def forward(self, x):
        return self.act(x + self.cv3(self.cv2(self.cv1(x))))


class Backbone(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        c0 = cfg.stem_channels
        self.stem = nn.Sequential(
            ConvNormAct(3, c0 // 2, 3, 2),
            ConvNormAct(c0 // 2, c0, 3, 2),
        )
        stages = []
        c_prev = c0
        for c, n in zip(cfg.stage_channels, cfg.blocks_per_stage):
            blocks = [ConvNormAct(c_prev, c, 3, 2)]
            for _ in range(n):
                blocks.append(Res2Block(c, cfg.res2_scale) if cfg.res2net else Bottleneck(c))
            stages.append(nn.Sequential(*blocks))
            c_prev = c
        self.stages = nn.ModuleList(stages)

    @property
    def out_channels(self) -> list[int]:
        return list(self.cfg.stage_channels)

    def forward(self, images: torch.Tensor) -> PyramidFeatures:
        if images.ndim != 4 or images.shape[1] != 3:
            raise InputShapeError(f"expected (B, 3, H, W) images, got {tuple(images.shape)}")
        h, w = images.shape[-2:]
        if h % 32 or w % 32:
            raise InputShapeError(f"input size {h}x{w} not divisible by 32")
        if not torch.isfinite(images).all():
            raise InputShapeError("non-finite values in input images")
        x = self.stem(images)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return PyramidFeatures(*feats)


def backbone_forward(images: torch.Tensor, cfg: BackboneConfig, model: Backbone | None = None):
    model = model if model is not None else Backbone(cfg)
    return model(images)
