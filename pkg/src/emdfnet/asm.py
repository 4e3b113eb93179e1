"""Augmented Shortcut Module.

Three parallel views of the deepest feature map, each reweighted by its own
channel selector, concatenated and fused back to the input width:

    out = fuse(cat(CS_a(AugS(z)), CS_b(z), CS_c(FS(z))))

AugS is a hybrid-dilated conv stack with an identity path, FS is spatial
feature selection (EMA) and CS is channel feature selection (MLCA).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import BN_EPS


@dataclass
class AsmConfig:
    channels: int = 256
    dilation_rates: list[int] = field(default_factory=lambda: [1, 2, 5])
    kernel_size: int = 3
    spatial_attention: str = "ema"  # ema | simple | identity
    channel_attention: str = "mlca"  # mlca | identity
    ema_groups: int = 8
    mlca_local_size: int = 5

    def __post_init__(self):
        if not self.dilation_rates or any(r < 1 for r in self.dilation_rates):
            raise ValueError(f"invalid dilation rates {self.dilation_rates}")
        if self.spatial_attention not in ("ema", "simple", "identity"):
            raise ValueError(f"unknown spatial attention {self.spatial_attention!r}")
        if self.channel_attention not in ("mlca", "identity"):
            raise ValueError(f"unknown channel attention {self.channel_attention!r}")


class AugS(nn.Module):
    """Same-size dilated conv stack plus identity path."""

    def __init__(self, channels, dilation_rates=(1, 2, 5), kernel_size=3):
        super().__init__()
        layers = []
        for i, d in enumerate(dilation_rates):
            pad = d * (kernel_size - 1) // 2
            layers.append(nn.Conv2d(channels, channels, kernel_size, 1, pad, dilation=d, bias=False))
            layers.append(nn.BatchNorm2d(channels, eps=BN_EPS))
            if i < len(dilation_rates) - 1:
                layers.append(nn.SiLU())
        self.stack = nn.Sequential(*layers)

    def zero_init(self):
        for m in self.stack:
            if isinstance(m, nn.Conv2d):
                nn.init.zeros_(m.weight)

    def forward(self, z):
        return z + self.stack(z)


def _group_count(channels, requested):
    g = max(1, min(requested, channels))
    while channels % g:
        g -= 1
    return g


class EMA(nn.Module):
    """Efficient multi-scale attention: grouped cross-spatial attention with
    a 1D-pooled (H and W) path and a 3x3 path, fused by softmax weighting."""

    def __init__(self, channels, groups=8):
        super().__init__()
        self.groups = _group_count(channels, groups)
        cg = channels // self.groups
        self.gn = nn.GroupNorm(cg, cg)
        self.conv1x1 = nn.Conv2d(cg, cg, 1)
        self.conv3x3 = nn.Conv2d(cg, cg, 3, padding=1)

    def forward(self, x):
        b, c, h, w = x.shape
        g = self.groups
        gx = x.reshape(b * g, c // g, h, w)
        x_h = gx.mean(dim=3, keepdim=True)  # (bg, cg, h, 1)
        x_w = gx.mean(dim=2, keepdim=True).permute(0, 1, 3, 2)  # (bg, cg, w, 1)
        hw = self.conv1x1(torch.cat([x_h, x_w], dim=2))
        x_h, x_w = torch.split(hw, [h, w], dim=2)
        x1 = self.gn(gx * x_h.sigmoid() * x_w.permute(0, 1, 3, 2).sigmoid())
        x2 = self.conv3x3(gx)
        a1 = torch.softmax(x1.mean(dim=(2, 3)), dim=-1).unsqueeze(1)  # (bg, 1, cg)
        a2 = torch.softmax(x2.mean(dim=(2, 3)), dim=-1).unsqueeze(1)
        weights = a1 @ x2.reshape(b * g, c // g, -1) + a2 @ x1.reshape(b * g, c // g, -1)
        weights = weights.reshape(b * g, 1, h, w)
        return (gx * weights.sigmoid()).reshape(b, c, h, w)


class SimpleSpatialGate(nn.Module):
    """Per-group sigmoid spatial gate (ablation fallback for EMA)."""

    def __init__(self, channels, groups=8):
        super().__init__()
        self.groups = _group_count(channels, groups)
        self.conv = nn.Conv2d(1, 1, 3, padding=1)

    def forward(self, x):
        b, c, h, w = x.shape
        gx = x.reshape(b * self.groups, c // self.groups, h, w)
        gate = self.conv(gx.mean(dim=1, keepdim=True)).sigmoid()
        return (gx * gate).reshape(b, c, h, w)


class MLCA(nn.Module):
    """Mixed local channel attention.

    Local (k x k pooled) and global channel descriptors pass through 1D convs
    over the channel axis; their sigmoid gates are mixed and spread back to
    the input resolution.
    """

    def __init__(self, channels, local_size=5, gamma=2, b=1, local_weight=0.5):
        super().__init__()
        t = int(abs(math.log2(channels) + b) / gamma)
        k = t if t % 2 else t + 1
        self.local_size = local_size
        self.local_weight = local_weight
        self.conv = nn.Conv1d(1, 1, k, padding=(k - 1) // 2, bias=False)
        self.conv_local = nn.Conv1d(1, 1, k, padding=(k - 1) // 2, bias=False)

    def weights(self, x):
        b, c, h, w = x.shape
        s = self.local_size
        local = F.adaptive_avg_pool2d(x, s)  # (b, c, s, s)
        glob = local.mean(dim=(2, 3))  # (b, c)
        # positions laid out consecutively, channels contiguous within each
        seq_local = local.reshape(b, c, s * s).transpose(1, 2).reshape(b, 1, -1)
        y_local = self.conv_local(seq_local).reshape(b, s * s, c).transpose(1, 2).reshape(b, c, s, s)
        y_global = self.conv(glob.unsqueeze(1)).reshape(b, c, 1, 1)
        att = y_global.sigmoid() * (1 - self.local_weight) + y_local.sigmoid() * self.local_weight
        return F.adaptive_avg_pool2d(att, (h, w))

    def forward(self, x):
        return x * self.weights(x)


class ASM(nn.Module):
    def __init__(self, cfg: AsmConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.channels
        self.aug_s = AugS(c, cfg.dilation_rates, cfg.kernel_size)
        if cfg.spatial_attention == "ema":
            self.fs = EMA(c, cfg.ema_groups)
        elif cfg.spatial_attention == "simple":
            self.fs = SimpleSpatialGate(c, cfg.ema_groups)
        else:
            self.fs = nn.Identity()

        def channel_sel():
            if cfg.channel_attention == "mlca":
                return MLCA(c, cfg.mlca_local_size)
            return nn.Identity()

        self.cs = nn.ModuleList(channel_sel() for _ in range(3))
        self.fuse = nn.Conv2d(3 * c, c, 1)

    def init_fusion_average(self):
        c = self.cfg.channels
        eye = torch.eye(c) / 3
        with torch.no_grad():
            self.fuse.weight.copy_(torch.cat([eye, eye, eye], dim=1)[:, :, None, None])
            self.fuse.bias.zero_()

    def branch_outputs(self, z):
        if z.ndim != 4 or z.shape[1] != self.cfg.channels:
            raise ValueError(
                f"ASM expects (B, {self.cfg.channels}, H, W), got {tuple(z.shape)}"
            )
        branches = (self.aug_s(z), z, self.fs(z))
        return [cs(x) for cs, x in zip(self.cs, branches)]

    def forward(self, z):
        return self.fuse(torch.cat(self.branch_outputs(z), dim=1))


def aug_s_branch(z: torch.Tensor, cfg: AsmConfig, module: AugS | None = None) -> torch.Tensor:
    if z.shape[1] != cfg.channels:
        raise ValueError(f"channel mismatch: input {z.shape[1]} vs config {cfg.channels}")
    module = module if module is not None else AugS(cfg.channels, cfg.dilation_rates, cfg.kernel_size)
    return module(z)


def asm_forward(z: torch.Tensor, cfg: AsmConfig, module: ASM | None = None) -> torch.Tensor:
    module = module if module is not None else ASM(cfg)
    return module(z)


def receptive_field_support(dilation_rates, kernel_size=3, size=None) -> torch.Tensor:
    """Boolean mask of input pixels that reach the centre output pixel through
    a stack of all-ones dilated convolutions (structural receptive field)."""
    radius = sum(r * (kernel_size - 1) // 2 for r in dilation_rates)
    size = size or 2 * radius + 9
    x = torch.zeros(1, 1, size, size, dtype=torch.float64, requires_grad=True)
    y = x
    for r in dilation_rates:
        w = torch.ones(1, 1, kernel_size, kernel_size, dtype=torch.float64)
        y = F.conv2d(y, w, padding=r * (kernel_size - 1) // 2, dilation=r)
    y[0, 0, size // 2, size // 2].backward()
    return x.grad[0, 0] != 0
