"""Efficient hybrid encoder: intra-scale self-attention on the deepest map
(AIFI) followed by additive cross-scale fusion (CCFM)."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import ConvNormAct


@dataclass
class EncoderConfig:
    d_model: int = 64
    num_heads: int = 4
    ffn_dim: int = 256
    num_layers: int = 1
    use_positional_embedding: bool = True
    temperature: float = 10000.0

    def __post_init__(self):
        if self.d_model % self.num_heads:
            raise ValueError(
                f"d_model {self.d_model} not divisible by num_heads {self.num_heads}"
            )


@dataclass
class TokenSequence:
    tokens: torch.Tensor  # (B, h*w, d)
    grid_shape: tuple[int, int]

    @classmethod
    def from_map(cls, x: torch.Tensor) -> TokenSequence:
        b, c, h, w = x.shape
        return cls(x.flatten(2).transpose(1, 2), (h, w))

    def to_map(self) -> torch.Tensor:
        h, w = self.grid_shape
        b, n, d = self.tokens.shape
        return self.tokens.transpose(1, 2).reshape(b, d, h, w)


def sincos_position_embedding(h, w, dim, temperature=10000.0, dtype=torch.float32):
    if dim % 4:
        raise ValueError("embedding dim must be divisible by 4 for 2D sin-cos embedding")
    gy, gx = torch.meshgrid(
        torch.arange(h, dtype=dtype), torch.arange(w, dtype=dtype), indexing="ij"
    )
    pos_dim = dim // 4
    omega = 1.0 / temperature ** (torch.arange(pos_dim, dtype=dtype) / pos_dim)
    out_x = gx.flatten()[:, None] * omega[None]
    out_y = gy.flatten()[:, None] * omega[None]
    emb = torch.cat([out_x.sin(), out_x.cos(), out_y.sin(), out_y.cos()], dim=1)
    return emb[None]  # (1, h*w, dim)


class AIFILayer(nn.Module):
    """Post-norm transformer encoder layer; positions are added to the
    queries and keys only."""

    def __init__(self, d_model, num_heads, ffn_dim):
        super().__init__()
        self.attn = nn.MultiheadAttention(d_model, num_heads, dropout=0.0, batch_first=True)
        self.linear1 = nn.Linear(d_model, ffn_dim)
        self.linear2 = nn.Linear(ffn_dim, d_model)
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.act = nn.GELU()

    def forward(self, src, pos=None, return_weights=False):
        q = k = src if pos is None else src + pos
        attn_out, weights = self.attn(q, k, src, need_weights=return_weights,
                                      average_attn_weights=False)
        src = self.norm1(src + attn_out)
        src = self.norm2(src + self.linear2(self.act(self.linear1(src))))
        if return_weights:
            return src, weights
        return src


class AIFI(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.layers = nn.ModuleList(
            AIFILayer(cfg.d_model, cfg.num_heads, cfg.ffn_dim) for _ in range(cfg.num_layers)
        )

    def _pos(self, seq: TokenSequence, x):
        if not self.cfg.use_positional_embedding:
            return None
        h, w = seq.grid_shape
        return sincos_position_embedding(
            h, w, self.cfg.d_model, self.cfg.temperature, dtype=x.dtype
        ).to(x.device)

    def forward(self, x):
        if x.shape[1] != self.cfg.d_model:
            raise ValueError(f"AIFI expects {self.cfg.d_model} channels, got {x.shape[1]}")
        seq = TokenSequence.from_map(x)
        pos = self._pos(seq, x)
        tokens = seq.tokens
        for layer in self.layers:
            tokens = layer(tokens, pos)
        return TokenSequence(tokens, seq.grid_shape).to_map()

    def attention_weights(self, x):
        """Per-layer attention weights (B, heads, N, N)."""
        seq = TokenSequence.from_map(x)
        pos = self._pos(seq, x)
        tokens, out = seq.tokens, []
        for layer in self.layers:
            tokens, w = layer(tokens, pos, return_weights=True)
            out.append(w)
        return out


def _check_strides(s3, s4, s5):
    h3, w3 = s3.shape[-2:]
    h4, w4 = s4.shape[-2:]
    h5, w5 = s5.shape[-2:]
    if (h3, w3) != (2 * h4, 2 * w4) or (h4, w4) != (2 * h5, 2 * w5):
        raise ValueError(
            f"pyramid stride mismatch: {(h3, w3)}, {(h4, w4)}, {(h5, w5)}"
        )


class CCFM(nn.Module):
    """Top-down then bottom-up fusion; each fusion adds the aligned maps and
    applies a 3x3 conv block."""

    def __init__(self, d):
        super().__init__()
        self.td4 = ConvNormAct(d, d, 3)
        self.td3 = ConvNormAct(d, d, 3)
        self.down3 = ConvNormAct(d, d, 3, 2)
        self.down4 = ConvNormAct(d, d, 3, 2)
        self.bu4 = ConvNormAct(d, d, 3)
        self.bu5 = ConvNormAct(d, d, 3)

    def forward(self, s3, s4, f5):
        _check_strides(s3, s4, f5)
        up = lambda t: F.interpolate(t, scale_factor=2.0, mode="nearest")
        t4 = self.td4(s4 + up(f5))
        p3 = self.td3(s3 + up(t4))
        p4 = self.bu4(t4 + self.down3(p3))
        p5 = self.bu5(f5 + self.down4(p4))
        return p3, p4, p5


class ConcatPAN(nn.Module):
    """Baseline neck (encoder toggled off): same topology as CCFM but fuses by
    channel concatenation, as in the YOLOX PAFPN lineage."""

    def __init__(self, d):
        super().__init__()
        self.td4 = ConvNormAct(2 * d, d, 3)
        self.td3 = ConvNormAct(2 * d, d, 3)
        self.down3 = ConvNormAct(d, d, 3, 2)
        self.down4 = ConvNormAct(d, d, 3, 2)
        self.bu4 = ConvNormAct(2 * d, d, 3)
        self.bu5 = ConvNormAct(2 * d, d, 3)

    def forward(self, s3, s4, s5):
        _check_strides(s3, s4, s5)
        up = lambda t: F.interpolate(t, scale_factor=2.0, mode="nearest")
        t4 = self.td4(torch.cat([s4, up(s5)], 1))
        p3 = self.td3(torch.cat([s3, up(t4)], 1))
        p4 = self.bu4(torch.cat([t4, self.down3(p3)], 1))
        p5 = self.bu5(torch.cat([s5, self.down4(p4)], 1))
        return p3, p4, p5


class Neck(nn.Module):
    """Lateral 1x1 projections to a shared width, then AIFI + CCFM (or the
    concat baseline when the encoder is disabled)."""

    def __init__(self, in_channels, cfg: EncoderConfig, enable_ehe=True):
        super().__init__()
        d = cfg.d_model
        self.enable_ehe = enable_ehe
        self.lateral = nn.ModuleList(ConvNormAct(c, d, 1, act=False) for c in in_channels)
        if enable_ehe:
            self.aifi = AIFI(cfg)
            self.fusion = CCFM(d)
        else:
            self.aifi = None
            self.fusion = ConcatPAN(d)

    def forward(self, s3, s4, s5):
        s3, s4, s5 = (lat(x) for lat, x in zip(self.lateral, (s3, s4, s5)))
        if self.aifi is not None:
            s5 = self.aifi(s5)
        return self.fusion(s3, s4, s5)


def aifi_forward(s5: torch.Tensor, cfg: EncoderConfig, module: AIFI | None = None):
    module = module if module is not None else AIFI(cfg)
    return module(s5)


def ccfm_forward(s3, s4, f5, module: CCFM | None = None):
    module = module if module is not None else CCFM(s3.shape[1])
    return module(s3, s4, f5)
