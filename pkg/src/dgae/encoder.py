"""Semantic encoder: conv stages whose final block is multi-head self-attention.

Stage pattern: residual conv blocks (GroupNorm + SiLU, pre-activation), the
block nearest each stage's end replaced by an attention block once the spatial
side is small enough, stride-2 downsampling between stages, global average
pooling, and a final linear head to the semantic code.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from . import nn


@dataclass
class EncoderConfig:
    resolution: int = 32
    stage_channels: list[int] = field(default_factory=lambda: [16, 32, 64])
    blocks_per_stage: int = 2
    attention_at_stage_end: bool = True
    attention_max_side: int = 16   # attention only where the spatial side <= this
    d_sem: int = 64
    groups: int = 8
    heads: int = 4


class ResBlock(torch.nn.Module):
    def __init__(self, c_in: int, c_out: int, groups: int, gen, dtype=torch.float32):
        super().__init__()
        self.norm1 = nn.GroupNormAffine(groups, c_in, dtype)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1, gen=gen, dtype=dtype)
        self.norm2 = nn.GroupNormAffine(groups, c_out, dtype)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1, gen=gen, dtype=dtype)
        self.skip = nn.Conv2d(c_in, c_out, 1, gen=gen, dtype=dtype) if c_in != c_out else None

    def forward(self, x):
        h = self.conv1(nn.silu(self.norm1(x)))
        h = self.conv2(nn.silu(self.norm2(h)))
        return h + (self.skip(x) if self.skip is not None else x)


class AttentionBlock(torch.nn.Module):
    def __init__(self, channels: int, heads: int, gen, dtype=torch.float32):
        super().__init__()
        self.heads = heads
        self.proj = nn.AttentionProj(channels, gen=gen, dtype=dtype)

    def forward(self, x):
        return nn.self_attention(x, self.heads, self.proj.as_dict())


class SemanticEncoder(torch.nn.Module):
    """Image [N, 3, H, W] -> semantic code [N, d_sem]. Pure and deterministic."""

    def __init__(self, cfg: EncoderConfig, gen: torch.Generator, dtype=torch.float32):
        super().__init__()
        if not cfg.stage_channels:
            raise ValueError("need at least one stage")
        self.cfg = cfg
        self.stem = nn.Conv2d(3, cfg.stage_channels[0], 3, padding=1, gen=gen, dtype=dtype)
        stages = []
        downs = []
        side = cfg.resolution
        c_prev = cfg.stage_channels[0]
        for si, c in enumerate(cfg.stage_channels):
            blocks: list[torch.nn.Module] = []
            use_attn = cfg.attention_at_stage_end and side <= cfg.attention_max_side
            n_conv = cfg.blocks_per_stage - (1 if use_attn else 0)
            for bi in range(n_conv):
                blocks.append(ResBlock(c_prev if bi == 0 else c, c, cfg.groups, gen, dtype))
            if use_attn:
                if n_conv == 0 and c_prev != c:
                    raise ValueError("attention block cannot change channel count")
                blocks.append(AttentionBlock(c, cfg.heads, gen, dtype))
            stages.append(torch.nn.ModuleList(blocks))
            if si < len(cfg.stage_channels) - 1:
                downs.append(
                    nn.Conv2d(c, cfg.stage_channels[si + 1], 3, stride=2, padding=1, gen=gen, dtype=dtype)
                )
                side //= 2
            c_prev = cfg.stage_channels[si + 1] if si < len(cfg.stage_channels) - 1 else c
        self.stages = torch.nn.ModuleList(stages)
        self.downs = torch.nn.ModuleList(downs)
        self.head_norm = nn.GroupNormAffine(cfg.groups, cfg.stage_channels[-1], dtype)
        self.head = nn.Linear(cfg.stage_channels[-1], cfg.d_sem, gen=gen, dtype=dtype)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected [N, 3, H, W] input, got {tuple(x.shape)}")
        if x.shape[2] != self.cfg.resolution or x.shape[3] != self.cfg.resolution:
            raise ValueError(
                f"expected {self.cfg.resolution}x{self.cfg.resolution} input, got {x.shape[2]}x{x.shape[3]}"
            )
        h = self.stem(x)
        for si, stage in enumerate(self.stages):
            for block in stage:
                h = block(h)
            if si < len(self.downs):
                h = self.downs[si](h)
        h = nn.silu(self.head_norm(h))
        return self.head(h.mean(dim=(2, 3)))
