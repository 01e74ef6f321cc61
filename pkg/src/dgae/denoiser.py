"""Conditional noise predictor: a small U-Net whose every normalization is an
adaptive group norm site driven by both the sinusoidal timestep embedding and
the semantic code.

Site composition, applied exactly in this order (time affine inside, semantic
affine outside):

    out = z_s * (t_s * GroupNorm(h) + t_b) + z_b

where (z_s, z_b) = MLP(z_sem) and (t_s, t_b) = MLP(psi(t)), each channel-length.
The scale outputs are parameterized as 1 + delta with zero-initialized final
layers, so a freshly initialized site is plain GroupNorm.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from . import nn


def time_embedding(t, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Sinusoidal embedding, geometrically spaced frequencies 1 .. 1/10000.

    Accepts a scalar timestep or a 1-D batch; returns [dim] or [N, dim]
    laid out as [sin(t f_0) .. sin(t f_{d/2-1}), cos(t f_0) .. cos(t f_{d/2-1})].
    """
    if dim % 2 != 0:
        raise ValueError("embedding dim must be even")
    half = dim // 2
    if half == 1:
        freqs = torch.ones(1, dtype=torch.float64)
    else:
        freqs = 10000.0 ** (-torch.arange(half, dtype=torch.float64) / (half - 1))
    tt = torch.as_tensor(t, dtype=torch.float64)
    arg = tt.reshape(*tt.shape, 1) * freqs
    return torch.cat([torch.sin(arg), torch.cos(arg)], dim=-1).to(dtype)


@dataclass
class DenoiserConfig:
    resolution: int = 32
    channels: list[int] = field(default_factory=lambda: [16, 32, 64])
    d_sem: int = 64
    time_dim: int = 64
    cond_hidden: int = 64
    groups: int = 8
    heads: int = 4


class AdaGNSite(torch.nn.Module):
    """One adaptive group-norm site; owns its two conditioning MLPs."""

    def __init__(self, channels: int, cfg: DenoiserConfig, gen, dtype=torch.float32):
        super().__init__()
        self.groups = cfg.groups
        self.z_hidden = nn.Linear(cfg.d_sem, cfg.cond_hidden, gen=gen, dtype=dtype)
        self.z_out = nn.Linear(cfg.cond_hidden, 2 * channels, gen=gen, dtype=dtype, zero_init=True)
        self.t_hidden = nn.Linear(cfg.time_dim, cfg.cond_hidden, gen=gen, dtype=dtype)
        self.t_out = nn.Linear(cfg.cond_hidden, 2 * channels, gen=gen, dtype=dtype, zero_init=True)

    def forward(self, h: torch.Tensor, temb: torch.Tensor, z_sem: torch.Tensor) -> torch.Tensor:
        if z_sem.shape[0] != h.shape[0]:
            raise ValueError("z_sem batch size must match feature map batch size")
        zd, zb = self.z_out(nn.silu(self.z_hidden(z_sem))).chunk(2, dim=-1)
        td, tb = self.t_out(nn.silu(self.t_hidden(temb))).chunk(2, dim=-1)
        gn = nn.group_norm(h, self.groups)
        ts = (1.0 + td).unsqueeze(-1).unsqueeze(-1)
        zs = (1.0 + zd).unsqueeze(-1).unsqueeze(-1)
        return zs * (ts * gn + tb.unsqueeze(-1).unsqueeze(-1)) + zb.unsqueeze(-1).unsqueeze(-1)


def ada_gn(h: torch.Tensor, t, z_sem: torch.Tensor, site: AdaGNSite) -> torch.Tensor:
    """Apply one site given a raw timestep (embedding computed here)."""
    temb = time_embedding(t, site.t_hidden.weight.shape[1], dtype=h.dtype)
    if temb.ndim == 1:
        temb = temb.expand(h.shape[0], -1)
    return site(h, temb, z_sem)


class AdaResBlock(torch.nn.Module):
    def __init__(self, c_in: int, c_out: int, cfg: DenoiserConfig, gen, dtype=torch.float32):
        super().__init__()
        self.norm1 = AdaGNSite(c_in, cfg, gen, dtype)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1, gen=gen, dtype=dtype)
        self.norm2 = AdaGNSite(c_out, cfg, gen, dtype)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1, gen=gen, dtype=dtype)
        self.skip = nn.Conv2d(c_in, c_out, 1, gen=gen, dtype=dtype) if c_in != c_out else None

    def forward(self, x, temb, z):
        h = self.conv1(nn.silu(self.norm1(x, temb, z)))
        h = self.conv2(nn.silu(self.norm2(h, temb, z)))
        return h + (self.skip(x) if self.skip is not None else x)


class Denoiser(torch.nn.Module):
    """eps_theta(x_t, t, z_sem): U-Net with AdaGN everywhere, attention at the bottleneck."""

    def __init__(self, cfg: DenoiserConfig, gen: torch.Generator, dtype=torch.float32):
        super().__init__()
        self.cfg = cfg
        c1, c2, c3 = cfg.channels
        self.stem = nn.Conv2d(3, c1, 3, padding=1, gen=gen, dtype=dtype)
        self.down1 = AdaResBlock(c1, c1, cfg, gen, dtype)
        self.ds1 = nn.Conv2d(c1, c2, 3, stride=2, padding=1, gen=gen, dtype=dtype)
        self.down2 = AdaResBlock(c2, c2, cfg, gen, dtype)
        self.ds2 = nn.Conv2d(c2, c3, 3, stride=2, padding=1, gen=gen, dtype=dtype)
        self.mid1 = AdaResBlock(c3, c3, cfg, gen, dtype)
        self.attn_norm = AdaGNSite(c3, cfg, gen, dtype)
        self.attn = nn.AttentionProj(c3, gen=gen, dtype=dtype)
        self.mid2 = AdaResBlock(c3, c3, cfg, gen, dtype)
        self.us2 = nn.Conv2d(c3, c2, 3, padding=1, gen=gen, dtype=dtype)
        self.up2 = AdaResBlock(2 * c2, c2, cfg, gen, dtype)
        self.us1 = nn.Conv2d(c2, c1, 3, padding=1, gen=gen, dtype=dtype)
        self.up1 = AdaResBlock(2 * c1, c1, cfg, gen, dtype)
        self.out_norm = AdaGNSite(c1, cfg, gen, dtype)
        self.out_conv = nn.Conv2d(c1, 3, 3, padding=1, gen=gen, dtype=dtype)
        with torch.no_grad():
            self.out_conv.weight.zero_()

    def adagn_sites(self) -> list[AdaGNSite]:
        return [m for m in self.modules() if isinstance(m, AdaGNSite)]

    def forward(self, x_t: torch.Tensor, t, z_sem: torch.Tensor) -> torch.Tensor:
        if x_t.ndim != 4 or x_t.shape[1] != 3:
            raise ValueError(f"expected [N, 3, H, W] input, got {tuple(x_t.shape)}")
        if z_sem.shape[0] != x_t.shape[0]:
            raise ValueError("z_sem batch size must match x_t batch size")
        temb = time_embedding(t, self.cfg.time_dim, dtype=x_t.dtype)
        if temb.ndim == 1:
            temb = temb.expand(x_t.shape[0], -1)
        h1 = self.down1(self.stem(x_t), temb, z_sem)
        h2 = self.down2(self.ds1(h1), temb, z_sem)
        m = self.mid1(self.ds2(h2), temb, z_sem)
        m = m + nn.attention_core(self.attn_norm(m, temb, z_sem), self.cfg.heads, self.attn.as_dict())
        m = self.mid2(m, temb, z_sem)
        u = self.us2(torch.nn.functional.interpolate(m, scale_factor=2.0, mode="nearest"))
        u = self.up2(torch.cat([u, h2], dim=1), temb, z_sem)
        u = self.us1(torch.nn.functional.interpolate(u, scale_factor=2.0, mode="nearest"))
        u = self.up1(torch.cat([u, h1], dim=1), temb, z_sem)
        return self.out_conv(nn.silu(self.out_norm(u, temb, z_sem)))
