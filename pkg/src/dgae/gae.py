"""Group-supervised autoencoder on semantic codes.

Operates purely on latent vectors: encode z_sem -> z_dis, decode z_dis ->
z_sem_hat, plus the partition algebra (slice / swap / reassemble) and the
three disentanglement losses. All reconstruction targets use mean L1.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import torch

from . import nn


@dataclass(frozen=True)
class AttributeLayout:
    """Ordered partition of the disentangled code into contiguous attribute slices."""

    attributes: tuple[tuple[str, int, int], ...]  # (name, cardinality, slice width)

    def __post_init__(self) -> None:
        names = [a[0] for a in self.attributes]
        if len(names) != len(set(names)):
            raise ValueError("attribute names must be unique")
        if any(c < 2 or w < 1 for _, c, w in self.attributes):
            raise ValueError("cardinality must be >= 2 and slice width >= 1")

    @property
    def d_dis(self) -> int:
        return sum(w for _, _, w in self.attributes)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(a[0] for a in self.attributes)

    def cardinality(self, attr: str) -> int:
        for name, card, _ in self.attributes:
            if name == attr:
                return card
        raise KeyError(f"unknown attribute {attr!r}")

    def span(self, attr: str) -> tuple[int, int]:
        start = 0
        for name, _, width in self.attributes:
            if name == attr:
                return start, start + width
            start += width
        raise KeyError(f"unknown attribute {attr!r}")


def attr_slice(z: torch.Tensor, layout: AttributeLayout, attr: str) -> torch.Tensor:
    """The contiguous slice of z owned by one attribute (view, last axis)."""
    lo, hi = layout.span(attr)
    if z.shape[-1] != layout.d_dis:
        raise ValueError(f"code length {z.shape[-1]} != layout width {layout.d_dis}")
    return z[..., lo:hi]


def swap(a: torch.Tensor, b: torch.Tensor, layout: AttributeLayout, attr: str) -> torch.Tensor:
    """Copy of a with attr's slice replaced by b's. Inputs are not modified."""
    if a.shape != b.shape:
        raise ValueError("codes must share a shape")
    lo, hi = layout.span(attr)
    out = a.clone()
    out[..., lo:hi] = b[..., lo:hi]
    return out


def reassemble(parts: Mapping[str, torch.Tensor], layout: AttributeLayout) -> torch.Tensor:
    """Build a code taking each attribute's slice from its donor."""
    missing = set(layout.names) - set(parts)
    if missing:
        raise KeyError(f"missing donors for attributes: {sorted(missing)}")
    chunks = [attr_slice(parts[name], layout, name) for name in layout.names]
    return torch.cat(chunks, dim=-1)


@dataclass
class GaeConfig:
    layout: AttributeLayout
    d_sem: int = 64
    hidden: int = 64
    groups: int = 8
    lambda_ss: float = 1.0
    lambda_ur: float = 0.5

    def __post_init__(self) -> None:
        if self.lambda_ss <= 0 or self.lambda_ur <= 0:
            raise ValueError("lambda_ss and lambda_ur must be positive")


def _norm_groups(groups: int, channels: int) -> int:
    """Largest divisor of `channels` that is <= groups and keeps >= 2 channels per group."""
    g = max(1, min(groups, channels // 2))
    while channels % g:
        g -= 1
    return g


class _Block(torch.nn.Module):
    """Residual MLP / bottleneck block; skip is a projection when dims differ."""

    def __init__(self, d_in: int, d_out: int, norm: str, groups: int, gen,
                 bottleneck: bool = False, dtype=torch.float32):
        super().__init__()
        d_mid = max(d_out // 4, 1) if bottleneck else d_out
        self.lin1 = nn.Linear(d_in, d_mid, gen=gen, dtype=dtype)
        self.lin2 = nn.Linear(d_mid, d_out, gen=gen, dtype=dtype)
        self.norm_kind = norm
        if norm == "layer":
            self.groups = groups
            self.norm = nn.LayerNormAffine(d_mid, dtype=dtype)
        else:
            self.groups = _norm_groups(groups, d_mid)
            self.norm = nn.GroupNormAffine(self.groups, d_mid, dtype=dtype)
        self.skip = None if d_in == d_out else nn.Linear(d_in, d_out, gen=gen, dtype=dtype)

    def _normed(self, h: torch.Tensor) -> torch.Tensor:
        if self.norm_kind == "layer":
            return self.norm(h)
        # per-sample group statistics over channel groups of the feature axis;
        # computed directly so single-row inputs are accepted
        flat = h.reshape(-1, self.groups, h.shape[-1] // self.groups)
        mu = flat.mean(dim=-1, keepdim=True)
        var = flat.var(dim=-1, unbiased=False, keepdim=True)
        normed = ((flat - mu) / torch.sqrt(var + 1e-5)).reshape(h.shape)
        return normed * self.norm.gamma + self.norm.beta

    def forward(self, x):
        h = self.lin2(nn.silu(self._normed(self.lin1(x))))
        return h + (self.skip(x) if self.skip is not None else x)


def _side(d_in: int, d_out: int, hidden: int, norm: str, groups: int, gen, dtype):
    """Four MLP blocks and two bottleneck blocks; the last block carries a skip."""
    return torch.nn.ModuleList(
        [
            _Block(d_in, hidden, norm, groups, gen, dtype=dtype),
            _Block(hidden, hidden, norm, groups, gen, dtype=dtype),
            _Block(hidden, hidden, norm, groups, gen, bottleneck=True, dtype=dtype),
            _Block(hidden, hidden, norm, groups, gen, dtype=dtype),
            _Block(hidden, hidden, norm, groups, gen, bottleneck=True, dtype=dtype),
            _Block(hidden, d_out, norm, groups, gen, dtype=dtype),
        ]
    )


class Gae(torch.nn.Module):
    """MLP autoencoder z_sem <-> z_dis; LayerNorm on the encoder side, GroupNorm on the decoder side."""

    def __init__(self, cfg: GaeConfig, gen: torch.Generator, dtype=torch.float32):
        super().__init__()
        self.cfg = cfg
        d_dis = cfg.layout.d_dis
        self.enc_blocks = _side(cfg.d_sem, d_dis, cfg.hidden, "layer", cfg.groups, gen, dtype)
        self.dec_blocks = _side(d_dis, cfg.d_sem, cfg.hidden, "group", cfg.groups, gen, dtype)

    def encode(self, z_sem: torch.Tensor) -> torch.Tensor:
        if z_sem.shape[-1] != self.cfg.d_sem:
            raise ValueError(f"expected length {self.cfg.d_sem}, got {z_sem.shape[-1]}")
        h = z_sem
        for block in self.enc_blocks:
            h = block(h)
        return h

    def decode(self, z_dis: torch.Tensor) -> torch.Tensor:
        if z_dis.shape[-1] != self.cfg.layout.d_dis:
            raise ValueError(f"expected length {self.cfg.layout.d_dis}, got {z_dis.shape[-1]}")
        h = z_dis
        for block in self.dec_blocks:
            h = block(h)
        return h

    def forward(self, z_sem: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(z_sem))


def _l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a - b).abs().mean()


@dataclass(frozen=True)
class LatentGroup:
    """Anchor latent plus one companion latent per attribute (the shared one)."""

    anchor: torch.Tensor
    companions: dict[str, torch.Tensor] = field(default_factory=dict)


def loss_ss(group: LatentGroup, gae, layout: AttributeLayout) -> torch.Tensor:
    """Supervised attribute-swap loss.

    Both directions of every pairwise swap must reconstruct the respective
    originals, and the full reassembly of the companions' shared slices must
    reconstruct the anchor. Mean over terms.
    """
    if set(group.companions) != set(layout.names):
        raise ValueError("group must provide one companion per layout attribute")
    e_c = gae.encode(group.anchor)
    terms = []
    shared: dict[str, torch.Tensor] = {}
    for attr in layout.names:
        z_o = group.companions[attr]
        e_o = gae.encode(z_o)
        shared[attr] = e_o
        terms.append(_l1(gae.decode(swap(e_c, e_o, layout, attr)), group.anchor))
        terms.append(_l1(gae.decode(swap(e_o, e_c, layout, attr)), z_o))
    terms.append(_l1(gae.decode(reassemble(shared, layout)), group.anchor))
    return torch.stack(terms).mean()


def loss_ur(batch_z: torch.Tensor, gae, layout: AttributeLayout, gen: torch.Generator) -> torch.Tensor:
    """Unsupervised attribute-reassemble (cycle) loss.

    z_sem -E-> z_dis -f-> z_u -D-> z_hat -E-> z_u_hat, mean L1(z_u, z_u_hat).
    f draws one donor per attribute uniformly, without replacement per assembly.
    """
    n = batch_z.shape[0]
    m = len(layout.names)
    if n < m:
        raise ValueError(f"batch of {n} too small for {m} donors without replacement")
    z_dis = gae.encode(batch_z)
    rows = []
    for _ in range(n):
        picks = torch.randperm(n, generator=gen)[:m]
        rows.append(reassemble(
            {attr: z_dis[picks[i]] for i, attr in enumerate(layout.names)}, layout
        ))
    z_u = torch.stack(rows)
    z_u_hat = gae.encode(gae.decode(z_u))
    return _l1(z_u, z_u_hat)


def loss_dis(
    groups: Sequence[LatentGroup],
    batch_z: torch.Tensor,
    gae,
    cfg: GaeConfig,
    gen: torch.Generator,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Combined disentanglement loss: L_r + lambda_ss L_ss + lambda_ur L_ur."""
    l_r = _l1(gae.decode(gae.encode(batch_z)), batch_z)
    l_ss = torch.stack([loss_ss(g, gae, cfg.layout) for g in groups]).mean()
    l_ur = loss_ur(batch_z, gae, cfg.layout, gen)
    total = l_r + cfg.lambda_ss * l_ss + cfg.lambda_ur * l_ur
    parts = {"l_r": float(l_r.detach()), "l_ss": float(l_ss.detach()), "l_ur": float(l_ur.detach())}
    return total, parts
