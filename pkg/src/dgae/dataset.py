"""Procedural "ShapesToy" dataset and the one-shared-attribute group sampler.

Each image is determined by three attributes: identity (one of 6 asymmetric
glyph shapes, each with its own fill color), background (one of 8 palette
colors), pose (rotation in 36-degree increments, 10 values). The full grid is
6 x 8 x 10 = 480 images. Shapes are deliberately without 180-degree symmetry
so every pose is visually distinct.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterable

import numpy as np
import torch

from .nn import mix_seed

IDENTITY_CARD = 6
BACKGROUND_CARD = 8
POSE_CARD = 10
N_POSES_DEGREES = 36.0
GRID_SIZE = IDENTITY_CARD * BACKGROUND_CARD * POSE_CARD

LATENT_MAGIC = b"DGZS"
LATENT_VERSION = 1

# Asymmetric glyph outlines in [-1, 1] coordinates (unrotated). Every glyph is
# an elongated bar-like figure spanning most of the canvas, so a 36-degree
# rotation sweeps a large pixel area and the orientation reads as a global
# image statistic; a distinct feature at one end breaks 180-degree symmetry.
# Vertex radius stays <= 0.74 so a 2-pixel border at 32x32 is pure background
# for every pose.
_SHAPES = [
    # tapered wedge bar
    [(-0.66, -0.02), (0.66, -0.20), (0.66, 0.20), (-0.66, 0.02)],
    # hook bar
    [(-0.66, -0.07), (0.46, -0.07), (0.46, -0.32), (0.66, -0.32), (0.66, 0.07), (-0.66, 0.07)],
    # offset cross bar
    [(-0.66, -0.06), (0.26, -0.06), (0.26, -0.30), (0.46, -0.30), (0.46, 0.30), (0.26, 0.30), (0.26, 0.06), (-0.66, 0.06)],
    # long arrow
    [(-0.66, -0.06), (0.26, -0.06), (0.26, -0.24), (0.66, 0.0), (0.26, 0.24), (0.26, 0.06), (-0.66, 0.06)],
    # asymmetric zigzag bar
    [(-0.66, -0.12), (0.06, -0.12), (0.06, -0.02), (0.66, -0.02), (0.66, 0.22), (-0.06, 0.22), (-0.06, 0.02), (-0.66, 0.02)],
    # knobbed bar
    [(-0.66, -0.07), (0.02, -0.07), (0.02, -0.30), (0.28, -0.30), (0.28, -0.07), (0.66, -0.07), (0.66, 0.07), (-0.66, 0.07)],
]

# bright fills for identities, muted fills for backgrounds (disjoint palettes)
_SHAPE_COLORS = np.array(
    [
        (0.95, 0.25, 0.20),
        (0.98, 0.85, 0.15),
        (0.25, 0.90, 0.90),
        (0.95, 0.35, 0.90),
        (0.55, 0.95, 0.30),
        (0.98, 0.60, 0.15),
    ]
)
_BACKGROUND_COLORS = np.array(
    [
        (0.10, 0.12, 0.35),
        (0.10, 0.32, 0.15),
        (0.35, 0.35, 0.35),
        (0.34, 0.22, 0.10),
        (0.28, 0.10, 0.32),
        (0.08, 0.30, 0.32),
        (0.38, 0.10, 0.12),
        (0.30, 0.32, 0.08),
    ]
)


@dataclass(frozen=True, order=True)
class AttributeTuple:
    identity: int
    background: int
    pose: int

    def __post_init__(self) -> None:
        if not 0 <= self.identity < IDENTITY_CARD:
            raise ValueError(f"identity index {self.identity} out of range")
        if not 0 <= self.background < BACKGROUND_CARD:
            raise ValueError(f"background index {self.background} out of range")
        if not 0 <= self.pose < POSE_CARD:
            raise ValueError(f"pose index {self.pose} out of range")

    def get(self, attr: str) -> int:
        return getattr(self, attr)


ATTRIBUTES = ("identity", "background", "pose")
CARDINALITIES = {"identity": IDENTITY_CARD, "background": BACKGROUND_CARD, "pose": POSE_CARD}


@dataclass(frozen=True)
class GroupSample:
    """Anchor plus one companion per attribute, each sharing exactly that attribute."""

    anchor: AttributeTuple
    companions: dict[str, AttributeTuple]

    def __post_init__(self) -> None:
        for attr, comp in self.companions.items():
            shared = [a for a in ATTRIBUTES if comp.get(a) == self.anchor.get(a)]
            if shared != [attr]:
                raise ValueError(f"companion for {attr!r} shares {shared} with the anchor")


def _coverage(attrs: AttributeTuple, resolution: int, supersample: int = 4) -> np.ndarray:
    """Anti-aliased shape coverage in [0, 1], shape [H, W]."""
    n = resolution * supersample
    # pixel-center coordinates in [-1, 1], y down
    coords = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    px, py = np.meshgrid(coords, coords)
    ang = np.deg2rad(N_POSES_DEGREES * attrs.pose)
    rot = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
    verts = np.array(_SHAPES[attrs.identity]) @ rot.T
    inside = np.zeros((n, n), dtype=bool)
    xs, ys = verts[:, 0], verts[:, 1]
    for i in range(len(verts)):
        j = (i + 1) % len(verts)
        x1, y1, x2, y2 = xs[i], ys[i], xs[j], ys[j]
        crosses = (y1 > py) != (y2 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xcross = (x2 - x1) * (py - y1) / (y2 - y1) + x1
        inside ^= crosses & (px < xcross)
    cov = inside.astype(np.float64).reshape(resolution, supersample, resolution, supersample)
    return cov.mean(axis=(1, 3))


def render(
    attrs: AttributeTuple, resolution: int = 32, return_coverage: bool = False
):
    """Deterministic rasterization to a [3, H, W] tensor with values in [-1, 1]."""
    cov = _coverage(attrs, resolution)
    bg = _BACKGROUND_COLORS[attrs.background].reshape(3, 1, 1)
    fg = _SHAPE_COLORS[attrs.identity].reshape(3, 1, 1)
    img01 = bg * (1.0 - cov) + fg * cov
    img = torch.from_numpy((img01 * 2.0 - 1.0).astype(np.float32))
    if return_coverage:
        return img, torch.from_numpy(cov.astype(np.float32))
    return img


def all_tuples() -> list[AttributeTuple]:
    """Stable identity-major enumeration of the full grid."""
    return [
        AttributeTuple(i, b, p)
        for i in range(IDENTITY_CARD)
        for b in range(BACKGROUND_CARD)
        for p in range(POSE_CARD)
    ]


def tuple_index(attrs: AttributeTuple) -> int:
    return (attrs.identity * BACKGROUND_CARD + attrs.background) * POSE_CARD + attrs.pose


def enumerate_dataset(resolution: int = 32) -> list[tuple[AttributeTuple, torch.Tensor]]:
    return [(t, render(t, resolution)) for t in all_tuples()]


def sample_group(anchor: AttributeTuple, gen: torch.Generator) -> GroupSample:
    """GROUP(anchor, 1): per attribute, a companion agreeing exactly on it."""
    companions = {}
    for attr in ATTRIBUTES:
        values = {}
        for other in ATTRIBUTES:
            if other == attr:
                values[other] = anchor.get(other)
            else:
                card = CARDINALITIES[other]
                k = int(torch.randint(card - 1, (1,), generator=gen))
                if k >= anchor.get(other):
                    k += 1
                values[other] = k
        companions[attr] = AttributeTuple(**values)
    return GroupSample(anchor=anchor, companions=companions)


def split_tuples(
    tuples: Iterable[AttributeTuple], seed: int
) -> tuple[list[AttributeTuple], list[AttributeTuple]]:
    """Stable 80:20 train/test split keyed on a tuple hash."""
    train, test = [], []
    for t in tuples:
        h = mix_seed(seed, "split", tuple_index(t))
        (test if h % 5 == 0 else train).append(t)
    return train, test


# ---------------------------------------------------------------------------
# latent store: magic, version u32, count u64, dim u64, then per record
# (identity, background, pose) as 3 x u16 LE + f32 LE vector
# ---------------------------------------------------------------------------

def build_latent_dataset(encoder, resolution: int = 32, batch: int = 96) -> dict[AttributeTuple, torch.Tensor]:
    """Encode the whole grid to semantic codes with a frozen encoder."""
    data = enumerate_dataset(resolution)
    out: dict[AttributeTuple, torch.Tensor] = {}
    with torch.no_grad():
        for i in range(0, len(data), batch):
            chunk = data[i : i + batch]
            imgs = torch.stack([img for _, img in chunk])
            z = encoder(imgs)
            for (t, _), zv in zip(chunk, z):
                out[t] = zv.clone()
    return out


def save_latents(path, store: dict[AttributeTuple, torch.Tensor]) -> None:
    items = sorted(store.items(), key=lambda kv: tuple_index(kv[0]))
    dim = items[0][1].numel()
    out = [LATENT_MAGIC, struct.pack("<I", LATENT_VERSION), struct.pack("<QQ", len(items), dim)]
    for t, z in items:
        out.append(struct.pack("<3H", t.identity, t.background, t.pose))
        out.append(z.detach().to(torch.float32).numpy().tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(out))


def load_latents(path) -> dict[AttributeTuple, torch.Tensor]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != LATENT_MAGIC:
        raise ValueError(f"{path}: not a latent store (bad magic)")
    count, dim = struct.unpack_from("<QQ", blob, 8)
    off = 24
    store: dict[AttributeTuple, torch.Tensor] = {}
    for _ in range(count):
        i, b, p = struct.unpack_from("<3H", blob, off)
        off += 6
        vec = torch.frombuffer(bytearray(blob[off : off + 4 * dim]), dtype=torch.float32).clone()
        off += 4 * dim
        store[AttributeTuple(i, b, p)] = vec
    return store
