"""PNG IO and grid tiling. Images are [3, H, W] tensors in [-1, 1]."""

from __future__ import annotations

import numpy as np
import torch
from PIL import Image

SEPARATOR = 2  # pixels between grid cells


def to_uint8(img: torch.Tensor) -> np.ndarray:
    arr = ((img.detach().clamp(-1.0, 1.0) + 1.0) / 2.0 * 255.0).round()
    return arr.to(torch.uint8).permute(1, 2, 0).numpy()


def from_uint8(arr: np.ndarray) -> torch.Tensor:
    t = torch.from_numpy(arr.astype(np.float32)).permute(2, 0, 1)
    return t / 255.0 * 2.0 - 1.0


def save_png(path, img: torch.Tensor) -> None:
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")


def load_png(path) -> torch.Tensor:
    return from_uint8(np.asarray(Image.open(path).convert("RGB")))


def tile_grid(rows: list[list[torch.Tensor]]) -> torch.Tensor:
    """Row-major tiling with white separators, returned as one image tensor."""
    h = rows[0][0].shape[1]
    w = rows[0][0].shape[2]
    n_cols = max(len(r) for r in rows)
    out_h = len(rows) * h + (len(rows) - 1) * SEPARATOR
    out_w = n_cols * w + (n_cols - 1) * SEPARATOR
    canvas = torch.ones(3, out_h, out_w)
    for i, row in enumerate(rows):
        for j, img in enumerate(row):
            y = i * (h + SEPARATOR)
            x = j * (w + SEPARATOR)
            canvas[:, y : y + h, x : x + w] = img.clamp(-1.0, 1.0)
    return canvas
