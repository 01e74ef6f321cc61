"""Quantitative and qualitative evaluation: perplexity matrix, interpolation,
path-length proxy, reconstruction metrics, and attribute manipulation checks.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
import torch

from . import dataset as ds
from . import nn
from .dataset import AttributeTuple
from .gae import AttributeLayout, attr_slice, reassemble
from .pipeline import Pipeline


# ---------------------------------------------------------------------------
# interpolation primitives
# ---------------------------------------------------------------------------

def lerp(a: torch.Tensor, b: torch.Tensor, alpha: float) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError("lerp endpoints must share a shape")
    return (1.0 - alpha) * a + alpha * b


def slerp(a: torch.Tensor, b: torch.Tensor, alpha: float) -> torch.Tensor:
    """Spherical interpolation of flattened vectors; falls back to lerp for tiny angles."""
    na, nb = float(a.norm()), float(b.norm())
    if na == 0.0 or nb == 0.0:
        raise ValueError("slerp endpoints must be nonzero")
    cos = float((a * b).sum()) / (na * nb)
    omega = math.acos(max(-1.0, min(1.0, cos)))
    if omega < 1e-4:
        return lerp(a, b, alpha)
    s = math.sin(omega)
    return (math.sin((1.0 - alpha) * omega) / s) * a + (math.sin(alpha * omega) / s) * b


def interpolate(
    pipeline: Pipeline,
    img1: torch.Tensor,
    img2: torch.Tensor,
    alphas: Sequence[float],
    mode: str = "multi",
    attr: str | None = None,
    n_steps: int | None = None,
) -> list[torch.Tensor]:
    """Frames along a latent path: disentangled codes via lerp, noise via slerp.

    mode="single" interpolates one attribute slice and holds the others at
    image 1's values.
    """
    if mode not in ("single", "multi"):
        raise ValueError(f"unknown interpolation mode {mode!r}")
    if mode == "single" and attr is None:
        raise ValueError("single-attribute mode needs an attribute name")
    layout = pipeline.cfg.layout
    zd1 = pipeline.encode_dis(img1.unsqueeze(0))
    zd2 = pipeline.encode_dis(img2.unsqueeze(0))
    xt1 = pipeline.invert_images(img1.unsqueeze(0), pipeline.condition(zd1), n_steps)
    xt2 = pipeline.invert_images(img2.unsqueeze(0), pipeline.condition(zd2), n_steps)
    frames = []
    for alpha in alphas:
        if mode == "multi":
            zd = lerp(zd1, zd2, alpha)
        else:
            zd = zd1.clone()
            lo, hi = layout.span(attr)
            zd[..., lo:hi] = lerp(zd1[..., lo:hi], zd2[..., lo:hi], alpha)
        x_T = slerp(xt1.flatten(), xt2.flatten(), alpha).reshape(xt1.shape)
        frames.append(pipeline.generate(pipeline.condition(zd), x_T, n_steps)[0])
    return frames


# ---------------------------------------------------------------------------
# perceptual path length proxy
# ---------------------------------------------------------------------------

def ppl(
    pairs: Sequence[tuple[torch.Tensor, torch.Tensor]],
    epsilon: float,
    generate: Callable[[torch.Tensor], torch.Tensor],
    distance: Callable[[torch.Tensor, torch.Tensor], float],
    gen: torch.Generator,
) -> float:
    """Monte-Carlo E[ d(G(slerp(a, b; u)), G(slerp(a, b; u + eps))) / eps^2 ]."""
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    vals = []
    for a, b in pairs:
        u = float(torch.rand((), generator=gen))
        fa = generate(slerp(a, b, u))
        fb = generate(slerp(a, b, u + epsilon))
        vals.append(distance(fa, fb) / epsilon**2)
    return float(np.mean(vals))


def ppl_model(
    pipeline: Pipeline,
    image_pairs: Sequence[tuple[torch.Tensor, torch.Tensor]],
    epsilon: float = 1e-2,
    n_steps: int | None = None,
    distance: str = "encoder-feature",
    seed: int = 0,
) -> float:
    """Path length of the full latent-to-image path over semantic codes.

    The distance is squared L2 either in the frozen semantic encoder's feature
    space (the stand-in for an external perceptual network) or in pixel space.
    """
    if distance not in ("encoder-feature", "pixel"):
        raise ValueError(f"unknown distance {distance!r}")
    gen = nn.generator(seed, "ppl")
    res = pipeline.cfg.resolution
    pairs = []
    noises = []
    for a_img, b_img in image_pairs:
        za = pipeline.encode(a_img.unsqueeze(0)).flatten()
        zb = pipeline.encode(b_img.unsqueeze(0)).flatten()
        pairs.append((za, zb))
        noises.append(torch.randn((1, 3, res, res), generator=gen))

    def dist(a: torch.Tensor, b: torch.Tensor) -> float:
        if distance == "pixel":
            return float(((a - b) ** 2).sum())
        fa = pipeline.encode(a)
        fb = pipeline.encode(b)
        return float(((fa - fb) ** 2).sum())

    vals = []
    for (za, zb), x_T in zip(pairs, noises):
        u = float(torch.rand((), generator=gen))

        def g(z):
            cond = pipeline.condition(pipeline.gae.encode(z.unsqueeze(0)))
            return pipeline.generate(cond, x_T, n_steps)

        fa = g(slerp(za, zb, u))
        fb = g(slerp(za, zb, u + epsilon))
        vals.append(dist(fa, fb) / epsilon**2)
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# reconstruction metrics
# ---------------------------------------------------------------------------

def _gaussian_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-(x**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(a: torch.Tensor, b: torch.Tensor) -> float:
    """Single-scale SSIM, 11x11 Gaussian window, on images mapped [-1,1] -> [0,1]."""
    if a.shape != b.shape:
        raise ValueError("images must share a shape")
    if a.ndim == 3:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    a = ((a + 1.0) / 2.0).to(torch.float64)
    b = ((b + 1.0) / 2.0).to(torch.float64)
    c = a.shape[1]
    win = _gaussian_window().expand(c, 1, 11, 11)
    pad = 5
    conv = lambda x: torch.nn.functional.conv2d(x, win, padding=pad, groups=c)
    mu_a, mu_b = conv(a), conv(b)
    var_a = conv(a * a) - mu_a**2
    var_b = conv(b * b) - mu_b**2
    cov = conv(a * b) - mu_a * mu_b
    c1, c2 = 0.01**2, 0.03**2
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
    return float(s.mean())


def recon_metrics(pairs: Sequence[tuple[torch.Tensor, torch.Tensor]]) -> tuple[float, float]:
    """(MSE, SSIM) averaged over image pairs."""
    mses = [float(((a - b) ** 2).mean()) for a, b in pairs]
    ssims = [ssim(a, b) for a, b in pairs]
    return float(np.mean(mses)), float(np.mean(ssims))


# ---------------------------------------------------------------------------
# perplexity matrix
# ---------------------------------------------------------------------------

def _fit_softmax(
    x: torch.Tensor, y: torch.Tensor, k: int, steps: int = 500, lr: float = 0.1
) -> tuple[torch.Tensor, torch.Tensor]:
    """Full-batch gradient descent on multinomial logistic loss; plateau stop at 1e-6."""
    w = torch.zeros(k, x.shape[1], dtype=torch.float64, requires_grad=True)
    b = torch.zeros(k, dtype=torch.float64, requires_grad=True)
    prev = None
    for _ in range(steps):
        loss = torch.nn.functional.cross_entropy(x @ w.T + b, y)
        if prev is not None and abs(prev - float(loss.detach())) < 1e-6:
            break
        prev = float(loss.detach())
        w.grad = b.grad = None
        loss.backward()
        with torch.no_grad():
            w -= lr * w.grad
            b -= lr * b.grad
    return w.detach(), b.detach()


def perplexity_matrix(
    latents: dict[AttributeTuple, torch.Tensor],
    gae,
    layout: AttributeLayout,
    split_seed: int = 0,
) -> np.ndarray:
    """Accuracy grid: rows = latent partition used as features, cols = attribute predicted.

    Linear (softmax regression) classifiers are fit on the 80% split and
    scored on the 20% split. A split leaving some class unseen is re-seeded.
    """
    tuples = sorted(latents, key=ds.tuple_index)
    with torch.no_grad():
        z_dis = gae.encode(torch.stack([latents[t] for t in tuples])).to(torch.float64)
    index = {t: i for i, t in enumerate(tuples)}
    labels = {
        attr: torch.tensor([t.get(attr) for t in tuples]) for attr in layout.names
    }
    for _ in range(20):
        train_t, test_t = ds.split_tuples(tuples, split_seed)
        tr = torch.tensor([index[t] for t in train_t])
        te = torch.tensor([index[t] for t in test_t])
        ok = all(
            len(set(labels[attr][tr].tolist())) == layout.cardinality(attr)
            and len(set(labels[attr][te].tolist())) == layout.cardinality(attr)
            for attr in layout.names
        )
        if ok:
            break
        split_seed += 1
    else:
        raise RuntimeError("could not find a non-degenerate 80:20 split")

    m = len(layout.names)
    out = np.zeros((m, m))
    for r, part in enumerate(layout.names):
        feats = attr_slice(z_dis, layout, part)
        mu, sd = feats[tr].mean(0), feats[tr].std(0).clamp_min(1e-6)
        f = (feats - mu) / sd
        for c, attr in enumerate(layout.names):
            k = layout.cardinality(attr)
            w, b = _fit_softmax(f[tr], labels[attr][tr], k)
            pred = (f[te] @ w.T + b).argmax(dim=1)
            out[r, c] = float((pred == labels[attr][te]).double().mean())
    return out


# ---------------------------------------------------------------------------
# nearest-render oracle and recombination fidelity
# ---------------------------------------------------------------------------

_BORDER = 2  # outer frame that is pure background for every tuple


def oracle_attributes(
    img: torch.Tensor,
    renders: torch.Tensor,
    tuples: list[AttributeTuple],
) -> AttributeTuple:
    """Classify a generated image against the exhaustive render grid.

    Background is read off the border frame (background-only for every pose);
    identity and pose come from the nearest render among that background's
    candidates.
    """
    frame = torch.ones(img.shape[-2:], dtype=torch.bool)
    frame[_BORDER:-_BORDER, _BORDER:-_BORDER] = False
    frame_color = img[:, frame].mean(dim=1)
    bg_colors = torch.from_numpy(ds._BACKGROUND_COLORS * 2.0 - 1.0).to(img.dtype)
    bg = int(((bg_colors - frame_color) ** 2).sum(dim=1).argmin())
    cand = [i for i, t in enumerate(tuples) if t.background == bg]
    diffs = ((renders[cand] - img) ** 2).flatten(1).sum(dim=1)
    best = tuples[cand[int(diffs.argmin())]]
    return AttributeTuple(best.identity, bg, best.pose)


def recombination_fidelity(
    pipeline: Pipeline,
    n_trials: int = 100,
    seed: int = 0,
    n_steps: int | None = None,
    batch: int = 25,
) -> float:
    """Fraction of attribute assignments matching their donors, over random
    recombinations generated from x_T ~ N(0, I)."""
    gen = nn.generator(seed, "recombine")
    grid = ds.enumerate_dataset(pipeline.cfg.resolution)
    tuples = [t for t, _ in grid]
    renders = torch.stack([img for _, img in grid])
    layout = pipeline.cfg.layout
    res = pipeline.cfg.resolution

    conds, targets = [], []
    for _ in range(n_trials):
        donor_tuples = {
            attr: tuples[int(torch.randint(len(tuples), (1,), generator=gen))]
            for attr in layout.names
        }
        with torch.no_grad():
            parts = {
                attr: pipeline.encode_dis(renders[ds.tuple_index(t)].unsqueeze(0))
                for attr, t in donor_tuples.items()
            }
            conds.append(pipeline.condition(reassemble(parts, layout))[0])
        targets.append({attr: donor_tuples[attr].get(attr) for attr in layout.names})

    hits = total = 0
    with torch.no_grad():
        for i in range(0, n_trials, batch):
            cond = torch.stack(conds[i : i + batch])
            x_T = torch.randn((cond.shape[0], 3, res, res), generator=gen)
            out = pipeline.generate(cond, x_T, n_steps)
            for j in range(cond.shape[0]):
                found = oracle_attributes(out[j], renders, tuples)
                for attr in layout.names:
                    hits += int(found.get(attr) == targets[i + j][attr])
                    total += 1
    return hits / total
