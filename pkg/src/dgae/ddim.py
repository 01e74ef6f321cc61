"""Deterministic sampling / inversion ladders and the diffusion training loss.

The generative step runs with sigma_t = 0 only:

    x0_hat   = (x_t - sqrt(1 - ab_t) eps_hat) / sqrt(ab_t)
    x_t_prev = sqrt(ab_prev) x0_hat + sqrt(1 - ab_prev) eps_hat

The inversion ladder is the same affine formula run upward, with the noise
prediction evaluated at the current (lower) timestep. t = -1 denotes the data
endpoint (alpha_bar == 1).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .schedules import NoiseSchedule, q_sample


@dataclass(frozen=True)
class SamplerConfig:
    n_steps: int = 100
    sigma: float = 0.0   # fixed; the stochastic branch is out of scope

    def __post_init__(self) -> None:
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.sigma != 0.0:
            raise ValueError("only the deterministic sigma = 0 sampler is implemented")


def timestep_ladder(cfg: SamplerConfig, T: int) -> list[int]:
    """Uniformly strided descending subsequence of 0..T-1, ending at the least-noised step."""
    if cfg.n_steps > T:
        raise ValueError(f"n_steps {cfg.n_steps} exceeds T {T}")
    if cfg.n_steps == 1:
        return [T - 1]
    ts = torch.linspace(T - 1, 0, cfg.n_steps, dtype=torch.float64).round().to(torch.int64)
    return sorted(set(ts.tolist()), reverse=True)


def _step(x: torch.Tensor, ab_from: float, ab_to: float, eps_hat: torch.Tensor) -> torch.Tensor:
    x0_hat = (x - (1.0 - ab_from) ** 0.5 * eps_hat) / ab_from**0.5
    return ab_to**0.5 * x0_hat + (1.0 - ab_to) ** 0.5 * eps_hat


def ddim_step(x_t, t: int, t_prev: int, eps_hat, sched: NoiseSchedule):
    """One deterministic generative step t -> t_prev (t_prev = -1 is the data endpoint)."""
    if t <= t_prev:
        raise ValueError(f"require t > t_prev, got {t} <= {t_prev}")
    return _step(x_t, sched.alpha_bar_at(t), sched.alpha_bar_at(t_prev), eps_hat)


def invert_step(x_t, t: int, t_next: int, eps_hat, sched: NoiseSchedule):
    """One deterministic inversion step t -> t_next with t_next > t."""
    if t_next <= t:
        raise ValueError(f"require t_next > t, got {t_next} <= {t}")
    return _step(x_t, sched.alpha_bar_at(t), sched.alpha_bar_at(t_next), eps_hat)


def sample(z_sem, x_T, cfg: SamplerConfig, denoiser, sched: NoiseSchedule):
    """Run the strided generative ladder from pure noise down to the data endpoint."""
    ts = timestep_ladder(cfg, sched.T)
    x = x_T
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else -1
        eps_hat = denoiser(x, t, z_sem)
        x = ddim_step(x, t, t_prev, eps_hat, sched)
    return x


def invert(x0, z_sem, cfg: SamplerConfig, denoiser, sched: NoiseSchedule):
    """Ascend the same ladder to recover the noise tensor ("inferred x_T")."""
    ts = timestep_ladder(cfg, sched.T)[::-1]
    x = x0
    prev = -1
    for t in ts:
        eval_t = prev if prev >= 0 else 0
        eps_hat = denoiser(x, eval_t, z_sem)
        x = invert_step(x, prev, t, eps_hat, sched)
        prev = t
    return x


def l_simple(batch_x0, encoder, denoiser, sched: NoiseSchedule, gen: torch.Generator):
    """Diffusion loss: E ||eps - eps_theta(q_sample(x0, t, eps), t, encode(x0))||_2^2.

    t is drawn uniformly and eps Gaussian, per example; the squared error is
    summed over image elements and averaged over the batch.
    """
    if batch_x0.ndim != 4 or batch_x0.shape[0] == 0:
        raise ValueError("batch must be a nonempty [N, C, H, W] tensor")
    n = batch_x0.shape[0]
    t = torch.randint(0, sched.T, (n,), generator=gen)
    eps = torch.randn(batch_x0.shape, generator=gen, dtype=batch_x0.dtype)
    z_sem = encoder(batch_x0)
    x_t = q_sample(batch_x0, t, eps, sched)
    eps_hat = denoiser(x_t, t, z_sem)
    return ((eps - eps_hat) ** 2).flatten(1).sum(dim=1).mean()
