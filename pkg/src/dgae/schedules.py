"""Diffusion noise schedule and the closed-form forward process.

Conventions (fixed throughout the codebase):
  * variance-domain products: alpha_bar[t] = prod_{s<=t} (1 - beta[s]),
    so q(x_t | x_0) = N(sqrt(alpha_bar[t]) x_0, (1 - alpha_bar[t]) I)
  * timesteps are 0-indexed; t = 0 is the least-noised step
  * t = -1 denotes the data endpoint with alpha_bar == 1
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed per-timestep diffusion coefficients. Immutable after construction."""

    T: int
    beta: torch.Tensor                      # [T], float64
    alpha_bar: torch.Tensor = field(init=False)
    sqrt_alpha_bar: torch.Tensor = field(init=False)
    sqrt_one_minus_alpha_bar: torch.Tensor = field(init=False)

    def __post_init__(self) -> None:
        if self.T < 1:
            raise ValueError("T must be >= 1")
        beta = self.beta.to(torch.float64)
        if beta.shape != (self.T,):
            raise ValueError(f"beta must have shape ({self.T},), got {tuple(beta.shape)}")
        if not bool(((beta > 0) & (beta < 1)).all()):
            raise ValueError("all betas must lie in (0, 1)")
        object.__setattr__(self, "beta", beta)
        alpha_bar = torch.cumprod(1.0 - beta, dim=0)
        object.__setattr__(self, "alpha_bar", alpha_bar)
        object.__setattr__(self, "sqrt_alpha_bar", torch.sqrt(alpha_bar))
        object.__setattr__(self, "sqrt_one_minus_alpha_bar", torch.sqrt(1.0 - alpha_bar))

    def alpha_bar_at(self, t: int) -> float:
        """alpha_bar[t], extended with the data endpoint alpha_bar[-1] = 1."""
        if t == -1:
            return 1.0
        if not 0 <= t < self.T:
            raise ValueError(f"timestep {t} out of range for T={self.T}")
        return float(self.alpha_bar[t])


def make_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule (the DDPM default).

    Betas are rounded through float32 so a schedule rebuilt from a
    checkpointed f32 beta vector is bit-identical to the original.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    beta = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    beta = beta.to(torch.float32).to(torch.float64)
    return NoiseSchedule(T=T, beta=beta)


def _gather_coeff(vec: torch.Tensor, t, x: torch.Tensor) -> torch.Tensor:
    """Pick per-timestep coefficients and shape them to broadcast against x."""
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        c = vec[t].to(x.dtype)
        return c.reshape(-1, *([1] * (x.ndim - 1)))
    return vec[int(t)].to(x.dtype)


def _check_t(t, T: int) -> None:
    ts = t.flatten().tolist() if isinstance(t, torch.Tensor) and t.ndim > 0 else [int(t)]
    for ti in ts:
        if not 0 <= ti < T:
            raise ValueError(f"timestep {ti} out of range for T={T}")


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Closed-form forward marginal: x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps."""
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    _check_t(t, sched.T)
    a = _gather_coeff(sched.sqrt_alpha_bar, t, x0)
    b = _gather_coeff(sched.sqrt_one_minus_alpha_bar, t, x0)
    return a * x0 + b * eps


def forward_step(x_prev: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Single Markov step q(x_t | x_{t-1}): x_t = sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) eps."""
    if eps.shape != x_prev.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != x shape {tuple(x_prev.shape)}")
    _check_t(t, sched.T)
    beta = _gather_coeff(sched.beta, t, x_prev)
    return torch.sqrt(1.0 - beta) * x_prev + torch.sqrt(beta) * eps


def posterior_mean_var(
    x_t: torch.Tensor, x0: torch.Tensor, t: int, sched: NoiseSchedule
) -> tuple[torch.Tensor, float]:
    """Bayes posterior q(x_{t-1} | x_t, x0); variance is scalar per timestep.

    mean = sqrt(a_t) (1 - ab_{t-1}) / (1 - ab_t) * x_t
         + sqrt(ab_{t-1}) beta_t / (1 - ab_t) * x0
    var  = (1 - ab_{t-1}) beta_t / (1 - ab_t)
    """
    t = int(t)
    if t < 1:
        raise ValueError("posterior requires t >= 1 (t=0 has no predecessor)")
    _check_t(t, sched.T)
    beta_t = float(sched.beta[t])
    ab_t = float(sched.alpha_bar[t])
    ab_prev = float(sched.alpha_bar[t - 1])
    coef_xt = ((1.0 - beta_t) ** 0.5) * (1.0 - ab_prev) / (1.0 - ab_t)
    coef_x0 = (ab_prev**0.5) * beta_t / (1.0 - ab_t)
    var = (1.0 - ab_prev) * beta_t / (1.0 - ab_t)
    return coef_xt * x_t + coef_x0 * x0, var
