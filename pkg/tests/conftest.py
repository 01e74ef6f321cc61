"""Shared fixtures: a miniature experiment configuration that exercises every
code path cheaply, and a central finite-difference gradient checker used as
the independent oracle for all differentiable primitives and composites.
"""

from __future__ import annotations

import copy

import pytest
import torch

from dgae import config as config_mod

MICRO_DOC = {
    "seed": 7,
    "resolution": 16,
    "d_sem": 16,
    "layout": [["identity", 6, 8], ["background", 8, 4], ["pose", 10, 4]],
    "schedule": {"T": 50},
    "encoder": {"stage_channels": [8, 8, 8], "groups": 4, "heads": 2},
    "denoiser": {"channels": [8, 8, 8], "time_dim": 8, "cond_hidden": 8, "groups": 4, "heads": 2},
    "gae": {"hidden": 16, "groups": 4},
    "train": {
        "pretrain": {"lr": 0.001, "batch_size": 4, "steps": 3, "save_every": 2},
        "refine": {"lr": 0.001, "batch_size": 8, "steps": 3, "save_every": 2},
        "joint": {"lr": 0.001, "batch_size": 4, "steps": 3, "save_every": 2},
    },
    "sample": {"n_steps": 4},
}


def micro_doc() -> dict:
    return copy.deepcopy(MICRO_DOC)


@pytest.fixture
def micro_cfg() -> config_mod.ExperimentConfig:
    return config_mod.from_dict(micro_doc())


def fd_check(f, params, pert: float = 1e-4, tol: float = 1e-3, max_entries: int = 24):
    """Central finite-difference gradient check against reverse-mode gradients.

    f is a closure returning a scalar loss built from `params` (float64 leaf
    tensors). For each parameter a subset of entries is perturbed by +/- pert
    and the resulting difference quotients are compared to autograd in
    relative norm.
    """
    params = list(params)
    for p in params:
        assert p.dtype == torch.float64, "finite-difference checks run in float64"
        assert p.requires_grad
    loss = f()
    grads = torch.autograd.grad(loss, params, allow_unused=False)
    for p, g in zip(params, grads):
        flat = p.data.reshape(-1)
        n = flat.numel()
        if n <= max_entries:
            idx = list(range(n))
        else:
            idx = torch.linspace(0, n - 1, max_entries).round().long().tolist()
        fd = torch.zeros(len(idx), dtype=torch.float64)
        for k, i in enumerate(idx):
            orig = float(flat[i])
            flat[i] = orig + pert
            with torch.no_grad():
                lp = float(f())
            flat[i] = orig - pert
            with torch.no_grad():
                lm = float(f())
            flat[i] = orig
            fd[k] = (lp - lm) / (2.0 * pert)
        an = g.reshape(-1)[idx]
        denom = max(float(fd.norm()), float(an.norm()), 1e-8)
        rel = float((fd - an).norm()) / denom
        assert rel < tol, f"gradient mismatch: relative error {rel:.3e} >= {tol}"
