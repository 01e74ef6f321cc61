"""Glue object bundling the trained pieces behind image-level operations."""

from __future__ import annotations

from collections import OrderedDict

import torch

from . import dataset as ds
from . import gae as gae_mod
from . import nn
from .config import ExperimentConfig
from .ddim import SamplerConfig, invert, sample
from .denoiser import Denoiser
from .encoder import SemanticEncoder
from .gae import Gae
from .schedules import NoiseSchedule, make_linear_schedule


def build_models(cfg: ExperimentConfig, dtype=torch.float32):
    encoder = SemanticEncoder(cfg.encoder, nn.generator(cfg.seed, "init/encoder"), dtype)
    denoiser = Denoiser(cfg.denoiser, nn.generator(cfg.seed, "init/denoiser"), dtype)
    gae = Gae(cfg.gae_config(), nn.generator(cfg.seed, "init/gae"), dtype)
    return encoder, denoiser, gae


def all_params(encoder, denoiser, gae=None) -> OrderedDict:
    out = nn.named_params(encoder, "encoder/")
    out.update(nn.named_params(denoiser, "denoiser/"))
    if gae is not None:
        out.update(nn.named_params(gae, "gae/"))
    return out


class Pipeline:
    """Frozen, evaluation-side view of a trained checkpoint."""

    def __init__(self, cfg: ExperimentConfig, encoder, denoiser, gae, sched: NoiseSchedule):
        self.cfg = cfg
        self.encoder = encoder
        self.denoiser = denoiser
        self.gae = gae
        self.sched = sched

    @classmethod
    def from_checkpoint(cls, cfg: ExperimentConfig, path) -> "Pipeline":
        records = nn.load_checkpoint(path)
        params, _, beta = nn.split_checkpoint(records)
        encoder, denoiser, gae = build_models(cfg)
        nn.load_into(encoder, params, "encoder/")
        nn.load_into(denoiser, params, "denoiser/")
        if any(k.startswith("gae/") for k in params):
            nn.load_into(gae, params, "gae/")
        if beta is not None:
            sched = NoiseSchedule(T=beta.numel(), beta=beta.to(torch.float64))
        else:
            sched = make_linear_schedule(cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end)
        for m in (encoder, denoiser, gae):
            m.eval()
            for p in m.parameters():
                p.requires_grad_(False)
        return cls(cfg, encoder, denoiser, gae, sched)

    def sampler(self, n_steps: int | None = None) -> SamplerConfig:
        return SamplerConfig(n_steps=n_steps or self.cfg.sample_steps)

    # --- latent plumbing ----------------------------------------------------

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        return self.encoder(images)

    def encode_dis(self, images: torch.Tensor) -> torch.Tensor:
        return self.gae.encode(self.encoder(images))

    def condition(self, z_dis: torch.Tensor) -> torch.Tensor:
        """Semantic condition decoded from a disentangled code."""
        return self.gae.decode(z_dis)

    # --- image-level ops ----------------------------------------------------

    def invert_images(self, images: torch.Tensor, z_sem: torch.Tensor | None = None,
                      n_steps: int | None = None) -> torch.Tensor:
        if z_sem is None:
            z_sem = self.condition(self.encode_dis(images))
        return invert(images, z_sem, self.sampler(n_steps), self.denoiser, self.sched)

    def generate(self, z_sem: torch.Tensor, x_T: torch.Tensor, n_steps: int | None = None) -> torch.Tensor:
        return sample(z_sem, x_T, self.sampler(n_steps), self.denoiser, self.sched)

    def reconstruct(self, images: torch.Tensor, n_steps: int | None = None) -> torch.Tensor:
        """Round trip through the inferred noise tensor and back."""
        z_sem = self.condition(self.encode_dis(images))
        x_T = self.invert_images(images, z_sem, n_steps)
        return self.generate(z_sem, x_T, n_steps)

    def manipulate(
        self,
        donors: dict[str, torch.Tensor],
        noise: str = "inferred",
        seed: int = 0,
        n_steps: int | None = None,
    ) -> torch.Tensor:
        """Recombine attribute slices from donor images and generate.

        noise="inferred" inverts the identity donor; noise="random" draws
        x_T ~ N(0, I) from the seed.
        """
        layout = self.cfg.layout
        missing = set(layout.names) - set(donors)
        if missing:
            raise KeyError(f"missing donor images for attributes: {sorted(missing)}")
        parts = {attr: self.encode_dis(img.unsqueeze(0)) for attr, img in donors.items()}
        z_dis = gae_mod.reassemble(parts, layout)
        cond = self.condition(z_dis)
        if noise == "inferred":
            anchor = donors["identity"].unsqueeze(0)
            x_T = self.invert_images(anchor, n_steps=n_steps)
        elif noise == "random":
            x_T = torch.randn(
                (1, 3, self.cfg.resolution, self.cfg.resolution),
                generator=nn.generator(seed, "manipulate"),
            )
        else:
            raise ValueError(f"unknown noise source {noise!r}")
        return self.generate(cond, x_T, n_steps)[0]
