"""Three-stage training: diffusion-autoencoder pretrain, latent GAE refinement
on a frozen encoder, and joint fine-tuning. Every stage is bit-reproducible
from (config, seed): all randomness comes from named streams counted by the
optimizer step, so resuming from a checkpoint continues the same draw sequence.
"""

from __future__ import annotations

import csv
from pathlib import Path

import torch

from . import dataset as ds
from . import nn
from .config import ExperimentConfig, StageConfig
from .ddim import l_simple
from .gae import LatentGroup, loss_dis
from .pipeline import all_params, build_models
from .schedules import NoiseSchedule, make_linear_schedule


class NumericsError(RuntimeError):
    """A loss or parameter went non-finite."""


class MissingPrerequisite(RuntimeError):
    """A stage was started without the checkpoint it builds on."""


def _schedule(cfg: ExperimentConfig) -> NoiseSchedule:
    return make_linear_schedule(cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end)


def _log_writer(path: Path, resume: bool):
    exists = path.exists() and resume
    f = open(path, "a" if exists else "w", newline="")
    w = csv.writer(f)
    if not exists:
        w.writerow(["step", "l_simple", "l_r", "l_ss", "l_ur", "total"])
    return f, w


def _grads(store: nn.ParamStore) -> dict[str, torch.Tensor]:
    return {
        k: (p.grad if p.grad is not None else torch.zeros_like(p))
        for k, p in store.params.items()
    }


def _zero_grads(store: nn.ParamStore) -> None:
    for p in store.params.values():
        p.grad = None


def _check_finite(loss: torch.Tensor, step: int) -> None:
    if not torch.isfinite(loss):
        raise NumericsError(f"non-finite loss at step {step}")


def _restore_opt(store: nn.ParamStore, opt: dict) -> None:
    if opt["step"] == 0 and not opt["m"]:
        return
    if set(opt["m"]) != set(store.params):
        raise MissingPrerequisite("optimizer state does not match parameter set")
    store.step_count = opt["step"]
    for k in store.params:
        store.m[k] = opt["m"][k].to(store.params[k].dtype)
        store.v[k] = opt["v"][k].to(store.params[k].dtype)


def _batch_indices(n: int, bs: int, gen: torch.Generator) -> torch.Tensor:
    return torch.randperm(n, generator=gen)[:bs]


def load_stage_checkpoint(path, cfg: ExperimentConfig, with_gae: bool):
    if not Path(path).exists():
        raise MissingPrerequisite(f"missing checkpoint: {path}")
    records = nn.load_checkpoint(path)
    params, opt, beta = nn.split_checkpoint(records)
    encoder, denoiser, gae = build_models(cfg)
    nn.load_into(encoder, params, "encoder/")
    nn.load_into(denoiser, params, "denoiser/")
    if with_gae:
        if not any(k.startswith("gae/") for k in params):
            raise MissingPrerequisite(f"{path} has no GAE parameters (run the refine stage first)")
        nn.load_into(gae, params, "gae/")
    return encoder, denoiser, gae, opt, beta


def pretrain(
    cfg: ExperimentConfig,
    out_dir,
    steps: int | None = None,
    resume: str | None = None,
) -> Path:
    """Stage 1: optimize encoder + denoiser jointly on the diffusion loss."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stage = cfg.stages["pretrain"]
    sched = _schedule(cfg)
    if resume:
        encoder, denoiser, gae, opt, _ = load_stage_checkpoint(resume, cfg, with_gae=False)
    else:
        encoder, denoiser, gae = build_models(cfg)
        opt = {"step": 0, "m": {}, "v": {}}
    store = nn.ParamStore(all_params(encoder, denoiser))
    _restore_opt(store, opt)
    images = torch.stack([img for _, img in ds.enumerate_dataset(cfg.resolution)])
    ckpt = out_dir / "pretrain.ckpt"

    def save() -> None:
        nn.save_checkpoint(ckpt, store.params, store, sched.beta)

    total_steps = stage.steps if steps is None else steps
    log_f, log = _log_writer(out_dir / "pretrain_log.csv", resume is not None)
    try:
        while store.step_count < total_steps:
            k = store.step_count
            batch = images[_batch_indices(len(images), stage.batch_size, nn.generator(cfg.seed, "batch", k))]
            loss = l_simple(batch, encoder, denoiser, sched, nn.generator(cfg.seed, "diffusion", k))
            _check_finite(loss.detach(), k)
            _zero_grads(store)
            loss.backward()
            nn.adam_step(store, _grads(store), stage.lr)
            log.writerow([store.step_count, f"{float(loss.detach()):.6f}", "", "", "", f"{float(loss.detach()):.6f}"])
            if store.step_count % stage.save_every == 0:
                save()
    finally:
        log_f.close()
    save()
    return ckpt


def build_latent_store(cfg: ExperimentConfig, pretrain_ckpt, out_path) -> Path:
    """Encode the full grid with the frozen pretrained encoder."""
    encoder, _, _, _, _ = load_stage_checkpoint(pretrain_ckpt, cfg, with_gae=False)
    encoder.eval()
    store = ds.build_latent_dataset(encoder, cfg.resolution)
    ds.save_latents(out_path, store)
    return Path(out_path)


def _latent_groups(
    latents: dict[ds.AttributeTuple, torch.Tensor],
    tuples: list[ds.AttributeTuple],
    n_groups: int,
    gen: torch.Generator,
) -> tuple[list[LatentGroup], torch.Tensor]:
    anchors = [tuples[int(i)] for i in _batch_indices(len(tuples), n_groups, gen)]
    groups = []
    for anchor in anchors:
        g = ds.sample_group(anchor, gen)
        groups.append(
            LatentGroup(
                anchor=latents[anchor],
                companions={a: latents[c] for a, c in g.companions.items()},
            )
        )
    batch_z = torch.stack([latents[a] for a in anchors])
    return groups, batch_z


def refine_gae(
    cfg: ExperimentConfig,
    pretrain_ckpt,
    out_dir,
    steps: int | None = None,
    latent_path=None,
) -> Path:
    """Stage 2: train the GAE on frozen semantic codes; encoder/denoiser untouched."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stage = cfg.stages["refine"]
    encoder, denoiser, gae, _, beta = load_stage_checkpoint(pretrain_ckpt, cfg, with_gae=False)
    if latent_path is not None:
        if not Path(latent_path).exists():
            raise MissingPrerequisite(f"missing latent store: {latent_path}")
        latents = ds.load_latents(latent_path)
    else:
        encoder.eval()
        latents = ds.build_latent_dataset(encoder, cfg.resolution)
    tuples = sorted(latents, key=ds.tuple_index)
    gcfg = cfg.gae_config()
    gcfg.lambda_ss, gcfg.lambda_ur = stage.lambda_ss, stage.lambda_ur
    store = nn.ParamStore(nn.named_params(gae, "gae/"))
    sched_beta = beta if beta is not None else _schedule(cfg).beta
    ckpt = out_dir / "refine.ckpt"

    def save() -> None:
        params = all_params(encoder, denoiser, gae)
        nn.save_checkpoint(ckpt, params, store, sched_beta)

    total_steps = stage.steps if steps is None else steps
    log_f, log = _log_writer(out_dir / "refine_log.csv", False)
    try:
        while store.step_count < total_steps:
            k = store.step_count
            groups, batch_z = _latent_groups(
                latents, tuples, stage.batch_size, nn.generator(cfg.seed, "group", k)
            )
            loss, parts = loss_dis(groups, batch_z, gae, gcfg, nn.generator(cfg.seed, "donor", k))
            _check_finite(loss, k)
            _zero_grads(store)
            loss.backward()
            nn.adam_step(store, _grads(store), stage.lr)
            log.writerow(
                [store.step_count, "", f"{parts['l_r']:.6f}", f"{parts['l_ss']:.6f}",
                 f"{parts['l_ur']:.6f}", f"{float(loss.detach()):.6f}"]
            )
            if store.step_count % stage.save_every == 0:
                save()
    finally:
        log_f.close()
    save()
    return ckpt


def finetune_joint(
    cfg: ExperimentConfig,
    refine_ckpt,
    out_dir,
    steps: int | None = None,
    gamma: float | None = None,
    from_scratch_ckpt: str | None = None,
) -> Path:
    """Stage 3: end-to-end fine-tuning of encoder, denoiser, and GAE.

    Joint training from scratch is exposed via from_scratch_ckpt pointing at a
    zero-step checkpoint, but is unsupported (known to be unstable).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stage = cfg.stages["joint"]
    g = stage.gamma if gamma is None else gamma
    src = from_scratch_ckpt if from_scratch_ckpt is not None else refine_ckpt
    encoder, denoiser, gae, _, beta = load_stage_checkpoint(src, cfg, with_gae=True)
    sched = NoiseSchedule(T=beta.numel(), beta=beta.to(torch.float64)) if beta is not None else _schedule(cfg)
    gcfg = cfg.gae_config()
    gcfg.lambda_ss, gcfg.lambda_ur = stage.lambda_ss, stage.lambda_ur
    store = nn.ParamStore(all_params(encoder, denoiser, gae))
    images = torch.stack([img for _, img in ds.enumerate_dataset(cfg.resolution)])
    tuples = ds.all_tuples()
    ckpt = out_dir / "joint.ckpt"

    def save() -> None:
        nn.save_checkpoint(ckpt, store.params, store, sched.beta)

    total_steps = stage.steps if steps is None else steps
    log_f, log = _log_writer(out_dir / "joint_log.csv", False)
    try:
        while store.step_count < total_steps:
            k = store.step_count
            idx = _batch_indices(len(images), stage.batch_size, nn.generator(cfg.seed, "batch", k))
            batch = images[idx]
            l_s = l_simple(batch, encoder, denoiser, sched, nn.generator(cfg.seed, "diffusion", k))
            if g > 0:
                ggen = nn.generator(cfg.seed, "group", k)
                anchors = [tuples[int(i)] for i in
                           _batch_indices(len(tuples), stage.groups_per_step, ggen)]
                group_samples = [ds.sample_group(a, ggen) for a in anchors]
                needed = sorted(
                    {a for a in anchors}
                    | {c for gs in group_samples for c in gs.companions.values()},
                    key=ds.tuple_index,
                )
                imgs = torch.stack([images[ds.tuple_index(t)] for t in needed])
                z = encoder(imgs)
                zmap = {t: z[i] for i, t in enumerate(needed)}
                groups = [
                    LatentGroup(anchor=zmap[gs.anchor],
                                companions={a: zmap[c] for a, c in gs.companions.items()})
                    for gs in group_samples
                ]
                # the cycle loss draws donors without replacement, so give it
                # every code encoded this step (anchors and companions alike)
                batch_z = z
                l_d, parts = loss_dis(groups, batch_z, gae, gcfg, nn.generator(cfg.seed, "donor", k))
                loss = l_s + g * l_d
            else:
                parts = {"l_r": 0.0, "l_ss": 0.0, "l_ur": 0.0}
                loss = l_s
            _check_finite(loss, k)
            _zero_grads(store)
            loss.backward()
            nn.adam_step(store, _grads(store), stage.lr)
            log.writerow(
                [store.step_count, f"{float(l_s.detach()):.6f}", f"{parts['l_r']:.6f}",
                 f"{parts['l_ss']:.6f}", f"{parts['l_ur']:.6f}", f"{float(loss.detach()):.6f}"]
            )
            if store.step_count % stage.save_every == 0:
                save()
    finally:
        log_f.close()
    save()
    return ckpt
