"""Command-line entry point.

Subcommands: dataset, train, swap, recombine, interpolate, eval. Every command
is reproducible from (config, seed). Exit codes: 0 success, 1 usage error,
2 missing prerequisite, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

import torch

from . import config as config_mod
from . import dataset as ds
from . import evaluate, images, reports, training
from .config import ConfigError
from .pipeline import Pipeline
from .training import MissingPrerequisite, NumericsError


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2; usage errors are 1 here
        raise UsageError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="dgae", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, ckpt=False):
        sp.add_argument("--config", required=True, help="experiment config JSON")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--out", default="runs", help="output directory")
        sp.add_argument("--T-sample", type=int, default=None, dest="t_sample",
                        help="sampling ladder length (default from config, 100)")
        if ckpt:
            sp.add_argument("--ckpt", default=None, help="checkpoint (default <out>/joint.ckpt)")

    sp = sub.add_parser("dataset", help="render the full grid to PNGs plus a manifest")
    common(sp)

    sp = sub.add_parser("train", help="run one training stage")
    common(sp)
    sp.add_argument("stage", choices=["pretrain", "refine", "joint"])
    sp.add_argument("--steps", type=int, default=None, help="override the stage step budget")
    sp.add_argument("--resume", action="store_true", help="continue from the stage checkpoint")
    sp.add_argument("--gamma", type=float, default=None, help="joint-stage disentanglement weight")
    sp.add_argument("--from-scratch", action="store_true",
                    help="joint training without the staged checkpoints (unsupported; unstable)")

    sp = sub.add_parser("swap", help="replace one attribute of image A with image B's")
    common(sp, ckpt=True)
    sp.add_argument("--image-a", required=True)
    sp.add_argument("--image-b", required=True)
    sp.add_argument("--attr", required=True)

    sp = sub.add_parser("recombine", help="generate from per-attribute donor images")
    common(sp, ckpt=True)
    sp.add_argument("--donor", action="append", default=[], metavar="ATTR=PNG",
                    help="one donor image per attribute")

    sp = sub.add_parser("interpolate", help="latent interpolation between two images")
    common(sp, ckpt=True)
    sp.add_argument("--image-a", required=True)
    sp.add_argument("--image-b", required=True)
    sp.add_argument("--alphas", type=int, default=7, help="number of interior frames")
    sp.add_argument("--mode", choices=["single", "multi"], default="multi")
    sp.add_argument("--attr", default=None)

    sp = sub.add_parser("eval", help="metrics CSVs and report figures")
    common(sp, ckpt=True)
    sp.add_argument("--pairs", type=int, default=8, help="image pairs for PPL / reconstruction")
    return p


def _load(args) -> config_mod.ExperimentConfig:
    path = Path(args.config)
    if not path.exists():
        raise MissingPrerequisite(f"config file not found: {path}")
    cfg = config_mod.load(path)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.t_sample is not None:
        cfg.sample_steps = args.t_sample
    return cfg


def _pipeline(cfg, args) -> Pipeline:
    ckpt = Path(args.ckpt) if args.ckpt else Path(args.out) / "joint.ckpt"
    if not ckpt.exists():
        raise MissingPrerequisite(f"missing checkpoint: {ckpt} (train first)")
    return Pipeline.from_checkpoint(cfg, ckpt)


def cmd_dataset(cfg, args) -> None:
    out = Path(args.out) / "dataset"
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "manifest.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["index", "identity", "background", "pose", "file"])
        for t in ds.all_tuples():
            name = f"id{t.identity}_bg{t.background}_pose{t.pose}.png"
            images.save_png(out / name, ds.render(t, cfg.resolution))
            w.writerow([ds.tuple_index(t), t.identity, t.background, t.pose, name])
    print(f"wrote 480 images and manifest to {out}")


def cmd_train(cfg, args) -> None:
    out = Path(args.out)
    if args.stage == "pretrain":
        resume = str(out / "pretrain.ckpt") if args.resume else None
        ckpt = training.pretrain(cfg, out, steps=args.steps, resume=resume)
        reports.loss_curve_figure(out / "pretrain_log.csv", out / "pretrain_loss.png")
    elif args.stage == "refine":
        ckpt = training.refine_gae(cfg, out / "pretrain.ckpt", out, steps=args.steps)
        reports.loss_curve_figure(out / "refine_log.csv", out / "refine_loss.png")
    else:
        scratch = None
        if args.from_scratch:
            scratch = training.pretrain(cfg, out / "scratch", steps=0)
            training.refine_gae(cfg, scratch, out / "scratch", steps=0)
            scratch = out / "scratch" / "refine.ckpt"
        ckpt = training.finetune_joint(cfg, out / "refine.ckpt", out, steps=args.steps,
                                       gamma=args.gamma, from_scratch_ckpt=scratch)
        reports.loss_curve_figure(out / "joint_log.csv", out / "joint_loss.png")
    print(f"stage {args.stage} complete: {ckpt}")


def cmd_swap(cfg, args) -> None:
    pipe = _pipeline(cfg, args)
    if args.attr not in cfg.layout.names:
        raise UsageError(f"unknown attribute {args.attr!r}; layout has {cfg.layout.names}")
    a = images.load_png(args.image_a)
    b = images.load_png(args.image_b)
    donors = {attr: (b if attr == args.attr else a) for attr in cfg.layout.names}
    out_img = pipe.manipulate(donors, noise="inferred", seed=cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    images.save_png(out / "swap.png", images.tile_grid([[a, b, out_img]]))
    print(f"wrote {out / 'swap.png'}")


def cmd_recombine(cfg, args) -> None:
    pipe = _pipeline(cfg, args)
    donors = {}
    for spec in args.donor:
        if "=" not in spec:
            raise UsageError(f"--donor expects ATTR=PNG, got {spec!r}")
        attr, path = spec.split("=", 1)
        if attr not in cfg.layout.names:
            raise UsageError(f"unknown attribute {attr!r}; layout has {cfg.layout.names}")
        donors[attr] = images.load_png(path)
    missing = set(cfg.layout.names) - set(donors)
    if missing:
        raise UsageError(f"missing donors for: {sorted(missing)}")
    out_img = pipe.manipulate(donors, noise="random", seed=cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    row = [donors[attr] for attr in cfg.layout.names] + [out_img]
    images.save_png(out / "recombine.png", images.tile_grid([row]))
    print(f"wrote {out / 'recombine.png'}")


def cmd_interpolate(cfg, args) -> None:
    pipe = _pipeline(cfg, args)
    if args.mode == "single" and args.attr not in cfg.layout.names:
        raise UsageError("single-attribute mode needs --attr from the layout")
    a = images.load_png(args.image_a)
    b = images.load_png(args.image_b)
    alphas = [(i + 1) / (args.alphas + 1) for i in range(args.alphas)]
    frames = evaluate.interpolate(pipe, a, b, alphas, mode=args.mode, attr=args.attr)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    images.save_png(out / "interpolate.png", images.tile_grid([[a, *frames, b]]))
    print(f"wrote {out / 'interpolate.png'} ({len(frames) + 2} tiles)")


def cmd_eval(cfg, args) -> None:
    pipe = _pipeline(cfg, args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid = ds.enumerate_dataset(cfg.resolution)
    latents = {t: pipe.encode(img.unsqueeze(0))[0] for t, img in grid}

    matrix = evaluate.perplexity_matrix(latents, pipe.gae, cfg.layout, split_seed=cfg.seed)
    with open(out / "perplexity.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["partition", "attribute", "accuracy"])
        for i, part in enumerate(cfg.layout.names):
            for j, attr in enumerate(cfg.layout.names):
                w.writerow([part, attr, f"{matrix[i, j]:.4f}"])
    reports.perplexity_figure(matrix, list(cfg.layout.names), out / "perplexity.png")

    gen = torch.Generator().manual_seed(cfg.seed)
    idx = torch.randperm(len(grid), generator=gen)[: 2 * args.pairs]
    imgs = [grid[int(i)][1] for i in idx]
    pairs = list(zip(imgs[: args.pairs], imgs[args.pairs :]))
    recon = [(img, pipe.reconstruct(img.unsqueeze(0))[0]) for img in imgs[: args.pairs]]
    mse, ssim_v = evaluate.recon_metrics(recon)
    ladders = [t for t in (10, 50, 100) if t <= pipe.sched.T] or [pipe.sched.T]
    ppls = [evaluate.ppl_model(pipe, pairs, n_steps=t, seed=cfg.seed) for t in ladders]
    with open(out / "metrics.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["metric", "value"])
        w.writerow(["mse", f"{mse:.6g}"])
        w.writerow(["ssim", f"{ssim_v:.6g}"])
        w.writerow(["fid", "not computed"])
        w.writerow(["lpips", "not computed"])
        for t, v in zip(ladders, ppls):
            w.writerow([f"ppl_T{t}", f"{v:.6g}"])
    reports.ppl_figure(ladders, ppls, out / "ppl.png")
    print(f"wrote {out / 'perplexity.csv'}, {out / 'metrics.csv'} and figures")


def main(argv=None) -> int:
    threads = os.environ.get("DGAE_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _load(args)
        handler = {
            "dataset": cmd_dataset,
            "train": cmd_train,
            "swap": cmd_swap,
            "recombine": cmd_recombine,
            "interpolate": cmd_interpolate,
            "eval": cmd_eval,
        }[args.command]
        handler(cfg, args)
        return 0
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (MissingPrerequisite, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericsError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
