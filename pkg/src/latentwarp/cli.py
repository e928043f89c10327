"""Command-line entry points. Every subcommand is a thin wrapper over the
library; state moves between commands through checkpoint bundles and config
files."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, TrainConfig, load_config
from .data import SceneSampler
from .encoders import train_base_encoder
from .evalprotocols import (eval_edit_attribute, eval_edit_pose,
                            eval_reconstruction, load_dataset, load_png,
                            make_dataset, measure_runtime, save_png)
from .flowwarp import FlowOracleConfig, flow_to_color, pseudo_gt_flow, write_flo
from .generator import load_generator_bundle, pretrain_toy_generator
from .latent import load_direction
from .metrics import DiscriminatorEmbedding
from .pipeline import build_pipeline, load_pipeline, save_pipeline
from .training import Trainer


def _load_cfg(args) -> TrainConfig:
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    else:
        cfg = TrainConfig()
    if getattr(args, "seed", None) is not None:
        import dataclasses as dc
        cfg = dc.replace(cfg, seed=args.seed)
    return cfg


def _base_models(args, cfg: TrainConfig):
    path = args.generator or cfg.paths.base_checkpoint
    if not path:
        raise SystemExit("no generator bundle: pass --generator or set "
                         "paths.base_checkpoint in the config")
    return load_generator_bundle(path)


# -- subcommand bodies -------------------------------------------------------


def cmd_pretrain_generator(args) -> int:
    cfg = _load_cfg(args)
    pretrain_toy_generator(cfg.model, args.out, mode=args.mode,
                           steps=args.steps, seed=cfg.seed)
    print(f"wrote generator bundle: {args.out}")
    return 0


def cmd_train_e0(args) -> int:
    cfg = _load_cfg(args)
    mcfg, mapping, generator, disc = _base_models(args, cfg)
    sampler = SceneSampler(generator, mapping, cfg.data)

    def sample_images(rng, image, w):
        n = image.shape[0]
        from .data import render_detail_blobs, sample_detail_blobs
        out = []
        for i in range(n):
            blobs = sample_detail_blobs(rng, cfg.data, mcfg.image_size)
            out.append((image[i] + render_detail_blobs(blobs, mcfg.image_size))
                       .clamp(-1, 1))
        return torch.stack(out)

    e0 = train_base_encoder(generator, mapping, mcfg, steps=args.steps,
                            seed=cfg.seed, sample_images=sample_images)
    pipe = build_pipeline(mcfg, mapping, generator, disc, e0, seed=cfg.seed)
    save_pipeline(args.out, pipe)
    print(f"wrote inversion bundle: {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    pipe = load_pipeline(args.bundle)
    sampler = SceneSampler(pipe.generator, pipe.mapping, cfg.data)
    out_dir = Path(args.out)
    trainer = Trainer(pipe, cfg, sampler, out_dir=out_dir)
    if args.resume:
        trainer.load(args.resume)
    steps = args.steps if args.steps is not None else cfg.schedule.total_steps
    trainer.run(total_steps=steps,
                log_fn=lambda rec: print(
                    f"step {rec['step']:6d} total={rec['total']:.4f} "
                    f"lr={rec['lr']:.2e} path={rec['path']}"))
    save_pipeline(out_dir / "trained.ckpt", pipe)
    trainer.save(out_dir / "trainer_final.ckpt")
    print(f"wrote {out_dir / 'trained.ckpt'}")
    return 0


def cmd_invert(args) -> int:
    pipe = load_pipeline(args.bundle)
    x = load_png(args.image)
    out = pipe.reconstruct(x)
    save_png(out, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_edit(args) -> int:
    pipe = load_pipeline(args.bundle)
    x = load_png(args.image)
    direction = load_direction(args.direction)
    strength = args.strength if args.strength is not None else direction.default_strength
    out = pipe.edit_image(x, direction, strength)
    save_png(out, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_eval_recon(args) -> int:
    pipe = load_pipeline(args.bundle)
    ds = load_dataset(args.dataset)
    report = eval_reconstruction(pipe, ds.images[:args.limit])
    report.save(args.out)
    print(f"wrote {args.out}")
    for k in sorted(report.values):
        print(f"  {k}={report.values[k]:.6g}")
    return 0


def cmd_eval_edit(args) -> int:
    pipe = load_pipeline(args.bundle)
    ds = load_dataset(args.dataset)
    direction = load_direction(args.direction)
    embedding = DiscriminatorEmbedding(pipe.discriminator)
    strength = args.strength if args.strength is not None else direction.default_strength
    if args.attribute:
        report = eval_edit_attribute(pipe, ds, args.attribute, direction,
                                     strength, embedding)
    else:
        report = eval_edit_pose(pipe, ds.images[:args.limit], direction,
                                strength, embedding)
    report.save(args.out)
    print(f"wrote {args.out}")
    for k in sorted(report.values):
        print(f"  {k}={report.values[k]:.6g}")
    return 0


def cmd_flow(args) -> int:
    a = load_png(args.image_a)
    b = load_png(args.image_b)
    flow = pseudo_gt_flow(a, b, FlowOracleConfig())
    write_flo(flow, args.out)
    if args.color:
        from PIL import Image
        Image.fromarray(flow_to_color(flow)).save(args.color, format="PNG")
    print(f"wrote {args.out}")
    return 0


def cmd_runtime(args) -> int:
    pipe = load_pipeline(args.bundle)
    ds = load_dataset(args.dataset)
    report = measure_runtime(pipe, ds.images[:args.limit])
    report.save(args.out)
    print(f"seconds_per_image={report.values['seconds_per_image']:.6g}")
    return 0


def cmd_make_dataset(args) -> int:
    cfg = _load_cfg(args)
    mcfg, mapping, generator, _ = _base_models(args, cfg)
    from .evalprotocols import save_dataset
    ds = make_dataset(generator, mapping, cfg.data, args.n, seed=cfg.seed)
    save_dataset(ds, args.out)
    print(f"wrote {args.n} images to {args.out}")
    return 0


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latentwarp",
        description="GAN-inversion pipeline with warped residual features")
    sub = parser.add_subparsers(dest="command", metavar="command")

    def add(name, fn, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.set_defaults(fn=fn)
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        return p

    p = add("pretrain-generator", cmd_pretrain_generator,
            help="create the frozen generator bundle")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["procedural", "gan"], default="procedural")
    p.add_argument("--steps", type=int, default=2000)

    p = add("train-e0", cmd_train_e0, help="fit and freeze the base encoder")
    p.add_argument("--generator", help="generator bundle path")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=1200)

    p = add("train", cmd_train, help="train the residual/warp/refine stack")
    p.add_argument("--bundle", required=True, help="inversion bundle to start from")
    p.add_argument("--out", required=True, help="output run directory")
    p.add_argument("--steps", type=int)
    p.add_argument("--resume", help="trainer state checkpoint to resume from")

    p = add("invert", cmd_invert, help="invert and reconstruct one image")
    p.add_argument("--bundle", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)

    p = add("edit", cmd_edit, help="apply a latent edit direction to one image")
    p.add_argument("--bundle", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--direction", required=True, help="direction file")
    p.add_argument("--strength", type=float)
    p.add_argument("--out", required=True)

    p = add("eval-recon", cmd_eval_recon, help="reconstruction metrics on a dataset")
    p.add_argument("--bundle", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--limit", type=int, default=64)
    p.add_argument("--out", required=True)

    p = add("eval-edit", cmd_eval_edit, help="editing metrics on a dataset")
    p.add_argument("--bundle", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--direction", required=True)
    p.add_argument("--attribute", help="attribute column for the one-sided protocol")
    p.add_argument("--strength", type=float)
    p.add_argument("--limit", type=int, default=32)
    p.add_argument("--out", required=True)

    p = add("flow", cmd_flow, help="block-matching flow between two images")
    p.add_argument("--image-a", required=True)
    p.add_argument("--image-b", required=True)
    p.add_argument("--out", required=True, help=".flo output path")
    p.add_argument("--color", help="optional color-wheel PNG")

    p = add("runtime", cmd_runtime, help="per-image inversion latency")
    p.add_argument("--bundle", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--limit", type=int, default=16)
    p.add_argument("--out", required=True)

    p = add("make-dataset", cmd_make_dataset, help="emit a labeled PNG dataset")
    p.add_argument("--generator", help="generator bundle path")
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--out", required=True)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "fn", None):
        parser.print_usage(sys.stderr)
        return 2
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
