"""Evaluation protocols: labeled procedural datasets, reconstruction and
editing metrics, report files, runtime measurement, and the ablation harness
(full model vs. no-warp vs. no-flow-supervision)."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .config import TrainConfig
from .data import SceneSampler
from .generator import Discriminator
from .latent import EditDirection, apply_direction
from .metrics import (DiscriminatorEmbedding, IdentityEmbedder,
                      frechet_distance, id_score, perceptual_distance, ssim)
from .pipeline import InversionPipeline, build_pipeline
from .training import PathKind, Trainer


# ---------------------------------------------------------------------------
# image file I/O


def image_to_uint8(img: torch.Tensor) -> np.ndarray:
    """(3, H, W) in [-1, 1] -> (H, W, 3) uint8."""
    arr = img.detach().cpu().clamp(-1, 1).numpy()
    return np.round((arr.transpose(1, 2, 0) + 1.0) * 127.5).astype(np.uint8)


def uint8_to_image(arr: np.ndarray) -> torch.Tensor:
    """(H, W, 3) uint8 -> (3, H, W) float32 in [-1, 1]."""
    x = arr.astype(np.float32) / 127.5 - 1.0
    return torch.from_numpy(x.transpose(2, 0, 1))


def save_png(img: torch.Tensor, path) -> None:
    Image.fromarray(image_to_uint8(img)).save(path, format="PNG")


def load_png(path) -> torch.Tensor:
    with Image.open(path) as im:
        return uint8_to_image(np.asarray(im.convert("RGB")))


# ---------------------------------------------------------------------------
# labeled dataset

ATTRIBUTES = ("raised", "shifted")


@dataclass
class LabeledDataset:
    images: torch.Tensor          # (N, 3, H, W)
    labels: list                  # list of dicts attribute -> bool
    codes: torch.Tensor | None = None     # (N, L, D) true codes, if synthetic
    details: list | None = None           # per-image detail blobs, if synthetic

    def __len__(self):
        return self.images.shape[0]

    def subset(self, attribute: str, value: bool) -> torch.Tensor:
        idx = [i for i, lab in enumerate(self.labels) if lab[attribute] == value]
        return self.images[idx]


def make_dataset(generator, mapping, data_cfg, n: int, seed: int) -> LabeledDataset:
    """Procedural dataset with analytic attribute labels derived from the
    true style codes."""
    sampler = SceneSampler(generator, mapping, data_cfg)
    rng = np.random.Generator(np.random.PCG64(seed))
    images, w, details = sampler.sample(rng, n)
    labels = [{a: generator.attribute_label(w[i], a) for a in ATTRIBUTES}
              for i in range(n)]
    return LabeledDataset(images=images, labels=labels, codes=w, details=details)


def save_dataset(ds: LabeledDataset, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(len(ds)):
        name = f"img_{i:05d}.png"
        save_png(ds.images[i], out / name)
        rows.append({"filename": name,
                     **{a: int(ds.labels[i][a]) for a in ATTRIBUTES}})
    with open(out / "labels.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["filename", *ATTRIBUTES])
        writer.writeheader()
        writer.writerows(rows)


def load_dataset(in_dir) -> LabeledDataset:
    src = Path(in_dir)
    manifest = src / "labels.csv"
    if not manifest.exists():
        raise FileNotFoundError(f"no labels.csv in {src}")
    images, labels = [], []
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            images.append(load_png(src / row["filename"]))
            labels.append({a: bool(int(row[a])) for a in ATTRIBUTES})
    return LabeledDataset(images=torch.stack(images), labels=labels)


# ---------------------------------------------------------------------------
# metric reports


@dataclass
class MetricReport:
    name: str
    values: dict = field(default_factory=dict)
    extractor_fingerprint: str = ""

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(f"report={self.name}\n")
            if self.extractor_fingerprint:
                fh.write(f"extractor_fingerprint={self.extractor_fingerprint}\n")
            for key in sorted(self.values):
                fh.write(f"{key}={self.values[key]!r}\n")

    @classmethod
    def load(cls, path) -> "MetricReport":
        name, fingerprint, values = "", "", {}
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line or "=" not in line:
                    continue
                key, _, raw = line.partition("=")
                if key == "report":
                    name = raw
                elif key == "extractor_fingerprint":
                    fingerprint = raw
                else:
                    values[key] = float(raw)
        return cls(name=name, values=values, extractor_fingerprint=fingerprint)


# ---------------------------------------------------------------------------
# protocols


def eval_reconstruction(pipe: InversionPipeline, images: torch.Tensor,
                        embedder=None, phi=None) -> MetricReport:
    """Per-image inversion quality averaged over the set: pixel L2,
    perceptual distance, SSIM, and identity similarity."""
    if embedder is None:
        embedder = IdentityEmbedder(seed=pipe.cfg.seed)
    l2s, percs, ssims, ids = [], [], [], []
    for i in range(images.shape[0]):
        x = images[i]
        out = pipe.reconstruct(x)
        l2s.append(torch.linalg.vector_norm(out - x).item())
        if phi is not None:
            percs.append(perceptual_distance(out, x, phi))
        ssims.append(ssim(out, x))
        ids.append(id_score(out, x, embedder))
    values = {"recon_l2": float(np.mean(l2s)), "ssim": float(np.mean(ssims)),
              "id": float(np.mean(ids)), "n": float(images.shape[0])}
    if percs:
        values["perceptual"] = float(np.mean(percs))
    return MetricReport(name="reconstruction", values=values,
                        extractor_fingerprint=getattr(embedder, "fingerprint", str)())


def eval_edit_attribute(pipe: InversionPipeline, ds: LabeledDataset,
                        attribute: str, direction: EditDirection,
                        strength: float, embedding: DiscriminatorEmbedding,
                        embedder=None) -> MetricReport:
    """Edit images lacking an attribute toward it; score realism by the
    Frechet distance between edited outputs and real attribute-positive
    images, and identity preservation against the sources."""
    if embedder is None:
        embedder = IdentityEmbedder(seed=pipe.cfg.seed)
    sources = ds.subset(attribute, False)
    targets = ds.subset(attribute, True)
    if sources.shape[0] < 2 or targets.shape[0] < 2:
        raise ValueError(f"dataset too small or one-sided for '{attribute}'")
    edited = torch.stack([pipe.edit_image(sources[i], direction, strength)
                          for i in range(sources.shape[0])])
    fd = frechet_distance(embedding(edited), embedding(targets))
    ids = [id_score(edited[i], sources[i], embedder)
           for i in range(sources.shape[0])]
    return MetricReport(
        name=f"edit_{attribute}",
        values={"fid": fd, "id": float(np.mean(ids)),
                "strength": strength, "n_sources": float(sources.shape[0]),
                "n_targets": float(targets.shape[0])},
        extractor_fingerprint=embedding.fingerprint())


def eval_edit_pose(pipe: InversionPipeline, images: torch.Tensor,
                   direction: EditDirection, strength: float,
                   embedding: DiscriminatorEmbedding,
                   embedder=None) -> MetricReport:
    """Symmetric +/- edits; realism scored against the unedited inputs.
    Negating the direction with +strength must match +direction with
    -strength (callers rely on this sign-swap contract)."""
    if embedder is None:
        embedder = IdentityEmbedder(seed=pipe.cfg.seed)
    edited_pos = torch.stack([pipe.edit_image(images[i], direction, strength)
                              for i in range(images.shape[0])])
    edited_neg = torch.stack([pipe.edit_image(images[i], direction, -strength)
                              for i in range(images.shape[0])])
    both = torch.cat([edited_pos, edited_neg])
    fd = frechet_distance(embedding(both), embedding(images))
    ids = [id_score(both[i], images[i % images.shape[0]], embedder)
           for i in range(both.shape[0])]
    return MetricReport(
        name="edit_pose",
        values={"fid": fd, "id": float(np.mean(ids)), "strength": strength,
                "n": float(images.shape[0])},
        extractor_fingerprint=embedding.fingerprint())


def measure_runtime(pipe: InversionPipeline, images: torch.Tensor,
                    warmup: int = 2) -> MetricReport:
    """Mean seconds per image for the encode + synthesize path. Warm-up
    passes are excluded from the timing."""
    n = images.shape[0]
    for i in range(min(warmup, n)):
        pipe.reconstruct(images[i])
    t0 = time.perf_counter()
    for i in range(n):
        pipe.reconstruct(images[i])
    elapsed = time.perf_counter() - t0
    return MetricReport(name="runtime",
                        values={"seconds_per_image": elapsed / n,
                                "n": float(n), "total_seconds": elapsed})


# ---------------------------------------------------------------------------
# ablation harness


VARIANTS = ("full", "no_warp", "no_flow_loss")


def train_variant(variant: str, cfg: TrainConfig, mapping, generator, disc,
                  e0, sampler, steps: int, seed: int,
                  out_dir=None) -> InversionPipeline:
    """Train one model variant from the shared frozen base models.

    full: warped residuals with flow supervision. no_warp: residuals pass
    through unwarped (no flow module). no_flow_loss: the warp path exists
    but the flow predictor is driven only by the downstream reconstruction
    losses, with no oracle supervision.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant: {variant}")
    import copy
    import dataclasses as dc
    cfg = dc.replace(cfg, seed=seed, model=dc.replace(cfg.model, seed=cfg.model.seed))
    if variant == "no_flow_loss":
        cfg = dc.replace(
            cfg,
            lambdas_no_edit=dc.replace(cfg.lambdas_no_edit, lambda_fl=0.0),
            lambdas_cycle=dc.replace(cfg.lambdas_cycle, lambda_fl=0.0))
    torch.manual_seed(seed + 977)
    pipe = InversionPipeline(cfg.model, mapping, generator, copy.deepcopy(disc),
                             e0, warp_enabled=(variant != "no_warp"))
    trainer = Trainer(pipe, cfg, sampler, out_dir=out_dir)
    trainer.run(total_steps=steps)
    return pipe


def eval_edit_fidelity(pipe: InversionPipeline, sampler: SceneSampler,
                       ds: LabeledDataset, direction: EditDirection,
                       strength: float, embedder=None) -> dict:
    """Edited-image fidelity against the exact ground truth.

    Requires a synthetic dataset carrying true codes and detail blobs: the
    ground-truth edited image is the render of the edited true code with the
    detail content translated by the known pixel offset of the edit.
    edit_l2 is the error against that ground truth; edit_id is the identity
    similarity between the *original* image and the edited output, i.e.
    identity preservation under the edit."""
    if ds.codes is None or ds.details is None:
        raise ValueError("edit-fidelity evaluation needs a synthetic dataset")
    if embedder is None:
        embedder = IdentityEmbedder(seed=pipe.cfg.seed)
    offset = (pipe.generator.shift_px(strength), 0.0) \
        if direction.name == "shift" else (0.0, 0.0)
    l2s, ids = [], []
    for i in range(len(ds)):
        x = ds.images[i]
        w_edit = apply_direction(ds.codes[i], direction, strength)
        gt = sampler.compose(w_edit, ds.details[i], offset_px=offset)
        out = pipe.edit_image(x, direction, strength)
        l2s.append(torch.linalg.vector_norm(out - gt).item())
        ids.append(id_score(x, out, embedder))
    return {"edit_l2": float(np.mean(l2s)), "edit_id": float(np.mean(ids)),
            "n": len(ds)}


def run_ablation(cfg: TrainConfig, mapping, generator, disc, e0,
                 seeds=(0, 1, 2), steps: int = 400, n_eval: int = 12,
                 strength: float = 0.6, log_fn=None) -> dict:
    """Train the three variants across seeds and compare edited-image
    fidelity on the shift edit. Returns per-seed metric dicts keyed by
    variant name."""
    sampler = SceneSampler(generator, mapping, cfg.data)
    direction = generator.attribute_direction("shift")
    results = {v: [] for v in VARIANTS}
    for seed in seeds:
        ds = make_dataset(generator, mapping, cfg.data, n_eval, seed=seed + 5000)
        for variant in VARIANTS:
            pipe = train_variant(variant, cfg, mapping, generator, disc, e0,
                                 sampler, steps=steps, seed=seed)
            metrics = eval_edit_fidelity(pipe, sampler, ds, direction, strength)
            metrics["seed"] = seed
            results[variant].append(metrics)
            if log_fn is not None:
                log_fn(variant, seed, metrics)
    return results
