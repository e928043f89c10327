"""Procedural dataset: style-code renders plus per-image fine detail blobs.

Detail blobs are drawn from nuisance parameters outside the style code, so
the style pathway alone can never reproduce them; they are exactly the
high-rate content the residual pathway must carry, and under a known
translation edit their ground-truth displacement is known in closed form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .config import DataConfig


@dataclass(frozen=True)
class DetailBlob:
    cx: float      # pixels
    cy: float
    sigma: float   # pixels
    color: tuple   # RGB amplitudes in [-1, 1]


def sample_detail_blobs(rng: np.random.Generator, cfg: DataConfig,
                        image_size: int):
    blobs = []
    for _ in range(cfg.n_detail_blobs):
        cx = float(rng.uniform(0.18, 0.82) * (image_size - 1))
        cy = float(rng.uniform(0.18, 0.82) * (image_size - 1))
        sigma = float(cfg.detail_sigma_px * rng.uniform(0.8, 1.3))
        color = tuple(float(c) for c in
                      rng.choice([-1.0, 1.0], size=3) * rng.uniform(0.6, 1.0, size=3)
                      * cfg.detail_amplitude)
        blobs.append(DetailBlob(cx, cy, sigma, color))
    return blobs


def render_detail_blobs(blobs, image_size: int, offset_px=(0.0, 0.0)) -> torch.Tensor:
    ys, xs = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    canvas = np.zeros((3, image_size, image_size))
    for b in blobs:
        g = np.exp(-(((xs - (b.cx + offset_px[0])) ** 2
                      + (ys - (b.cy + offset_px[1])) ** 2) / (2.0 * b.sigma ** 2)))
        for c in range(3):
            canvas[c] += b.color[c] * g
    return torch.from_numpy(canvas.astype(np.float32))


class SceneSampler:
    """Draws dataset images: generator render from a mapped code, plus
    detail blobs composited in image space."""

    def __init__(self, generator, mapping, data_cfg: DataConfig):
        self.generator = generator
        self.mapping = mapping
        self.data_cfg = data_cfg
        self.image_size = generator.cfg.image_size

    def sample(self, rng: np.random.Generator, n: int):
        """Returns (images (n,3,H,W), codes (n,L,D), per-image detail blobs)."""
        z = torch.from_numpy(
            rng.standard_normal((n, self.mapping.z_dim)).astype(np.float32))
        with torch.no_grad():
            w = self.mapping(z)
            base, _ = self.generator(w)
        details = [sample_detail_blobs(rng, self.data_cfg, self.image_size)
                   for _ in range(n)]
        imgs = torch.stack([
            (base[i] + render_detail_blobs(details[i], self.image_size)).clamp(-1, 1)
            for i in range(n)])
        return imgs, w, details

    def compose(self, w, details, offset_px=(0.0, 0.0)) -> torch.Tensor:
        """Ground-truth image for a (possibly edited) code with the detail
        blobs shifted by a known pixel offset."""
        with torch.no_grad():
            base, _ = self.generator(w[None] if w.ndim == 2 else w)
        img = base[0] + render_detail_blobs(details, self.image_size, offset_px)
        return img.clamp(-1, 1)
