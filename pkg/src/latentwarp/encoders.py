"""The three encoders: base inversion encoder, residual detector, refiner.

The base encoder maps an image to high-rate features plus the per-layer
style code. The residual detector compares those features against the
generator's own mid-level features and outputs the residual features that
the style pathway cannot carry. The refiner fuses warped residuals with the
edited generator features before injection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelConfig


@dataclass
class BaseEncoding:
    f0: torch.Tensor   # (C, H, W) high-rate features at the injection resolution
    w: torch.Tensor    # (L, D) style code


class ResBlock(nn.Module):
    """Two 3x3 convs with a leaky ReLU between, plus an identity skip."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        h = self.conv2(F.leaky_relu(self.conv1(x), 0.2))
        return x + h


class BaseEncoder(nn.Module):
    """Image -> (high-rate features, per-layer style code)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        C = cfg.channels
        self.stem = nn.Sequential(
            nn.Conv2d(3, 32, 3, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(32, C, 3, padding=1), nn.LeakyReLU(0.2),
        )
        self.f0_head = nn.Conv2d(C, C, 3, padding=1)
        self.down = nn.Sequential(
            nn.Conv2d(C, 48, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(48, 64, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(64, 64, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
        )
        flat = 64 * (cfg.image_size // 8) ** 2
        self.fc = nn.Sequential(
            nn.Linear(flat, 256), nn.LeakyReLU(0.2),
            nn.Linear(256, cfg.latent_layers * cfg.latent_dim),
        )

    def forward(self, x: torch.Tensor):
        if x.shape[-3:] != (3, self.cfg.image_size, self.cfg.image_size):
            raise ValueError(f"expected (*, 3, {self.cfg.image_size}, "
                             f"{self.cfg.image_size}) images, got {tuple(x.shape)}")
        h = self.stem(x)
        f0 = self.f0_head(h)
        w = self.fc(self.down(h).flatten(1))
        w = w.reshape(-1, self.cfg.latent_layers, self.cfg.latent_dim)
        return f0, w

    def encode(self, x: torch.Tensor) -> BaseEncoding:
        with torch.no_grad():
            f0, w = self.forward(x[None])
        return BaseEncoding(f0=f0[0], w=w[0])


class ResidualDetector(nn.Module):
    """Encoder-decoder over the concatenated base/generator features.

    3 stride-2 downsampling residual stages, 3 nearest-neighbor upsampling
    stages with concatenated encoder skips, constant trunk width, an
    additive input-to-output skip through a 1x1 projection, and a final
    3x3 projection. Zeroing the final projection reduces the module to the
    input skip path.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        C = cfg.channels
        self.in_proj = nn.Conv2d(2 * C, C, 1)
        self.enc_blocks = nn.ModuleList([ResBlock(C) for _ in range(3)])
        self.downs = nn.ModuleList(
            [nn.Conv2d(C, C, 3, stride=2, padding=1) for _ in range(3)])
        self.mid = ResBlock(C)
        self.up_convs = nn.ModuleList(
            [nn.Conv2d(C, C, 3, padding=1) for _ in range(3)])
        self.fuses = nn.ModuleList([nn.Conv2d(2 * C, C, 1) for _ in range(3)])
        self.dec_blocks = nn.ModuleList([ResBlock(C) for _ in range(3)])
        self.out_proj = nn.Conv2d(C, C, 3, padding=1)
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)

    def forward(self, f0: torch.Tensor, f_g: torch.Tensor) -> torch.Tensor:
        if f0.shape[-2:] != f_g.shape[-2:]:
            raise ValueError(f"resolution mismatch: {tuple(f0.shape)} vs {tuple(f_g.shape)}")
        x = torch.cat([f0, f_g], dim=-3)
        single = x.ndim == 3
        if single:
            x = x[None]
        skip = self.in_proj(x)
        h = skip
        enc = []
        for block, down in zip(self.enc_blocks, self.downs):
            h = block(h)
            enc.append(h)
            h = F.leaky_relu(down(h), 0.2)
        h = self.mid(h)
        for up, fuse, block, skip_h in zip(self.up_convs, self.fuses,
                                           self.dec_blocks, reversed(enc)):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = F.leaky_relu(up(h), 0.2)
            h = fuse(torch.cat([h, skip_h], dim=1))
            h = block(h)
        out = skip + self.out_proj(h)
        return out[0] if single else out


class Refiner(nn.Module):
    """Flat fusion of warped residuals with edited generator features.

    Each input passes a 3x3 conv halving its channels before concatenation;
    the trunk is 4 residual blocks at constant width with no resampling,
    followed by a final 3x3 projection (no input bypass).
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        C = cfg.channels
        self.half_wa = nn.Conv2d(C, C // 2, 3, padding=1)
        self.half_e = nn.Conv2d(C, C // 2, 3, padding=1)
        self.trunk = nn.Sequential(*[ResBlock(C) for _ in range(4)])
        self.final = nn.Conv2d(C, C, 3, padding=1)
        nn.init.zeros_(self.final.weight)
        nn.init.zeros_(self.final.bias)

    def forward(self, f_wa: torch.Tensor, f_e: torch.Tensor) -> torch.Tensor:
        if f_wa.shape[-2:] != f_e.shape[-2:]:
            raise ValueError(f"resolution mismatch: {tuple(f_wa.shape)} vs {tuple(f_e.shape)}")
        single = f_wa.ndim == 3
        if single:
            f_wa, f_e = f_wa[None], f_e[None]
        h = torch.cat([F.leaky_relu(self.half_wa(f_wa), 0.2),
                       F.leaky_relu(self.half_e(f_e), 0.2)], dim=1)
        out = self.final(self.trunk(h))
        return out[0] if single else out


def train_base_encoder(generator, mapping, cfg: ModelConfig, steps: int = 1200,
                       batch_size: int = 8, lr: float = 1e-3,
                       seed: int = 0, sample_images=None,
                       image_loss_weight: float = 0.2) -> BaseEncoder:
    """Fit the base encoder by style-code regression on synthesized pairs,
    with a small image-reconstruction term through the frozen generator.
    The encoder is frozen on return, mirroring a pretrained-inverter setup."""
    rng = np.random.Generator(np.random.PCG64(seed + 31))
    torch.manual_seed(seed + 31)
    enc = BaseEncoder(cfg)
    opt = torch.optim.Adam(enc.parameters(), lr=lr)
    for step in range(steps):
        z = torch.from_numpy(rng.standard_normal((batch_size, cfg.z_dim)).astype(np.float32))
        with torch.no_grad():
            w = mapping(z)
            image, _ = generator(w)
        if sample_images is not None:
            image = sample_images(rng, image, w)
        _, w_hat = enc(image)
        loss = F.mse_loss(w_hat, w)
        if image_loss_weight > 0:
            recon, _ = generator(w_hat)
            loss = loss + image_loss_weight * F.mse_loss(recon, image)
        if not torch.isfinite(loss):
            raise RuntimeError(f"base encoder training diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
    for p in enc.parameters():
        p.grad = None
        p.requires_grad_(False)
    enc.eval()
    return enc
