"""Toy style-based generators with mid-level feature taps and a residual
injection point at the finest tap, plus the adversarial discriminator.

Two substrates share one interface:

* ProceduralGenerator -- a differentiable analytic renderer. Each style layer
  controls one Gaussian blob (position, size, amplitude, channel signature);
  blobs are composited coarse to fine and the intermediate composition
  buffers are the feature taps. Latent edits therefore produce ground-truth
  known spatial motion. Frozen by construction.
* ConvStyleGenerator -- a small trainable convolutional style generator for
  adversarial pretraining, behind the same tap/injection contract.

The finest tap ("r64") is the feature actually summed with injected
residuals before the image head.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelConfig, TAP_KEYS
from .latent import EditDirection, LatentCode, MappingNetwork, _codes

# Style vector slice assignment used by the procedural substrate.
_IX, _IY, _ISIZE, _IAMP = 0, 1, 2, 3
_SIG_OFFSET = 4

# Normalized canvas units moved per unit of the position coordinate.
POSITION_SCALE = 0.25

# Layer index whose blob drives the "raised" attribute.
RAISE_LAYER = 6


@dataclass
class GeneratorTaps:
    image: torch.Tensor          # (3, H, W) in [-1, 1]
    taps: dict                   # TAP_KEYS -> (C, h, h)


def _grid(res: int, dtype, device):
    xs = torch.linspace(-1.0, 1.0, res, dtype=dtype, device=device)
    return xs.view(1, 1, res), xs.view(1, res, 1)  # broadcast as X, Y


class ProceduralGenerator(nn.Module):
    """Analytic blob renderer; all weights are seeded frozen buffers."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        L, D, C = cfg.latent_layers, cfg.latent_dim, cfg.channels
        if D < _SIG_OFFSET + 1:
            raise ValueError("latent_dim too small for blob parameterization")
        gen = torch.Generator().manual_seed(cfg.seed + 101)

        # coarse->fine stage per layer: first 3 layers at the coarse tap,
        # next 3 at the middle tap, the rest at the fine tap
        stages = [0] * 3 + [1] * 3 + [2] * (L - 6) if L >= 7 else [min(i, 2) for i in range(L)]
        self.stage_of_layer = stages
        self.base_sigma = (0.35, 0.18, 0.09)

        sig_dim = D - _SIG_OFFSET
        self.register_buffer("sig_proj", torch.randn(L, C, sig_dim, generator=gen) / np.sqrt(sig_dim))
        self.register_buffer("sig_base", 0.5 * torch.randn(L, C, generator=gen))

        self.head = nn.Sequential(
            nn.Conv2d(C, 32, 3, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(32, 3, 3, padding=1),
        )
        for m in self.head:
            if isinstance(m, nn.Conv2d):
                nn.init.normal_(m.weight, std=1.0 / np.sqrt(m.in_channels * 9), generator=gen)
                nn.init.zeros_(m.bias)
        # calibrate pre-tanh contrast on a probe batch
        with torch.no_grad():
            w = torch.randn(8, L, D, generator=gen)
            pre = self.head(self._render(w)[-1])
            gain = 1.0 / pre.std().clamp_min(1e-6)
            self.head[2].weight.mul_(gain)
        for p in self.parameters():
            p.requires_grad_(False)

    @property
    def channels(self) -> int:
        return self.cfg.channels

    def _render(self, w: torch.Tensor):
        """Return the composition buffers at the three tap resolutions."""
        B = w.shape[0]
        dtype, device = w.dtype, w.device
        buffers = []
        canvas = None
        for stage, res in enumerate(self.cfg.tap_resolutions):
            if canvas is None:
                canvas = torch.zeros(B, self.cfg.channels, res, res, dtype=dtype, device=device)
            else:
                canvas = F.interpolate(canvas, size=(res, res), mode="bilinear",
                                       align_corners=True)
            X, Y = _grid(res, dtype, device)
            for i, s in enumerate(self.stage_of_layer):
                if s != stage:
                    continue
                cx = (POSITION_SCALE * w[:, i, _IX]).view(B, 1, 1)
                cy = (POSITION_SCALE * w[:, i, _IY]).view(B, 1, 1)
                sigma = (self.base_sigma[s] * (0.6 + 0.8 * torch.sigmoid(w[:, i, _ISIZE]))).view(B, 1, 1)
                amp = (1.0 + 0.5 * torch.tanh(w[:, i, _IAMP])).view(B, 1, 1)
                g = amp * torch.exp(-((X - cx) ** 2 + (Y - cy) ** 2) / (2.0 * sigma ** 2))
                sig = self.sig_base[i] + torch.einsum("cd,bd->bc", self.sig_proj[i],
                                                      w[:, i, _SIG_OFFSET:])
                canvas = canvas + sig[:, :, None, None] * g[:, None, :, :]
            buffers.append(canvas)
        return buffers

    def forward(self, w: torch.Tensor, inject: torch.Tensor | None = None):
        """Batched synthesis. Returns (image, taps dict of batched buffers)."""
        if w.ndim != 3 or w.shape[1:] != (self.cfg.latent_layers, self.cfg.latent_dim):
            raise ValueError(f"style batch must be (B, {self.cfg.latent_layers}, "
                             f"{self.cfg.latent_dim}), got {tuple(w.shape)}")
        buffers = self._render(w)
        feat = buffers[-1]
        if inject is not None:
            if inject.shape != feat.shape:
                raise ValueError(f"injection shape {tuple(inject.shape)} does not match "
                                 f"tap shape {tuple(feat.shape)}")
            feat = feat + inject
        image = torch.tanh(self.head(feat))
        return image, dict(zip(TAP_KEYS, buffers))

    def synthesize(self, w) -> GeneratorTaps:
        codes = _codes(w)
        with torch.no_grad():
            image, taps = self.forward(codes[None])
        return GeneratorTaps(image=image[0], taps={k: v[0] for k, v in taps.items()})

    def synthesize_with_injection(self, w, f: torch.Tensor) -> torch.Tensor:
        codes = _codes(w)
        with torch.no_grad():
            image, _ = self.forward(codes[None], inject=f[None])
        return image[0]

    # -- analytic readouts --------------------------------------------------

    def blob_centers_px(self, w) -> torch.Tensor:
        """Blob centers in pixel coordinates of the output image, (L, 2) as (x, y)."""
        codes = _codes(w)
        half = (self.cfg.image_size - 1) / 2.0
        cx = POSITION_SCALE * codes[..., _IX] * half + half
        cy = POSITION_SCALE * codes[..., _IY] * half + half
        return torch.stack([cx, cy], dim=-1)

    def shift_px(self, strength: float) -> float:
        """Pixel translation produced by the 'shift' direction at a given strength."""
        return strength * POSITION_SCALE * (self.cfg.image_size - 1) / 2.0

    def attribute_direction(self, name: str) -> EditDirection:
        D = self.cfg.latent_dim
        if name == "shift":
            d = torch.zeros(1, D)
            d[0, _IX] = 1.0
            return EditDirection(direction=d, name="shift", default_strength=0.5,
                                 broadcast=True)
        if name == "raise":
            d = torch.zeros(self.cfg.latent_layers, D)
            d[RAISE_LAYER, _IY] = -1.0
            return EditDirection(direction=d, name="raise", default_strength=1.0)
        raise ValueError(f"unknown attribute direction: {name}")

    def attribute_label(self, w, name: str) -> bool:
        codes = _codes(w)
        if name == "raised":
            return bool(codes[RAISE_LAYER, _IY] < 0)
        if name == "shifted":
            return bool(codes[:, _IX].mean() > 0)
        raise ValueError(f"unknown attribute: {name}")


class _StyleBlock(nn.Module):
    """Conv + per-channel style modulation; one style layer per block."""

    def __init__(self, c_in, c_out, latent_dim):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.style = nn.Linear(latent_dim, 2 * c_out)

    def forward(self, x, w_layer):
        h = self.conv(x)
        scale, shift = self.style(w_layer).chunk(2, dim=-1)
        h = h * (1.0 + scale[:, :, None, None]) + shift[:, :, None, None]
        return F.leaky_relu(h, 0.2)


class ConvStyleGenerator(nn.Module):
    """Small convolutional style generator; trainable alternative substrate."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.latent_layers != 8:
            raise ValueError("conv substrate expects 8 style layers")
        self.cfg = cfg
        C = cfg.channels
        self.const = nn.Parameter(torch.randn(1, C, 4, 4))
        self.blocks = nn.ModuleList(
            [_StyleBlock(C, C, cfg.latent_dim) for _ in range(8)])
        # blocks 0-1 at 8x8, 2-3 at 16 (coarse tap), 4-5 at 32, 6-7 at 64
        self.block_res = [8, 8, 16, 16, 32, 32, 64, 64]
        self.head = nn.Sequential(
            nn.Conv2d(C, 32, 3, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(32, 3, 3, padding=1),
        )

    @property
    def channels(self) -> int:
        return self.cfg.channels

    def forward(self, w: torch.Tensor, inject: torch.Tensor | None = None):
        B = w.shape[0]
        h = self.const.expand(B, -1, -1, -1)
        taps = {}
        res = 4
        tap_res = dict(zip(self.cfg.tap_resolutions, TAP_KEYS))
        for i, block in enumerate(self.blocks):
            if self.block_res[i] != res:
                res = self.block_res[i]
                h = F.interpolate(h, size=(res, res), mode="bilinear", align_corners=True)
            h = block(h, w[:, i])
            last_of_res = i + 1 == len(self.blocks) or self.block_res[i + 1] != res
            if last_of_res and res in tap_res:
                taps[tap_res[res]] = h
        feat = taps[TAP_KEYS[-1]]
        if inject is not None:
            if inject.shape != feat.shape:
                raise ValueError("injection shape mismatch")
            feat = feat + inject
        image = torch.tanh(self.head(feat))
        return image, taps

    def synthesize(self, w) -> GeneratorTaps:
        codes = _codes(w)
        with torch.no_grad():
            image, taps = self.forward(codes[None])
        return GeneratorTaps(image=image[0], taps={k: v[0] for k, v in taps.items()})

    def synthesize_with_injection(self, w, f: torch.Tensor) -> torch.Tensor:
        codes = _codes(w)
        with torch.no_grad():
            image, _ = self.forward(codes[None], inject=f[None])
        return image[0]


class Discriminator(nn.Module):
    """Conv discriminator with a sigmoid head; also serves as the desk-scale
    feature extractor for perceptual and distribution metrics."""

    def __init__(self, image_size: int = 64, seed: int = 0):
        super().__init__()
        if image_size % 16 != 0:
            raise ValueError("image size must be divisible by 16")
        self.image_size = image_size
        gen = torch.Generator().manual_seed(seed + 202)
        self.c1 = nn.Conv2d(3, 32, 3, stride=2, padding=1)
        self.c2 = nn.Conv2d(32, 48, 3, stride=2, padding=1)
        self.c3 = nn.Conv2d(48, 64, 3, stride=2, padding=1)
        self.c4 = nn.Conv2d(64, 64, 3, stride=2, padding=1)
        self.fc = nn.Linear(64 * (image_size // 16) ** 2, 1)
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                nn.init.normal_(m.weight, std=0.05, generator=gen)
                nn.init.zeros_(m.bias)

    def _trunk(self, x):
        if x.shape[-3:] != (3, self.image_size, self.image_size):
            raise ValueError(f"expected (*, 3, {self.image_size}, {self.image_size}) "
                             f"images, got {tuple(x.shape)}")
        a1 = F.leaky_relu(self.c1(x), 0.2)
        a2 = F.leaky_relu(self.c2(a1), 0.2)
        a3 = F.leaky_relu(self.c3(a2), 0.2)
        a4 = F.leaky_relu(self.c4(a3), 0.2)
        return a1, a2, a3, a4

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Probability-like realism score in (0, 1)."""
        single = x.ndim == 3
        if single:
            x = x[None]
        *_, a4 = self._trunk(x)
        score = torch.sigmoid(self.fc(a4.flatten(1))).squeeze(-1)
        return score[0] if single else score

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Penultimate features, spatially pooled; used for Frechet-distance metrics."""
        single = x.ndim == 3
        if single:
            x = x[None]
        *_, a4 = self._trunk(x)
        feats = a4.mean(dim=(-2, -1))
        return feats[0] if single else feats

    def feature_maps(self, x: torch.Tensor):
        """Intermediate activation maps, coarse perceptual-loss plug-in."""
        single = x.ndim == 3
        if single:
            x = x[None]
        a1, a2, a3, _ = self._trunk(x)
        maps = [a1, a2, a3]
        return [m[0] for m in maps] if single else maps

    def fingerprint(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for key, t in sorted(self.state_dict().items()):
            h.update(key.encode())
            h.update(t.detach().cpu().numpy().tobytes())
        return h.hexdigest()[:16]


class TrainingDiverged(RuntimeError):
    pass


def _corrupt(x: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    """Cheap non-realistic counterparts for discriminator pretraining."""
    mode = rng.integers(3)
    if mode == 0:
        noise = torch.from_numpy(rng.standard_normal(x.shape).astype(np.float32))
        return (x + 0.6 * noise).clamp(-1, 1)
    if mode == 1:
        shifts = (int(rng.integers(8, 24)), int(rng.integers(8, 24)))
        return 0.5 * x + 0.5 * torch.roll(x, shifts=shifts, dims=(-2, -1))
    B, C, H, W = x.shape
    perm = torch.from_numpy(rng.permutation(H * W))
    return x.flatten(-2)[..., perm].reshape(B, C, H, W)


def pretrain_toy_generator(cfg: ModelConfig, out_path, mode: str = "procedural",
                           steps: int = 2000, disc_steps: int = 300,
                           batch_size: int = 8, seed: int | None = None,
                           sample_images=None):
    """Create the frozen generator bundle (mapping + generator + discriminator).

    Procedural mode performs no adversarial generator training: the analytic
    renderer is emitted as-is and the discriminator is fitted to separate
    rendered images from corrupted ones so its features are usable as a
    frozen metric extractor. GAN mode trains the conv substrate adversarially
    against procedural images.
    """
    if seed is None:
        seed = cfg.seed
    rng = np.random.Generator(np.random.PCG64(seed + 7))
    torch.manual_seed(seed + 7)

    mapping = MappingNetwork(cfg.z_dim, cfg.latent_dim, cfg.latent_layers, seed=cfg.seed)
    reference = ProceduralGenerator(cfg)
    disc = Discriminator(cfg.image_size, seed=cfg.seed)

    def real_batch(n):
        if sample_images is not None:
            return sample_images(rng, n)
        z = torch.from_numpy(rng.standard_normal((n, cfg.z_dim)).astype(np.float32))
        with torch.no_grad():
            w = mapping(z)
            image, _ = reference(w)
        return image

    if mode == "procedural":
        generator = reference
        opt = torch.optim.Adam(disc.parameters(), lr=2e-4)
        bce = nn.BCELoss()
        for _ in range(disc_steps):
            real = real_batch(batch_size)
            fake = _corrupt(real, rng)
            opt.zero_grad()
            loss = bce(disc(real), torch.ones(batch_size)) + \
                bce(disc(fake), torch.zeros(batch_size))
            if not torch.isfinite(loss):
                raise TrainingDiverged("discriminator pretraining loss is not finite")
            loss.backward()
            opt.step()
    elif mode == "gan":
        generator = ConvStyleGenerator(cfg)
        opt_g = torch.optim.Adam(generator.parameters(), lr=2e-4, betas=(0.5, 0.99))
        opt_d = torch.optim.Adam(disc.parameters(), lr=2e-4, betas=(0.5, 0.99))
        eps = 1e-6
        for step in range(steps):
            real = real_batch(batch_size)
            z = torch.from_numpy(rng.standard_normal((batch_size, cfg.z_dim)).astype(np.float32))
            w = mapping(z)
            fake, _ = generator(w)
            d_loss = -(torch.log(disc(real) + eps).mean()
                       + torch.log(1 - disc(fake.detach()) + eps).mean())
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()
            g_loss = -torch.log(disc(fake) + eps).mean()
            opt_g.zero_grad()
            g_loss.backward()
            opt_g.step()
            if not (torch.isfinite(d_loss) and torch.isfinite(g_loss)):
                raise TrainingDiverged(
                    f"adversarial pretraining diverged at step {step}: "
                    f"d={d_loss.item():.4g} g={g_loss.item():.4g}")
        for p in generator.parameters():
            p.requires_grad_(False)
    else:
        raise ValueError(f"unknown pretraining mode: {mode}")

    from .checkpoint import module_arrays, save_checkpoint
    manifest = {
        "version": 1,
        "kind": "generator_bundle",
        "substrate": mode,
        "model": dataclasses.asdict(cfg),
    }
    arrays = {}
    arrays.update(module_arrays("mapping", mapping))
    arrays.update(module_arrays("gen", generator))
    arrays.update(module_arrays("disc", disc))
    save_checkpoint(out_path, manifest, arrays)
    return mapping, generator, disc


def load_generator_bundle(path):
    from .checkpoint import load_checkpoint, load_module
    manifest, arrays = load_checkpoint(path)
    if manifest.get("kind") != "generator_bundle":
        raise ValueError("not a generator bundle checkpoint")
    cfg = ModelConfig(**manifest["model"])
    mapping = MappingNetwork(cfg.z_dim, cfg.latent_dim, cfg.latent_layers, seed=cfg.seed)
    if manifest["substrate"] == "procedural":
        generator = ProceduralGenerator(cfg)
    else:
        generator = ConvStyleGenerator(cfg)
    disc = Discriminator(cfg.image_size, seed=cfg.seed)
    load_module(mapping, "mapping", arrays)
    load_module(generator, "gen", arrays)
    load_module(disc, "disc", arrays)
    for m in (mapping, generator):
        for p in m.parameters():
            p.requires_grad_(False)
    return cfg, mapping, generator, disc
