"""Metric kernels: Frechet distance, windowed SSIM, perceptual distance,
identity similarity, and the desk-scale feature extractors."""

from __future__ import annotations

import hashlib

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import gaussian_filter
from torch import nn


# ---------------------------------------------------------------------------
# Frechet distance


def _sqrtm_psd(mat: np.ndarray, eps: float = 1e-10) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    vals = np.clip(vals, eps, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(feats_a, feats_b, eps: float = 1e-10) -> float:
    """Frechet distance between Gaussian fits of two feature sets.

    ||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^{1/2}), with the cross term
    computed from the symmetrized product sqrt(Sa) Sb sqrt(Sa) and eigenvalues
    clamped at eps.
    """
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("need at least 2 samples per set")
    mu_a, mu_b = a.mean(0), b.mean(0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False))
    sqrt_a = _sqrtm_psd(cov_a, eps)
    inner = sqrt_a @ cov_b @ sqrt_a
    vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    tr_cross = np.sqrt(np.clip(vals, 0.0, None)).sum()
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_cross)


# ---------------------------------------------------------------------------
# SSIM


def ssim(x: torch.Tensor, y: torch.Tensor, data_range: float = 2.0,
         sigma: float = 1.5, window: int = 11) -> float:
    """Windowed SSIM with an 11x11 Gaussian window (sigma 1.5); constants
    C1=(0.01 R)^2, C2=(0.03 R)^2 for dynamic range R. The map is averaged
    over valid windows (borders cropped) and channels."""
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    a = x.detach().cpu().numpy().astype(np.float64)
    b = y.detach().cpu().numpy().astype(np.float64)
    if a.ndim == 2:
        a, b = a[None], b[None]
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    half = window // 2

    def blur(img):
        return gaussian_filter(img, sigma, mode="nearest", truncate=half / sigma)

    vals = []
    for ch in range(a.shape[0]):
        xa, yb = a[ch], b[ch]
        mu_x, mu_y = blur(xa), blur(yb)
        xx = blur(xa * xa) - mu_x * mu_x
        yy = blur(yb * yb) - mu_y * mu_y
        xy = blur(xa * yb) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
        den = (mu_x ** 2 + mu_y ** 2 + c1) * (xx + yy + c2)
        smap = num / den
        vals.append(smap[half:-half, half:-half].mean() if smap.shape[0] > window
                    else smap.mean())
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# perceptual / identity


def identity_features(x):
    """Degenerate feature extractor: the image itself as the only layer."""
    return [x]


class DiscriminatorFeatures:
    """Perceptual plug-in backed by a frozen discriminator's conv stack."""

    def __init__(self, disc):
        import copy
        self.disc = copy.deepcopy(disc)
        for p in self.disc.parameters():
            p.requires_grad_(False)

    def __call__(self, x):
        return self.disc.feature_maps(x)

    def fingerprint(self) -> str:
        return self.disc.fingerprint()


class DiscriminatorEmbedding:
    """Pooled penultimate discriminator features, for distribution metrics."""

    def __init__(self, disc):
        import copy
        self.disc = copy.deepcopy(disc)
        for p in self.disc.parameters():
            p.requires_grad_(False)

    def __call__(self, x) -> np.ndarray:
        with torch.no_grad():
            feats = self.disc.features(x if x.ndim == 4 else x[None])
        return feats.cpu().numpy()

    def fingerprint(self) -> str:
        return self.disc.fingerprint()


def align_by_centroid(x: torch.Tensor) -> torch.Tensor:
    """Shift each image so the centroid of its squared contrast against the
    per-channel median (the background level) sits at the frame center.

    A coherent whole-scene translation — the motion a latent edit induces —
    is undone by the alignment; content that moved *relative* to the rest of
    the scene stays misaligned. Differentiable."""
    from .flowwarp import warp
    B, C, H, W = x.shape
    med = x.flatten(2).median(dim=2).values[:, :, None, None]
    e = (x - med).abs().sum(1).pow(2.0)
    e = e / e.sum(dim=(-2, -1), keepdim=True).clamp_min(1e-12)
    ys = torch.arange(H, dtype=torch.float32)
    xs = torch.arange(W, dtype=torch.float32)
    cy = (e.sum(-1) * ys).sum(-1)
    cx = (e.sum(-2) * xs).sum(-1)
    out = []
    for b in range(B):
        if not (torch.isfinite(cx[b]) and torch.isfinite(cy[b])):
            # non-finite input (e.g. a diverged model): skip alignment so the
            # NaN propagates through the embedding instead of crashing warp
            out.append(x[b])
            continue
        flow = torch.zeros(2, H, W)
        flow[0] = cx[b] - (W - 1) / 2.0
        flow[1] = cy[b] - (H - 1) / 2.0
        out.append(warp(x[b], flow))
    return torch.stack(out)


class IdentityEmbedder(nn.Module):
    """Frozen random conv embedder with unit-norm output, applied in a
    translation-aligned frame; the desk-scale stand-in for a pretrained
    identity network (which likewise aligns the face before embedding).

    Because the centroid alignment undoes a coherent whole-scene shift, the
    embedding is nearly invariant to the motion a latent edit induces while
    staying spatially sensitive (pooled to a coarse grid, not globally) to
    content that is misplaced or distorted relative to the scene."""

    def __init__(self, embed_dim: int = 32, seed: int = 0, grid: int = 12):
        super().__init__()
        gen = torch.Generator().manual_seed(seed + 404)
        self.convs = nn.Sequential(
            nn.Conv2d(3, 24, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(24, 32, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
        )
        self.grid = grid
        self.fc = nn.Linear(32 * grid * grid, embed_dim)
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                nn.init.normal_(m.weight, std=0.1, generator=gen)
                nn.init.zeros_(m.bias)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        single = x.ndim == 3
        if single:
            x = x[None]
        h = self.convs(align_by_centroid(x))
        h = F.adaptive_avg_pool2d(h, self.grid).flatten(1)
        e = self.fc(h)
        e = e - e.mean(-1, keepdim=True)
        e = e / e.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        return e[0] if single else e

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for key, t in sorted(self.state_dict().items()):
            h.update(key.encode())
            h.update(t.detach().cpu().numpy().tobytes())
        return h.hexdigest()[:16]


def perceptual_distance(x: torch.Tensor, y: torch.Tensor, phi=identity_features) -> float:
    """Layer-averaged, per-element normalized feature-space L2 distance."""
    with torch.no_grad():
        fx, fy = phi(x), phi(y)
    dists = []
    for a, b in zip(fx, fy):
        diff = (a - b).flatten()
        dists.append(torch.linalg.vector_norm(diff).item() / np.sqrt(diff.numel()))
    return float(np.mean(dists))


def id_score(x: torch.Tensor, y: torch.Tensor, embedder) -> float:
    """Cosine similarity of identity embeddings, in [-1, 1]."""
    with torch.no_grad():
        ex, ey = embedder(x), embedder(y)
    val = float((ex * ey).sum(-1).mean())
    return max(-1.0, min(1.0, val))
