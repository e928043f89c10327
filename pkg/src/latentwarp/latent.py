"""Per-layer latent codes, edit simulation/reversal, and edit-direction files.

A code is an (L, D) matrix: one D-dimensional style vector per synthesis
layer. All arithmetic here is pure; shape mismatches raise ValueError.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn


@dataclass(frozen=True)
class LatentSeed:
    z: np.ndarray  # (z_dim,) float32
    rng_seed: int


def sample_z(rng_seed: int, z_dim: int = 64) -> LatentSeed:
    """Draw z ~ N(0, I), deterministic in rng_seed."""
    rng = np.random.Generator(np.random.PCG64(rng_seed))
    z = rng.standard_normal(z_dim).astype(np.float32)
    return LatentSeed(z=z, rng_seed=rng_seed)


@dataclass
class LatentCode:
    codes: torch.Tensor  # (L, D)

    def __post_init__(self):
        if self.codes.ndim != 2:
            raise ValueError(f"latent code must be 2-D (L, D), got {tuple(self.codes.shape)}")
        if not torch.isfinite(self.codes).all():
            raise ValueError("latent code contains non-finite entries")

    @property
    def shape(self):
        return tuple(self.codes.shape)

    def clone(self) -> "LatentCode":
        return LatentCode(self.codes.clone())


def _codes(w) -> torch.Tensor:
    return w.codes if isinstance(w, LatentCode) else w


def _like(w, codes: torch.Tensor):
    return LatentCode(codes) if isinstance(w, LatentCode) else codes


def _check_same_shape(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise ValueError(f"latent shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def simulate_edit(w, w_r, alpha: float):
    """Mix toward a random code: w + alpha * (w_r - w). alpha=0 is no edit."""
    cw, cr = _codes(w), _codes(w_r)
    _check_same_shape(cw, cr)
    if not np.isfinite(alpha):
        raise ValueError("alpha must be finite")
    if alpha == 0.0:
        return _like(w, cw.clone())
    return _like(w, cw + alpha * (cr - cw))


def reverse_edit(w_enc, direction, alpha: float):
    """Step back along the edit direction: w_enc - alpha * direction.

    `direction` is the forward edit direction (w_r - w); on raw codes this
    inverts simulate_edit exactly.
    """
    ce, cd = _codes(w_enc), _codes(direction)
    _check_same_shape(ce, cd)
    if alpha == 0.0:
        return _like(w_enc, ce.clone())
    return _like(w_enc, ce - alpha * cd)


def sample_edit_alpha(rng: np.random.Generator, edit_probability: float,
                      low: float = 0.4, high: float = 0.5) -> float:
    """Return 0 with probability (1 - edit_probability), else Uniform(low, high)."""
    if not 0.0 <= edit_probability <= 1.0:
        raise ValueError("edit_probability must be in [0, 1]")
    if rng.random() >= edit_probability:
        return 0.0
    return float(rng.uniform(low, high))


@dataclass
class EditDirection:
    direction: torch.Tensor  # (L, D), or (1, D) when broadcast
    name: str
    default_strength: float = 1.0
    broadcast: bool = False

    def __post_init__(self):
        if self.direction.ndim != 2:
            raise ValueError("direction must be 2-D")
        if not torch.any(self.direction != 0):
            raise ValueError("direction must be non-zero")
        if self.broadcast and self.direction.shape[0] != 1:
            raise ValueError("broadcast direction must have a single row")


def apply_direction(w, direction: EditDirection, strength: float):
    cw = _codes(w)
    d = direction.direction
    if direction.broadcast:
        if d.shape[1] != cw.shape[-1]:
            raise ValueError(
                f"direction dim {d.shape[1]} does not match latent dim {cw.shape[-1]}")
        d = d.expand(cw.shape[-2], -1)
    elif d.shape != cw.shape[-2:]:
        raise ValueError(
            f"direction shape {tuple(d.shape)} does not match code shape {tuple(cw.shape[-2:])}")
    return _like(w, cw + strength * d.to(cw.dtype))


_WDIR_MAGIC = b"WDIR"
_WDIR_VERSION = 1


def save_direction(direction: EditDirection, path) -> None:
    """Binary direction file: magic 'WDIR', u32 version, u32 L (0 = broadcast),
    u32 D, f32 default strength, L*D (or D) f32 row-major, u32-prefixed name."""
    d = direction.direction.detach().cpu().to(torch.float32).numpy()
    rows = 0 if direction.broadcast else d.shape[0]
    name_bytes = direction.name.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_WDIR_MAGIC)
        fh.write(struct.pack("<IIIf", _WDIR_VERSION, rows, d.shape[1],
                             direction.default_strength))
        fh.write(d.astype("<f4").tobytes())
        fh.write(struct.pack("<I", len(name_bytes)))
        fh.write(name_bytes)


def load_direction(path) -> EditDirection:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _WDIR_MAGIC:
            raise ValueError(f"bad direction file magic: {magic!r}")
        header = fh.read(16)
        if len(header) != 16:
            raise ValueError("truncated direction file header")
        version, rows, dim, strength = struct.unpack("<IIIf", header)
        if version != _WDIR_VERSION:
            raise ValueError(f"unsupported direction file version {version}")
        broadcast = rows == 0
        n = (1 if broadcast else rows) * dim
        payload = fh.read(4 * n)
        if len(payload) != 4 * n:
            raise ValueError("truncated direction payload")
        values = np.frombuffer(payload, dtype="<f4").reshape(-1, dim).copy()
        (name_len,) = struct.unpack("<I", fh.read(4))
        name = fh.read(name_len).decode("utf-8")
    return EditDirection(direction=torch.from_numpy(values), name=name,
                         default_strength=strength, broadcast=broadcast)


class MappingNetwork(nn.Module):
    """Maps z to a per-layer code; a small MLP with per-layer output heads.

    Weights are drawn once from `seed` and frozen. The output scale is
    calibrated at construction so codes are roughly unit-variance, matching
    the distribution assumed by the synthesis parameterization.
    """

    def __init__(self, z_dim: int = 64, latent_dim: int = 64,
                 latent_layers: int = 8, seed: int = 0):
        super().__init__()
        self.z_dim = z_dim
        self.latent_dim = latent_dim
        self.latent_layers = latent_layers
        gen = torch.Generator().manual_seed(seed)
        hidden = max(z_dim, 64)
        self.fc1 = nn.Linear(z_dim, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.head = nn.Linear(hidden, latent_layers * latent_dim)
        for m in (self.fc1, self.fc2, self.head):
            nn.init.normal_(m.weight, std=1.0 / np.sqrt(m.in_features), generator=gen)
            nn.init.zeros_(m.bias)
        # calibrate each output coordinate to zero mean / unit variance on a
        # fixed probe batch, so per-layer code entries are balanced around 0
        with torch.no_grad():
            probe = torch.randn(1024, z_dim, generator=gen)
            out = self._raw(probe)
            mean = out.mean(dim=0)
            scale = 1.0 / out.std(dim=0).clamp_min(1e-6)
        self.register_buffer("out_mean", mean)
        self.register_buffer("out_scale", scale)
        for p in self.parameters():
            p.requires_grad_(False)

    def _raw(self, z: torch.Tensor) -> torch.Tensor:
        h = torch.nn.functional.leaky_relu(self.fc1(z), 0.2)
        h = torch.nn.functional.leaky_relu(self.fc2(h), 0.2)
        return self.head(h)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.z_dim:
            raise ValueError(f"z has dim {z.shape[-1]}, expected {self.z_dim}")
        out = (self._raw(z) - self.out_mean) * self.out_scale
        return out.reshape(*z.shape[:-1], self.latent_layers, self.latent_dim)

    def map_code(self, seed: LatentSeed) -> LatentCode:
        z = torch.from_numpy(np.asarray(seed.z, dtype=np.float32))
        with torch.no_grad():
            return LatentCode(self.forward(z[None])[0])
