"""Flow prediction, rescaling, differentiable backward warping, the
block-matching pseudo-ground-truth oracle, and flow file I/O.

Conventions, used consistently everywhere:
  * a flow field is a (2, H, W) tensor of pixel displacements at its own
    resolution, channels ordered (dx, dy);
  * flow maps edited-frame coordinates to unedited-frame coordinates, so
    backward-warping features aligned with the unedited image produces
    features aligned with the edited image: out(p) = f(p + flow(p));
  * out-of-bounds samples clamp to the border.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import TAP_KEYS


# ---------------------------------------------------------------------------
# warping


def warp(f: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Backward bilinear warp: out(p) = bilinear_sample(f, p + flow(p)).

    Accepts (C, H, W) with (2, H, W) flow, or batched (B, C, H, W) with
    (B, 2, H, W). Differentiable w.r.t. both arguments. Zero flow reproduces
    the input bit-exactly; border samples clamp to the edge.
    """
    single = f.ndim == 3
    if single:
        f, flow = f[None], flow[None]
    if f.ndim != 4 or flow.ndim != 4 or flow.shape[1] != 2:
        raise ValueError("expected (B, C, H, W) features and (B, 2, H, W) flow")
    if f.shape[-2:] != flow.shape[-2:] or f.shape[0] != flow.shape[0]:
        raise ValueError(f"feature/flow shape mismatch: {tuple(f.shape)} vs {tuple(flow.shape)}")
    B, C, H, W = f.shape
    dtype, device = f.dtype, f.device

    base_x = torch.arange(W, dtype=dtype, device=device).view(1, 1, W)
    base_y = torch.arange(H, dtype=dtype, device=device).view(1, H, 1)
    xs = (base_x + flow[:, 0]).clamp(0, W - 1)
    ys = (base_y + flow[:, 1]).clamp(0, H - 1)

    x0 = xs.floor()
    y0 = ys.floor()
    wx = (xs - x0).unsqueeze(1)
    wy = (ys - y0).unsqueeze(1)
    x0l = x0.long()
    y0l = y0.long()
    x1l = (x0l + 1).clamp(max=W - 1)
    y1l = (y0l + 1).clamp(max=H - 1)

    flat = f.reshape(B, C, H * W)

    def gather(yi, xi):
        idx = (yi * W + xi).reshape(B, 1, H * W).expand(-1, C, -1)
        return torch.gather(flat, 2, idx).reshape(B, C, H, W)

    f00 = gather(y0l, x0l)
    f01 = gather(y0l, x1l)
    f10 = gather(y1l, x0l)
    f11 = gather(y1l, x1l)
    out = ((1 - wy) * ((1 - wx) * f00 + wx * f01)
           + wy * ((1 - wx) * f10 + wx * f11))
    return out[0] if single else out


def rescale_flow(flow: torch.Tensor, target_resolution: int) -> torch.Tensor:
    """Bilinear resample of the field with values scaled by target/source."""
    if target_resolution <= 0:
        raise ValueError("target resolution must be positive")
    single = flow.ndim == 3
    if single:
        flow = flow[None]
    src = flow.shape[-1]
    if flow.shape[-2] != src:
        raise ValueError("flow fields must be square")
    if target_resolution == src:
        out = flow.clone()
    else:
        if max(src, target_resolution) % min(src, target_resolution) != 0:
            raise ValueError("resolutions must divide one another")
        out = F.interpolate(flow, size=(target_resolution, target_resolution),
                            mode="bilinear", align_corners=True)
        out = out * (target_resolution / src)
    return out[0] if single else out


def resample_image(img: torch.Tensor, target_resolution: int) -> torch.Tensor:
    """Bilinear image resize used alongside rescale_flow (same grid convention)."""
    single = img.ndim == 3
    if single:
        img = img[None]
    out = F.interpolate(img, size=(target_resolution, target_resolution),
                        mode="bilinear", align_corners=True)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# block-matching oracle


@dataclass(frozen=True)
class FlowOracleConfig:
    block_size: int = 7
    search_radius: int = 6
    stride: int = 4

    def __post_init__(self):
        if self.block_size % 2 != 1:
            raise ValueError("block_size must be odd")
        if self.search_radius < 1:
            raise ValueError("search_radius must be >= 1")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")


def _block_sums(cost: np.ndarray, half: int) -> np.ndarray:
    """Sum of `cost` over (2*half+1)^2 windows, via an integral image."""
    H, W = cost.shape
    pad = np.pad(cost, half, mode="edge")
    ii = np.zeros((H + 2 * half + 1, W + 2 * half + 1))
    ii[1:, 1:] = pad.cumsum(0).cumsum(1)
    k = 2 * half + 1
    # entry (y, x) sums the window of pad starting at (y, x), i.e. centered
    # at (y, x) of the unpadded map
    return ii[k:, k:] - ii[:-k, k:] - ii[k:, :-k] + ii[:-k, :-k]


def pseudo_gt_flow(img_a, img_b, cfg: FlowOracleConfig) -> torch.Tensor:
    """Exhaustive SAD block matching from img_a to img_b, densified bilinearly.

    For each stride-grid position p in img_a, finds the integer displacement
    d with |d| <= search_radius minimizing the sum of absolute differences
    between the block around p in img_a and the block around p+d in img_b.
    Ties break toward zero displacement. Deterministic and non-differentiable;
    used as a frozen training target.
    """
    a = _to_numpy_image(img_a)
    b = _to_numpy_image(img_b)
    if a.shape != b.shape:
        raise ValueError("images must share a resolution")
    C, H, W = a.shape
    if H < cfg.block_size or W < cfg.block_size:
        raise ValueError("images smaller than the matching block")
    half = cfg.block_size // 2
    r = cfg.search_radius

    # candidate displacements, nearest-to-zero first: the first minimum in
    # this order implements the ties-toward-zero rule
    disps = [(dx, dy) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]
    disps.sort(key=lambda d: (d[0] * d[0] + d[1] * d[1], abs(d[1]), abs(d[0]), d[1], d[0]))

    ys = np.arange(half, H - half, cfg.stride)
    xs = np.arange(half, W - half, cfg.stride)

    bp = np.pad(b, ((0, 0), (r, r), (r, r)), mode="edge")
    # windows[:, i, j] is b shifted by (dy, dx) = (i - r, j - r)
    windows = np.lib.stride_tricks.sliding_window_view(bp, (H, W), axis=(1, 2))
    sad = np.abs(a[:, None, None] - windows).sum(axis=0)      # (2r+1, 2r+1, H, W)
    # block sums evaluated at the stride-grid positions only
    sw = np.lib.stride_tricks.sliding_window_view(sad, (2 * half + 1,) * 2,
                                                  axis=(2, 3))
    cost = sw[:, :, ys[:, None] - half, xs[None, :] - half].sum(axis=(-2, -1))
    cost = cost.reshape(-1, len(ys), len(xs))

    order = [(dy + r) * (2 * r + 1) + (dx + r) for dx, dy in disps]
    first_min = cost[order].argmin(axis=0)
    chosen = np.asarray(disps, dtype=float)[first_min]
    grid_dx, grid_dy = chosen[..., 0], chosen[..., 1]

    dense = np.stack([_densify(grid_dx, ys, xs, H, W),
                      _densify(grid_dy, ys, xs, H, W)])
    return torch.from_numpy(dense.astype(np.float32))


def _densify(grid: np.ndarray, ys, xs, H, W) -> np.ndarray:
    from scipy.interpolate import RegularGridInterpolator
    if grid.shape[0] == 1 and grid.shape[1] == 1:
        return np.full((H, W), grid[0, 0])
    interp = RegularGridInterpolator((ys.astype(float), xs.astype(float)), grid,
                                     method="linear")
    qy = np.clip(np.arange(H, dtype=float), ys[0], ys[-1])
    qx = np.clip(np.arange(W, dtype=float), xs[0], xs[-1])
    QY, QX = np.meshgrid(qy, qx, indexing="ij")
    return interp(np.stack([QY.ravel(), QX.ravel()], axis=-1)).reshape(H, W)


def _to_numpy_image(img) -> np.ndarray:
    if isinstance(img, torch.Tensor):
        img = img.detach().cpu().numpy()
    img = np.asarray(img, dtype=np.float32)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3:
        raise ValueError("expected a (C, H, W) image")
    return img


# ---------------------------------------------------------------------------
# learned flow predictor


def _sad_volume(a: torch.Tensor, b: torch.Tensor, radius: int) -> torch.Tensor:
    """Cost volume of channel-summed absolute differences over shifts within
    `radius`.

    Entry order matches displacements (dx, dy) in row-major dy, dx order;
    the shift is applied to b, so low cost at (dx, dy) means a(p) matches
    b(p + (dx, dy)).
    """
    B, C, H, W = a.shape
    bp = F.pad(b, (radius,) * 4, mode="replicate")
    vols = []
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            shifted = bp[:, :, radius + dy:radius + dy + H, radius + dx:radius + dx + W]
            vols.append((a - shifted).abs().sum(dim=1))
    return torch.stack(vols, dim=1)


class FlowPredictor(nn.Module):
    """Differentiable block matcher between the unedited and edited frames.

    Mirrors the structure of the pseudo-ground-truth oracle: a cost volume
    of absolute differences over displacements within `radius`, aggregated
    over `block`-sized windows. Cost comes from the two rendered images
    plus a learned projection of the finest feature tap (gated by
    `feat_gain`). The readout is a temperature-`tau` soft argmin of the
    aggregated cost scaled by a learned gain, plus a refinement conv head.
    The search runs at half the output resolution (radius 3 there spans the
    oracle's +/-6 px at full resolution) and the field is upsampled back.

    Both the gain and the refinement head start at zero, so an untrained
    (or never flow-supervised) predictor outputs exactly zero flow and the
    downstream warp is an identity. The gain is stored pre-scaled by
    `gain_scale` so flow supervision can open the gate within a few hundred
    steps at the configured learning rate.
    """

    def __init__(self, channels: int, adapt_channels: int = 8,
                 radius: int = 3, block: int = 3, tau: float = 0.02,
                 gain_scale: float = 10.0):
        super().__init__()
        self.radius = radius
        self.block = block
        self.tau = tau
        self.gain_scale = gain_scale
        self.adapter = nn.Conv2d(channels, adapt_channels, 3, padding=1)
        self.feat_gain = nn.Parameter(torch.zeros(()))
        self.gain_raw = nn.Parameter(torch.zeros(()))
        n_disp = (2 * radius + 1) ** 2
        self.refine = nn.Sequential(
            nn.Conv2d(n_disp, 32, 3, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(32, 2, 3, padding=1),
        )
        nn.init.zeros_(self.refine[-1].weight)
        nn.init.zeros_(self.refine[-1].bias)
        disp = torch.tensor([(dx, dy)
                             for dy in range(-radius, radius + 1)
                             for dx in range(-radius, radius + 1)],
                            dtype=torch.float32)
        self.register_buffer("disp", disp)

    def forward(self, taps_g: dict, taps_e: dict,
                image_g: torch.Tensor | None = None,
                image_e: torch.Tensor | None = None) -> torch.Tensor:
        for k in TAP_KEYS:
            if k not in taps_g or k not in taps_e:
                raise ValueError(f"missing tap resolution: {k}")
        fine = TAP_KEYS[-1]
        feats_e = [self.feat_gain * self.adapter(taps_e[fine])]
        feats_g = [self.feat_gain * self.adapter(taps_g[fine])]
        if image_e is not None and image_g is not None:
            feats_e.insert(0, image_e)
            feats_g.insert(0, image_g)
        a = torch.cat(feats_e, dim=1)   # edited frame: reference positions
        b = torch.cat(feats_g, dim=1)   # unedited frame: search target
        out_res = a.shape[-1]
        a = F.avg_pool2d(a, 2)
        b = F.avg_pool2d(b, 2)
        cost = _sad_volume(a, b, self.radius)
        cost = F.avg_pool2d(cost, self.block, stride=1, padding=self.block // 2,
                            count_include_pad=False)
        p = torch.softmax(-cost / self.tau, dim=1)
        flow_sa = torch.einsum("bkhw,kc->bchw", p, self.disp)
        flow = self.gain_scale * self.gain_raw * flow_sa + self.refine(-cost)
        return rescale_flow(flow, out_res)


def predict_flow(flownet: FlowPredictor, taps_g: dict, taps_e: dict,
                 image_g: torch.Tensor | None = None,
                 image_e: torch.Tensor | None = None) -> torch.Tensor:
    """Single-sample convenience wrapper around FlowPredictor."""
    g = {k: v[None] for k, v in taps_g.items()}
    e = {k: v[None] for k, v in taps_e.items()}
    img_g = None if image_g is None else image_g[None]
    img_e = None if image_e is None else image_e[None]
    with torch.no_grad():
        return flownet(g, e, img_g, img_e)[0]


# ---------------------------------------------------------------------------
# Middlebury .flo I/O and color-wheel export

_FLO_MAGIC = 202021.25


def write_flo(flow: torch.Tensor, path) -> None:
    """Middlebury format: f32 magic, i32 width, i32 height, interleaved
    (dx, dy) f32 row-major."""
    arr = flow.detach().cpu().to(torch.float32).numpy()
    if arr.ndim != 3 or arr.shape[0] != 2:
        raise ValueError("expected a (2, H, W) flow field")
    _, H, W = arr.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<fii", _FLO_MAGIC, W, H))
        fh.write(np.ascontiguousarray(arr.transpose(1, 2, 0), dtype="<f4").tobytes())


def read_flo(path) -> torch.Tensor:
    with open(path, "rb") as fh:
        header = fh.read(12)
        if len(header) != 12:
            raise ValueError("truncated .flo header")
        magic, W, H = struct.unpack("<fii", header)
        if abs(magic - _FLO_MAGIC) > 1e-3:
            raise ValueError(f"bad .flo magic: {magic}")
        payload = fh.read(8 * H * W)
        if len(payload) != 8 * H * W:
            raise ValueError("truncated .flo payload")
    arr = np.frombuffer(payload, dtype="<f4").reshape(H, W, 2).transpose(2, 0, 1)
    return torch.from_numpy(arr.copy())


def flow_to_color(flow: torch.Tensor, max_magnitude: float | None = None) -> np.ndarray:
    """HSV color-wheel rendering: hue = atan2(dy, dx), saturation = magnitude
    normalized by max_magnitude (field max when omitted), value = 1.
    Returns (H, W, 3) uint8."""
    arr = flow.detach().cpu().numpy() if isinstance(flow, torch.Tensor) else np.asarray(flow)
    dx, dy = arr[0], arr[1]
    mag = np.hypot(dx, dy)
    if max_magnitude is None:
        max_magnitude = max(mag.max(), 1e-9)
    sat = np.clip(mag / max_magnitude, 0, 1)
    hue = (np.arctan2(dy, dx) / (2 * np.pi)) % 1.0
    h6 = hue * 6.0
    i = h6.astype(int) % 6
    frac = h6 - np.floor(h6)
    v = np.ones_like(sat)
    p = v * (1 - sat)
    q = v * (1 - sat * frac)
    t = v * (1 - sat * (1 - frac))
    rgb = np.zeros(hue.shape + (3,))
    lut = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    for idx, (r_, g_, b_) in enumerate(lut):
        mask = i == idx
        rgb[mask, 0] = r_[mask]
        rgb[mask, 1] = g_[mask]
        rgb[mask, 2] = b_[mask]
    return (rgb * 255).round().astype(np.uint8)
