"""The inversion pipeline bundle: frozen base models plus the trainable
residual/warp/refine stack, with single-image inference helpers."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import torch
from torch import nn

from .config import ModelConfig, TAP_KEYS
from .encoders import BaseEncoder, Refiner, ResidualDetector
from .flowwarp import FlowOracleConfig, FlowPredictor, pseudo_gt_flow, rescale_flow, warp
from .latent import EditDirection, apply_direction, _codes


@dataclass
class PassResult:
    image_out: torch.Tensor   # (B, 3, H, W)
    f_a: torch.Tensor         # residual features, unedited frame
    f_wa: torch.Tensor        # residuals warped to the edited frame
    f: torch.Tensor           # refined injected features
    flow_pred: torch.Tensor | None
    flow_gt: torch.Tensor | None
    w: torch.Tensor           # encoded codes (B, L, D)
    w_alpha: torch.Tensor     # generation codes after the edit
    f0: torch.Tensor
    img_g: torch.Tensor       # plain style-pathway render of w
    img_e: torch.Tensor       # plain style-pathway render of w_alpha
    taps_g: dict
    taps_e: dict


class InversionPipeline(nn.Module):
    """Holds every sub-model. The mapping network, generator, and base
    encoder are frozen; the residual detector, refiner, flow predictor,
    and discriminator are trainable."""

    def __init__(self, cfg: ModelConfig, mapping, generator, discriminator,
                 e0: BaseEncoder, e1: ResidualDetector | None = None,
                 e2: Refiner | None = None, flownet: FlowPredictor | None = None,
                 warp_enabled: bool = True):
        super().__init__()
        self.cfg = cfg
        self.mapping = mapping
        self.generator = generator
        self.discriminator = discriminator
        self.e0 = e0
        self.e1 = e1 if e1 is not None else ResidualDetector(cfg)
        self.e2 = e2 if e2 is not None else Refiner(cfg)
        self.flownet = flownet if flownet is not None else FlowPredictor(cfg.channels)
        self.warp_enabled = warp_enabled
        for module in (self.mapping, self.generator, self.e0):
            for p in module.parameters():
                p.requires_grad_(False)

    def trainable_modules(self) -> dict:
        mods = {"e1": self.e1, "e2": self.e2}
        if self.warp_enabled:
            mods["flow"] = self.flownet
        return mods

    def trainable_parameters(self):
        for m in self.trainable_modules().values():
            yield from m.parameters()

    # ------------------------------------------------------------------

    def run_pass(self, x: torch.Tensor, edit_fn=None,
                 oracle_cfg: FlowOracleConfig | None = None,
                 want_flow_gt: bool = False,
                 force_flow: bool = False,
                 warp_with_oracle: bool = False) -> PassResult:
        """One full inversion pass over a batch.

        edit_fn maps the encoded codes to the generation codes; None (or
        returning codes equal to the input) is the no-edit pass, in which case the
        edited generator features are the unedited ones, bit-exact, and the
        flow predictor is skipped (zero flow is an identity warp) unless
        force_flow asks for a prediction anyway.

        warp_with_oracle warps the residuals with the oracle field instead
        of the prediction (computing it if want_flow_gt did not ask for it):
        the training-time teacher-forcing mode, in which the predictor only
        learns to imitate the oracle and takes over at inference.
        """
        f0, w = self.e0(x)
        img_g, taps_g = self.generator(w)
        f_a = self.e1(f0, taps_g[TAP_KEYS[-1]])

        w_alpha = w if edit_fn is None else edit_fn(w)
        edited = w_alpha is not w and not torch.equal(w_alpha, w)
        if edited:
            img_e, taps_e = self.generator(w_alpha)
        else:
            img_e, taps_e = img_g, taps_g

        warping = self.warp_enabled and (edited or force_flow)
        flow_pred = None
        if warping:
            # the predictor observes renders, it does not shape them: detach
            # its inputs so the flow loss cannot reach the encoders through a
            # re-encoded image (the cycle's second pass feeds the first pass's
            # output back in). Downstream losses still reach the predictor's
            # own parameters through the warp.
            flow_pred = self.flownet(
                {k: v.detach() for k, v in taps_g.items()},
                {k: v.detach() for k, v in taps_e.items()},
                img_g.detach(), img_e.detach())

        flow_gt = None
        if want_flow_gt or (warp_with_oracle and warping):
            res = taps_g[TAP_KEYS[-1]].shape[-1]
            if not edited:
                flow_gt = torch.zeros(x.shape[0], 2, res, res)
            else:
                cfg = oracle_cfg if oracle_cfg is not None else FlowOracleConfig()
                fields = [rescale_flow(
                    pseudo_gt_flow(img_e[i].detach(), img_g[i].detach(), cfg), res)
                    for i in range(x.shape[0])]
                flow_gt = torch.stack(fields)

        if warping:
            f_wa = warp(f_a, flow_gt if warp_with_oracle else flow_pred)
        else:
            f_wa = f_a

        f = self.e2(f_wa, taps_e[TAP_KEYS[-1]])
        image_out, _ = self.generator(w_alpha, inject=f)
        return PassResult(image_out=image_out, f_a=f_a, f_wa=f_wa, f=f,
                          flow_pred=flow_pred, flow_gt=flow_gt, w=w,
                          w_alpha=w_alpha, f0=f0, img_g=img_g, img_e=img_e,
                          taps_g=taps_g, taps_e=taps_e)

    def forward_pipeline(self, x: torch.Tensor, alpha, w_r=None,
                         oracle_cfg: FlowOracleConfig | None = None,
                         want_flow_gt: bool = True) -> dict:
        """Edit-simulation forward: mix the encoded codes toward w_r by alpha
        and run the full residual/warp/refine/injection chain."""
        alpha_t = torch.as_tensor(alpha, dtype=torch.float32)
        if torch.any(alpha_t != 0) and w_r is None:
            raise ValueError("w_r is required when alpha is nonzero")

        def edit_fn(w):
            if torch.all(alpha_t == 0):
                return w
            a = alpha_t.reshape(-1, 1, 1)
            return w + a * (w_r - w)

        res = self.run_pass(x, edit_fn, oracle_cfg, want_flow_gt)
        return {
            "image_out": res.image_out, "f_a": res.f_a, "f_wa": res.f_wa,
            "f": res.f, "flow_pred": res.flow_pred, "flow_gt": res.flow_gt,
            "w": res.w, "w_alpha": res.w_alpha, "img_g": res.img_g,
            "img_e": res.img_e,
        }

    # -- single-image inference ----------------------------------------

    def _infer(self, x: torch.Tensor, edit_fn) -> torch.Tensor:
        with torch.no_grad():
            res = self.run_pass(x[None], edit_fn, want_flow_gt=False)
        return res.image_out[0]

    def reconstruct(self, x: torch.Tensor) -> torch.Tensor:
        """Invert a single (3, H, W) image and regenerate it without edits."""
        return self._infer(x, None)

    def edit_image(self, x: torch.Tensor, direction: EditDirection,
                   strength: float) -> torch.Tensor:
        def edit_fn(w):
            return apply_direction(w, direction, strength)
        return self._infer(x, edit_fn)

    def encode_codes(self, x: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            _, w = self.e0(x[None])
        return w[0]


def build_pipeline(cfg: ModelConfig, mapping, generator, discriminator, e0,
                   warp_enabled: bool = True, seed: int = 0) -> InversionPipeline:
    torch.manual_seed(seed + 977)
    return InversionPipeline(cfg, mapping, generator, discriminator, e0,
                             warp_enabled=warp_enabled)


def save_pipeline(path, pipe: InversionPipeline, substrate: str = "procedural",
                  extra_manifest: dict | None = None) -> None:
    from .checkpoint import module_arrays, save_checkpoint
    manifest = {
        "version": 1,
        "kind": "inversion_bundle",
        "substrate": substrate,
        "warp_enabled": pipe.warp_enabled,
        "model": dataclasses.asdict(pipe.cfg),
    }
    if extra_manifest:
        manifest.update(extra_manifest)
    arrays = {}
    for prefix, module in [("mapping", pipe.mapping), ("gen", pipe.generator),
                           ("disc", pipe.discriminator), ("e0", pipe.e0),
                           ("e1", pipe.e1), ("e2", pipe.e2),
                           ("flow", pipe.flownet)]:
        arrays.update(module_arrays(prefix, module))
    save_checkpoint(path, manifest, arrays)


def load_pipeline(path) -> InversionPipeline:
    from .checkpoint import load_checkpoint, load_module
    from .generator import ConvStyleGenerator, Discriminator, ProceduralGenerator
    from .latent import MappingNetwork

    manifest, arrays = load_checkpoint(path)
    if manifest.get("kind") != "inversion_bundle":
        raise ValueError("not an inversion bundle checkpoint")
    cfg = ModelConfig(**manifest["model"])
    mapping = MappingNetwork(cfg.z_dim, cfg.latent_dim, cfg.latent_layers, seed=cfg.seed)
    generator = (ProceduralGenerator(cfg) if manifest["substrate"] == "procedural"
                 else ConvStyleGenerator(cfg))
    disc = Discriminator(cfg.image_size, seed=cfg.seed)
    e0 = BaseEncoder(cfg)
    pipe = InversionPipeline(cfg, mapping, generator, disc, e0,
                             warp_enabled=manifest["warp_enabled"])
    for prefix, module in [("mapping", pipe.mapping), ("gen", pipe.generator),
                           ("disc", pipe.discriminator), ("e0", pipe.e0),
                           ("e1", pipe.e1), ("e2", pipe.e2),
                           ("flow", pipe.flownet)]:
        load_module(module, prefix, arrays)
    for module in (pipe.mapping, pipe.generator, pipe.e0):
        for p in module.parameters():
            p.requires_grad_(False)
    return pipe
