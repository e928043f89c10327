"""Two-path training loop, loss terms, optimizer schedule, checkpointing.

Loss conventions (fixed here, documented in the README): reconstruction and
perceptual terms use the unnormalized Euclidean norm per sample; the flow
term is a mean absolute error; the feature regularizer kernel is an
absolute sum, but enters the total objective divided by the feature element
count so its weight is resolution-independent at desk scale.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
import torch

from .config import TrainConfig, learning_rate_at
from .flowwarp import FlowOracleConfig, pseudo_gt_flow
from .generator import TrainingDiverged
from .metrics import DiscriminatorFeatures, IdentityEmbedder
from .pipeline import InversionPipeline

_EPS = 1e-6


class PathKind(Enum):
    NO_EDIT = "no_edit"
    CYCLE = "cycle"


# ---------------------------------------------------------------------------
# loss kernels (single-sample contract; batched helpers below)


def _l2(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return torch.linalg.vector_norm((a - b).flatten())


def loss_rec_l2(x_out1, x_out2, x) -> torch.Tensor:
    """||x_out1 - x||_2 + ||x_out2 - x||_2, unnormalized Euclidean norms."""
    return _l2(x_out1, x) + _l2(x_out2, x)


def loss_perceptual(x_out1, x_out2, x, phi) -> torch.Tensor:
    total = torch.zeros(())
    for out in (x_out1, x_out2):
        feats_out, feats_x = phi(out), phi(x)
        for a, b in zip(feats_out, feats_x):
            total = total + _l2(a, b)
    return total


def loss_identity(x_out1, x_out2, x, embedder) -> torch.Tensor:
    ex = embedder(x)
    total = torch.zeros(())
    for out in (x_out1, x_out2):
        total = total + (1.0 - (ex * embedder(out)).sum(-1))
    return total


def discriminator_objective(d, x, x_prime, x_i_prime=None) -> torch.Tensor:
    """2 log D(x) + log(1 - D(x')) + log(1 - D(x'_i)); maximized by D.
    The x'_i term is dropped on paths that produce no intermediate edit."""
    obj = 2.0 * torch.log(d(x) + _EPS).mean() \
        + torch.log(1.0 - d(x_prime) + _EPS).mean()
    if x_i_prime is not None:
        obj = obj + torch.log(1.0 - d(x_i_prime) + _EPS).mean()
    return obj


def loss_adversarial(d, x, x_prime, x_i_prime=None):
    """Returns (loss_d, loss_g). loss_d is the negated discriminator objective;
    loss_g is the non-saturating generator counterpart over the fakes."""
    loss_d = -discriminator_objective(d, x, x_prime, x_i_prime)
    fakes = [x_prime] + ([x_i_prime] if x_i_prime is not None else [])
    loss_g = -sum(torch.log(d(f) + _EPS).mean() for f in fakes) / len(fakes)
    return loss_d, loss_g


def loss_feature_reg(features) -> torch.Tensor:
    """Sum of absolute values over the injected residual feature set."""
    if isinstance(features, torch.Tensor):
        features = [features]
    total = torch.zeros(())
    for f in features:
        total = total + f.abs().sum()
    return total


def loss_flow(flow_pred: torch.Tensor, flow_gt: torch.Tensor) -> torch.Tensor:
    if flow_pred.shape != flow_gt.shape:
        raise ValueError(f"resolution mismatch: {tuple(flow_pred.shape)} vs "
                         f"{tuple(flow_gt.shape)}")
    return (flow_pred - flow_gt).abs().mean()


def _batch_l2(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-sample Euclidean norm of the difference, averaged over the batch."""
    return torch.linalg.vector_norm((a - b).flatten(1), dim=1).mean()


# ---------------------------------------------------------------------------
# trainer


@dataclass
class TrainState:
    step: int = 0
    learning_rate: float = 0.0


class Trainer:
    """Owns the optimizers, rng, schedule, and logging for one training run."""

    def __init__(self, pipe: InversionPipeline, cfg: TrainConfig, sampler,
                 out_dir=None, oracle_cfg: FlowOracleConfig | None = None,
                 check_frozen: bool = False):
        self.pipe = pipe
        self.cfg = cfg
        self.sampler = sampler
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.oracle_cfg = oracle_cfg if oracle_cfg is not None else FlowOracleConfig()
        self.check_frozen = check_frozen
        self.rng = np.random.Generator(np.random.PCG64(cfg.seed + 7919))
        self.state = TrainState(step=0, learning_rate=cfg.schedule.learning_rate)

        groups = [{"params": list(pipe.e1.parameters()) + list(pipe.e2.parameters()),
                   "lr": cfg.schedule.learning_rate, "lr_scale": 1.0}]
        if pipe.warp_enabled:
            flow_scale = cfg.schedule.flow_learning_rate / cfg.schedule.learning_rate
            groups.append({"params": list(pipe.flownet.parameters()),
                           "lr": cfg.schedule.flow_learning_rate,
                           "lr_scale": flow_scale})
        self.opt_g = torch.optim.Adam(groups, betas=(0.9, 0.999))
        self.opt_d = torch.optim.Adam(pipe.discriminator.parameters(),
                                      lr=cfg.schedule.learning_rate, betas=(0.9, 0.999))
        # frozen metric plug-ins, fixed at construction
        self.phi = DiscriminatorFeatures(pipe.discriminator)
        self.embedder = IdentityEmbedder(seed=cfg.seed)
        self.oracle_calls = 0
        self._probe = None
        self.log_records = []
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)

    # -- flow EPE probe --------------------------------------------------

    def _build_probe(self, n: int = 6):
        rng = np.random.Generator(np.random.PCG64(self.cfg.seed + 555))
        pairs = []
        with torch.no_grad():
            for _ in range(n):
                z = torch.from_numpy(rng.standard_normal(
                    (2, self.cfg.model.z_dim)).astype(np.float32))
                w = self.pipe.mapping(z)
                w0, wr = w[0:1], w[1:2]
                wa = w0 + 0.45 * (wr - w0)
                img_g, taps_g = self.pipe.generator(w0)
                img_e, taps_e = self.pipe.generator(wa)
                gt = pseudo_gt_flow(img_e[0], img_g[0], self.oracle_cfg)
                pairs.append((taps_g, taps_e, img_g, img_e, gt))
        return pairs

    def flow_epe(self) -> float:
        """Mean endpoint error of the flow predictor against the oracle on a
        fixed probe set."""
        if not self.pipe.warp_enabled:
            return float("nan")
        if self._probe is None:
            self._probe = self._build_probe()
        errs = []
        with torch.no_grad():
            for taps_g, taps_e, img_g, img_e, gt in self._probe:
                pred = self.pipe.flownet(taps_g, taps_e, img_g, img_e)[0]
                errs.append(torch.linalg.vector_norm(pred - gt, dim=0).mean().item())
        return float(np.mean(errs))

    # -- core step ---------------------------------------------------------

    def train_step(self, x: torch.Tensor, path: PathKind, alphas=None, w_r=None) -> dict:
        """One optimization step; returns the loss record. Raises
        TrainingDiverged on non-finite losses."""
        pipe = self.pipe
        lw = self.cfg.lambdas_no_edit if path is PathKind.NO_EDIT else self.cfg.lambdas_cycle
        sched = self.cfg.schedule
        lr = learning_rate_at(self.state.step, sched)
        for group in self.opt_g.param_groups:
            group["lr"] = lr * group.get("lr_scale", 1.0)
        for group in self.opt_d.param_groups:
            group["lr"] = lr

        terms = {}
        want_flow = pipe.warp_enabled and lw.lambda_fl > 0

        if path is PathKind.NO_EDIT:
            out = pipe.run_pass(x, None, want_flow_gt=False,
                                force_flow=want_flow and sched.flow_loss_on_no_edit)
            x_out = out.image_out
            fakes = [x_out]
            injected = [out.f]
            flow_terms = []
            if want_flow and sched.flow_loss_on_no_edit:
                flow_terms.append((out.flow_pred, torch.zeros_like(out.flow_pred)))
            recon_outs = [x_out]
        else:
            if alphas is None or w_r is None:
                raise ValueError("cycle path needs alphas and w_r")
            a = torch.as_tensor(alphas, dtype=torch.float32).reshape(-1, 1, 1)

            def edit_fn(w):
                return w + a * (w_r - w)

            teach = want_flow and sched.teacher_forced_warp
            first = pipe.run_pass(x, edit_fn, oracle_cfg=self.oracle_cfg,
                                  want_flow_gt=want_flow, warp_with_oracle=teach)
            x_i = first.image_out
            direction = (w_r - first.w).detach()

            def back_fn(w_enc):
                # reverse_edit with a per-sample alpha column
                return w_enc - a * direction

            second = pipe.run_pass(x_i, back_fn, oracle_cfg=self.oracle_cfg,
                                   want_flow_gt=want_flow, warp_with_oracle=teach)
            x_out = second.image_out
            fakes = [x_out, x_i]
            injected = [first.f, second.f]
            flow_terms = []
            if want_flow:
                self.oracle_calls += 2 * x.shape[0]
                flow_terms.append((first.flow_pred, first.flow_gt))
                flow_terms.append((second.flow_pred, second.flow_gt))
            recon_outs = [x_out]

        # discriminator update on detached fakes
        d = pipe.discriminator
        loss_d = -discriminator_objective(
            d, x, fakes[0].detach(), fakes[1].detach() if len(fakes) > 1 else None)
        self.opt_d.zero_grad()
        loss_d.backward()
        self.opt_d.step()
        terms["loss_d"] = loss_d.item()

        # generator-side update
        total = torch.zeros(())
        adv_g = -sum(torch.log(d(f) + _EPS).mean() for f in fakes) / len(fakes)
        terms["adv_g"] = adv_g.item()
        total = total + lw.lambda_a * adv_g

        if lw.lambda_r1 > 0:
            rec = sum(_batch_l2(o, x) for o in recon_outs)
            terms["rec_l2"] = rec.item()
            total = total + lw.lambda_r1 * rec
        if lw.lambda_r2 > 0:
            perc = torch.zeros(())
            feats_x = self.phi(x)
            for o in recon_outs:
                for fa, fb in zip(self.phi(o), feats_x):
                    perc = perc + _batch_l2(fa, fb)
            terms["rec_p"] = perc.item()
            total = total + lw.lambda_r2 * perc
        if lw.lambda_r3 > 0:
            ex = self.embedder(x)
            ident = sum((1.0 - (ex * self.embedder(o)).sum(-1)).mean() for o in recon_outs)
            terms["rec_id"] = ident.item()
            total = total + lw.lambda_r3 * ident
        if lw.lambda_f > 0:
            # absolute-sum kernel, normalized per element for scale balance
            reg = sum(f.abs().sum() / f.numel() for f in injected) / len(injected)
            terms["feat_reg"] = reg.item()
            total = total + lw.lambda_f * reg
        if flow_terms and lw.lambda_fl > 0:
            fl = sum(loss_flow(p, g) for p, g in flow_terms) / len(flow_terms)
            terms["flow"] = fl.item()
            total = total + lw.lambda_fl * fl

        terms["total"] = total.item()
        terms["lr"] = lr
        terms["path"] = path.value
        if not np.isfinite(terms["total"]) or not np.isfinite(terms["loss_d"]):
            raise TrainingDiverged(f"non-finite loss at step {self.state.step}: {terms}")

        self.opt_g.zero_grad()
        total.backward()
        self.opt_g.step()

        if self.check_frozen:
            for mod in (pipe.e0, pipe.mapping, pipe.generator):
                for p in mod.parameters():
                    assert p.grad is None or torch.all(p.grad == 0), \
                        "frozen module received a gradient"

        self.state.step += 1
        self.state.learning_rate = lr
        return terms

    def step_once(self) -> dict:
        sched = self.cfg.schedule
        x, _, _ = self.sampler.sample(self.rng, sched.batch_size)
        if self.rng.random() < sched.edit_probability:
            path = PathKind.CYCLE
            alphas = self.rng.uniform(sched.alpha_low, sched.alpha_high,
                                      size=sched.batch_size).astype(np.float32)
            z = torch.from_numpy(self.rng.standard_normal(
                (sched.batch_size, self.cfg.model.z_dim)).astype(np.float32))
            with torch.no_grad():
                w_r = self.pipe.mapping(z)
            record = self.train_step(x, path, alphas, w_r)
        else:
            record = self.train_step(x, PathKind.NO_EDIT)
        record["step"] = self.state.step
        return record

    def run(self, total_steps: int | None = None, log_fn=None):
        sched = self.cfg.schedule
        total = total_steps if total_steps is not None else sched.total_steps
        while self.state.step < total:
            record = self.step_once()
            if self.state.step % sched.log_every == 0 or self.state.step == total:
                record["flow_epe"] = self.flow_epe()
                self.log_records.append(record)
                if self.out_dir is not None:
                    with open(self.out_dir / "train_log.jsonl", "a") as fh:
                        fh.write(json.dumps(record) + "\n")
                if log_fn is not None:
                    log_fn(record)
            if (self.out_dir is not None and sched.checkpoint_every > 0
                    and self.state.step % sched.checkpoint_every == 0):
                self.save(self.out_dir / f"state_{self.state.step:06d}.ckpt")
        return self.log_records

    # -- exact-resume serialization -----------------------------------------

    def save(self, path) -> None:
        from .checkpoint import module_arrays, save_checkpoint
        import dataclasses as dc
        arrays = {}
        for prefix, module in [("mapping", self.pipe.mapping), ("gen", self.pipe.generator),
                               ("disc", self.pipe.discriminator), ("e0", self.pipe.e0),
                               ("e1", self.pipe.e1), ("e2", self.pipe.e2),
                               ("flow", self.pipe.flownet)]:
            arrays.update(module_arrays(prefix, module))
        buf = io.BytesIO()
        torch.save({"opt_g": self.opt_g.state_dict(),
                    "opt_d": self.opt_d.state_dict()}, buf)
        arrays["trainer/optimizers"] = np.frombuffer(buf.getvalue(), dtype=np.uint8)
        manifest = {
            "version": 1,
            "kind": "trainer_state",
            "warp_enabled": self.pipe.warp_enabled,
            "model": dc.asdict(self.pipe.cfg),
            "step": self.state.step,
            "learning_rate": self.state.learning_rate,
            "rng_state": json.loads(json.dumps(self.rng.bit_generator.state)),
            "oracle": dc.asdict(self.oracle_cfg),
        }
        save_checkpoint(path, manifest, arrays)

    def load(self, path) -> None:
        from .checkpoint import load_checkpoint, load_module
        manifest, arrays = load_checkpoint(path)
        if manifest.get("kind") != "trainer_state":
            raise ValueError("not a trainer state checkpoint")
        for prefix, module in [("mapping", self.pipe.mapping), ("gen", self.pipe.generator),
                               ("disc", self.pipe.discriminator), ("e0", self.pipe.e0),
                               ("e1", self.pipe.e1), ("e2", self.pipe.e2),
                               ("flow", self.pipe.flownet)]:
            load_module(module, prefix, arrays)
        blob = arrays["trainer/optimizers"].tobytes()
        opt_state = torch.load(io.BytesIO(blob), weights_only=False)
        self.opt_g.load_state_dict(opt_state["opt_g"])
        self.opt_d.load_state_dict(opt_state["opt_d"])
        self.state.step = manifest["step"]
        self.state.learning_rate = manifest["learning_rate"]
        state = manifest["rng_state"]
        self.rng = np.random.Generator(np.random.PCG64())
        self.rng.bit_generator.state = state
