"""Desk-scale sprite experiment shared by the scripts and the acceptance suite."""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .checkpoint import checkpoint_bytes
from .metrics import ssim
from .model import ModelConfig, WorldModel
from .rollout import Intervention, RolloutConfig, generate, relative_change, retarget
from .synthdata import SpriteConfig, VideoDataset, gen_sprites
from .training import TrainConfig, recon_loss, train

DESK_MODEL = ModelConfig(
    height=32,
    width=32,
    channels=1,
    enc_channels=(16, 32, 64, 128),
    idm_width=256,
    fdm_width=256,
    gcm_hidden=64,
    gcm_decoder_width=64,
)


@dataclass
class DeskConfig:
    model: ModelConfig = DESK_MODEL
    data: SpriteConfig = field(default_factory=lambda: SpriteConfig(height=32, width=32, T=10, N=200, seed=0))
    heldout_seed: int = 1
    n_heldout: int = 20
    joint: TrainConfig = field(
        default_factory=lambda: TrainConfig(
            phase="joint12", learning_rate=1e-3, lambda_ssim=0.01, batch_size=8, steps=2500, augment_static=True
        )
    )
    phase3: TrainConfig = field(
        default_factory=lambda: TrainConfig(phase="3", learning_rate=1e-3, batch_size=8, steps=300)
    )
    seed: int = 0


@dataclass
class DeskResult:
    model: WorldModel
    heldout: VideoDataset
    joint_log: list
    phase3_log: list
    rec_init: float
    rec_final: float
    one_step_ssim: float
    copy_ssim: float  # render(z_t) scored against o_{t+1}: the do-nothing predictor
    recon_ssim: float
    joint_seconds: float
    joint_checkpoint: bytes  # state after the joint phase, before the GCM phase


def desk_datasets(cfg: DeskConfig) -> tuple[VideoDataset, VideoDataset]:
    heldout = replace(cfg.data, N=cfg.n_heldout, seed=cfg.heldout_seed)
    return gen_sprites(cfg.data), gen_sprites(heldout)


def reconstruction_loss(model: WorldModel, frames: np.ndarray, lam: float) -> float:
    """Per-frame objective of the first phase on ``frames (N, T, H, W, C)``."""
    x = torch.from_numpy(frames)
    with torch.no_grad():
        return float(recon_loss(x, model.render(model.encode(x)), lam))


def _mean_ssim(pred: np.ndarray, ref: np.ndarray) -> float:
    n, t = pred.shape[:2]
    return float(np.mean([ssim(pred[i, j], ref[i, j]) for i in range(n) for j in range(t)]))


def one_step_scores(model: WorldModel, ds: VideoDataset) -> tuple[float, float, float]:
    """SSIM of one-step FDM predictions, of the copy baseline, and of reconstructions.

    All renders are clamped to [0, 1]; predictions and copies are scored against o_{t+1}.
    """
    x = torch.from_numpy(ds.frames)
    with torch.no_grad():
        z = model.encode(x)
        u = model.action(z[:, :-1], z[:, 1:])
        pred = model.render(model.fdm(z[:, :-1], u)).clamp(0, 1).numpy()
        rec = model.render(z).clamp(0, 1).numpy()
    nxt = ds.frames[:, 1:]
    return _mean_ssim(pred, nxt), _mean_ssim(rec[:, :-1], nxt), _mean_ssim(rec, ds.frames)


def one_step_ssim(model: WorldModel, ds: VideoDataset) -> float:
    return one_step_scores(model, ds)[0]


def run_desk(cfg: DeskConfig, progress=None) -> DeskResult:
    """Joint training of the first two phases, then a short GCM phase."""
    train_ds, heldout = desk_datasets(cfg)
    model = WorldModel(cfg.model, seed=cfg.seed)
    probe = train_ds.frames[:20]
    rec_init = reconstruction_loss(model, probe, cfg.joint.lambda_ssim)
    start = time.perf_counter()
    joint = train(replace(cfg.joint, seed=cfg.seed), train_ds, model, progress)
    seconds = time.perf_counter() - start
    rec_final = reconstruction_loss(model, probe, cfg.joint.lambda_ssim)
    scores = one_step_scores(model, heldout)
    snapshot = checkpoint_bytes(model)
    gcm = train(replace(cfg.phase3, seed=cfg.seed), train_ds, model, progress)
    return DeskResult(model, heldout, joint.log, gcm.log, rec_init, rec_final, *scores, seconds, snapshot)


@dataclass
class RetargetReport:
    pixel_change: float  # max |frame difference| after the content swap
    action_change: list[float]  # per-step relative change of GCM actions after the swap
    displacement_ratio: float  # zero-motion displacement over the unintervened median

    def content_ok(self, tol: float = 0.2) -> bool:
        return self.pixel_change > 1e-3 and max(self.action_change) < tol

    def motion_ok(self, tol: float = 0.25) -> bool:
        return self.displacement_ratio < tol


def retarget_report(model: WorldModel, ds: VideoDataset, at: int = 5, rho: float = 0.3) -> RetargetReport:
    """Content swap and zero-motion interventions on every held-out sequence.

    Content comes from the next sequence (cyclically) at the same step.
    """
    ref = torch.from_numpy(ds.frames)
    T = ref.shape[1]
    cfg = RolloutConfig(T, rho)
    base = generate(ref, cfg, model)
    with torch.no_grad():
        alien = model.encode(torch.roll(ref, 1, dims=0)[:, at - 1])
    swapped = retarget(ref, cfg, model, iv=Intervention({at}, {at: alien}))
    # alien_states broadcast per sequence through expand_as
    pixel = float((swapped.frames[:, at:] - base.frames[:, at:]).abs().max())
    change = relative_change(swapped.actions[:, at:], base.actions[:, at:]).mean(0).tolist()

    steps = set(range(at, T))
    zero = torch.zeros(model.config.d_u)
    still = retarget(ref, cfg, model, iv=Intervention(steps, alien_actions={t: zero for t in steps}))
    moved = (still.latents[:, at:] - still.latents[:, at - 1 : -1]).norm(dim=-1)
    free = (base.latents[:, at:] - base.latents[:, at - 1 : -1]).norm(dim=-1)
    ratio = float(moved.median() / free.median().clamp_min(1e-12))
    return RetargetReport(pixel, change, ratio)
