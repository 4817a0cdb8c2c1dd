"""Three-phase optimisation: reconstruction, latent transitions, action matching."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .dynamics import quantize
from .metrics import gaussian_window
from .model import ModelConfig, WorldModel
from .synthdata import VideoDataset

PHASES = ("1", "2", "3", "joint12")

TRAINABLE = {
    "1": ("encoder", "zbar"),
    "2": ("idm", "fdm"),
    "3": ("gcm",),
    "joint12": ("encoder", "zbar", "idm", "fdm"),
}
REQUIRES = {
    "1": (),
    "2": ("encoder", "zbar"),
    "3": ("encoder", "zbar", "idm", "fdm"),
    "joint12": (),
}


class PrerequisiteError(RuntimeError):
    """A phase was started without the components it depends on."""


class NumericError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    phase: str = "joint12"
    learning_rate: float = 1e-4
    batch_size: int = 8
    steps: int = 200
    lambda_ssim: float = 0.1
    seed: int = 0
    augment_reverse: bool = False
    augment_static: bool = False
    reverse_prob: float = 0.5
    static_prob: float = 0.25
    static_offset: int = 0
    latent_weight: float = 0.0  # optional latent transition term in joint12

    def __post_init__(self):
        self.phase = str(self.phase)
        if self.phase not in PHASES:
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


# ------------------------------------------------------------------ SSIM


def ssim_frames(a: torch.Tensor, b: torch.Tensor, k1=0.01, k2=0.03, win_size=11, sigma=1.5) -> torch.Tensor:
    """Differentiable per-frame SSIM for ``(..., H, W, C)`` inputs, channel-averaged."""
    *lead, h, w, c = a.shape
    if min(h, w) < win_size:
        raise ValueError(f"frame {h}x{w} smaller than the {win_size}x{win_size} window")
    win = torch.as_tensor(gaussian_window(win_size, sigma), dtype=a.dtype)[None, None]
    x = a.reshape(-1, h, w, c).permute(0, 3, 1, 2).reshape(-1, 1, h, w)
    y = b.reshape(-1, h, w, c).permute(0, 3, 1, 2).reshape(-1, 1, h, w)
    f = lambda t: F.conv2d(t, win)  # noqa: E731
    mu_x, mu_y = f(x), f(y)
    var_x = f(x * x) - mu_x**2
    var_y = f(y * y) - mu_y**2
    cov = f(x * y) - mu_x * mu_y
    c1, c2 = k1**2, k2**2
    s = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / ((mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2))
    per_channel = s.mean(dim=(-1, -2)).reshape(-1, c)
    return per_channel.mean(-1).reshape(lead)


def _mse_frames(a, b):
    return ((a - b) ** 2).mean(dim=(-1, -2, -3))


def recon_loss(target: torch.Tensor, pred: torch.Tensor, lam: float) -> torch.Tensor:
    """Mean over frames of per-pixel MSE + lam * (1 - SSIM)."""
    per = _mse_frames(target, pred)
    if lam:
        per = per + lam * (1 - ssim_frames(target, pred))
    return per.mean()


# ------------------------------------------------------------------ losses


def loss_phase1(frames: torch.Tensor, model: WorldModel, lam: float = 0.1) -> torch.Tensor:
    z = model.encode(frames)
    return recon_loss(frames, model.render(z), lam)


def _actions(z_t, z_next, model: WorldModel):
    """IDM actions with straight-through quantisation when a codebook exists."""
    u = model.idm(z_t, z_next)
    if model.codebook is None:
        return u, u, None
    q, idx = quantize(u, model.codebook.vectors, straight_through=True)
    return q, u, idx


def transition_loss(z: torch.Tensor, model: WorldModel):
    """Latent objective on encoded sequences ``z (B, T, d_z)``.

    Returns ``(loss, raw_actions, code_indices)``; the next state enters both the
    IDM and the regression target through a stop-gradient.
    """
    if z.shape[-2] < 2:
        raise ValueError("transition loss needs at least two frames")
    target = z[..., 1:, :].detach()
    z_t = z[..., :-1, :]
    u, raw, idx = _actions(z_t, target, model)
    pred = model.fdm(z_t, u)
    loss = ((target - pred) ** 2).mean()
    if idx is not None:
        loss = loss + model.codebook.commitment * ((raw - model.codebook.vectors[idx]) ** 2).mean()
    return loss, raw, idx


def loss_phase2(frames: torch.Tensor, model: WorldModel) -> torch.Tensor:
    if frames.shape[-4] < 2:
        raise ValueError("phase 2 needs sequences with T >= 2")
    return transition_loss(model.encode(frames), model)[0]


def action_matching_loss(z: torch.Tensor, u: torch.Tensor, model: WorldModel) -> torch.Tensor:
    """GCM regression onto pseudo-actions, unrolled through the memory contract.

    ``z`` is ``(B, T, d_z)`` and ``u`` is ``(B, T-1, d_u)``.
    """
    gcm = model.gcm
    steps = u.shape[-2]
    memory = gcm.init_memory(z.shape[:-2])
    total = 0.0
    for t in range(1, steps + 1):
        u_hat = gcm.decode(memory, z[..., t - 1, :], t)
        total = total + ((u[..., t - 1, :] - u_hat) ** 2).mean()
        memory = gcm.encode(memory, z[..., t - 1, :], u[..., t - 1, :], t)
    return total / steps


def pseudo_actions(frames: torch.Tensor, model: WorldModel):
    with torch.no_grad():
        z = model.encode(frames)
        u = model.action(z[..., :-1, :], z[..., 1:, :])
    return z, u


def loss_phase3(frames: torch.Tensor, model: WorldModel) -> torch.Tensor:
    if frames.shape[-4] < 2:
        raise ValueError("phase 3 needs sequences with T >= 2")
    z, u = pseudo_actions(frames, model)
    return action_matching_loss(z, u, model)


def loss_joint12(frames: torch.Tensor, model: WorldModel, lam: float = 0.1, latent_weight: float = 0.0):
    """Per-frame reconstruction plus pixel loss on rendered FDM predictions."""
    z = model.encode(frames)
    loss = recon_loss(frames, model.render(z), lam)
    target = z[..., 1:, :].detach()
    z_t = z[..., :-1, :]
    u, raw, idx = _actions(z_t, target, model)
    pred = model.fdm(z_t, u)
    loss = loss + recon_loss(frames[..., 1:, :, :, :], model.render(pred), lam)
    if latent_weight:
        loss = loss + latent_weight * ((target - pred) ** 2).mean()
    if idx is not None:
        loss = loss + model.codebook.commitment * ((raw - model.codebook.vectors[idx]) ** 2).mean()
    return loss, raw, idx


# ------------------------------------------------------------ augmentation


def augment_reverse(seq):
    return seq[::-1] if not isinstance(seq, torch.Tensor) else torch.flip(seq, dims=[0])


def augment_static(seq, T: int, offset: int = 0):
    """Crop ``P = T - 2`` frames from ``offset`` and repeat the first and last."""
    p = T - 2
    if p < 1:
        raise ValueError("static augmentation needs T >= 3")
    if len(seq) < offset + p:
        raise ValueError(f"sequence of length {len(seq)} too short for a crop of {p} at offset {offset}")
    crop = seq[offset : offset + p]
    if isinstance(crop, torch.Tensor):
        return torch.cat([crop[:1], crop, crop[-1:]], dim=0)
    if isinstance(crop, np.ndarray):
        return np.concatenate([crop[:1], crop, crop[-1:]], axis=0)
    return [crop[0], *crop, crop[-1]]


# ------------------------------------------------------------------ loop


@dataclass
class TrainResult:
    model: WorldModel
    log: list[tuple[int, str, float]]

    def log_text(self) -> str:
        return "".join(f"{s}\t{p}\t{v!r}\n" for s, p, v in self.log)


def check_prerequisites(model: WorldModel, phase: str) -> None:
    missing = [c for c in REQUIRES[phase] if c not in model.trained]
    if missing:
        raise PrerequisiteError(f"phase {phase} needs trained {', '.join(missing)} (load an earlier checkpoint)")


def _batch(frames: torch.Tensor, idx: torch.Tensor, config: TrainConfig, gen: torch.Generator) -> torch.Tensor:
    seqs = []
    T = frames.shape[1]
    for i in idx.tolist():
        seq = frames[i]
        if config.augment_reverse and torch.rand((), generator=gen).item() < config.reverse_prob:
            seq = augment_reverse(seq)
        if config.augment_static and torch.rand((), generator=gen).item() < config.static_prob:
            seq = augment_static(seq, T, config.static_offset)
        seqs.append(seq)
    return torch.stack(seqs)


def phase_loss(phase: str, batch: torch.Tensor, model: WorldModel, config: TrainConfig):
    """Returns ``(loss, raw_actions, code_indices)`` for one batch."""
    if phase == "1":
        return loss_phase1(batch, model, config.lambda_ssim), None, None
    if phase == "2":
        with torch.no_grad():
            z = model.encode(batch)
        return transition_loss(z, model)
    if phase == "3":
        return loss_phase3(batch, model), None, None
    return loss_joint12(batch, model, config.lambda_ssim, config.latent_weight)


def train(config: TrainConfig, dataset: VideoDataset, init: WorldModel | ModelConfig, callback=None) -> TrainResult:
    """Run Adam on the components the phase trains; everything else stays frozen."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    model = init if isinstance(init, WorldModel) else WorldModel(init, seed=config.seed)
    phase = config.phase
    check_prerequisites(model, phase)
    frames = torch.from_numpy(dataset.frames)
    if tuple(frames.shape[2:]) != tuple(model.config.encoder.input_shape):
        raise ValueError(f"dataset frames {tuple(frames.shape[2:])} do not match the model input shape")

    trainable = set(TRAINABLE[phase])
    params = []
    for name, p in model.named_parameters():
        on = name.split(".")[0] in trainable
        p.requires_grad_(on)
        if on:
            params.append(p)
    opt = torch.optim.Adam(params, lr=config.learning_rate, betas=(0.9, 0.999))
    gen = torch.Generator().manual_seed(config.seed)
    n = len(dataset)
    order = torch.randperm(n, generator=gen)
    cursor = 0
    log: list[tuple[int, str, float]] = []
    for step in range(1, config.steps + 1):
        if cursor + config.batch_size > n:
            order = torch.randperm(n, generator=gen)
            cursor = 0
        idx = order[cursor : cursor + min(config.batch_size, n)]
        cursor += config.batch_size
        batch = _batch(frames, idx, config, gen)
        loss, raw, code_idx = phase_loss(phase, batch, model, config)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if code_idx is not None:
            model.codebook.ema_update(raw.detach(), code_idx)
        log.append((step, phase, value))
        if callback is not None:
            callback(step, value)
    for p in model.parameters():
        p.requires_grad_(True)
    model.trained |= trainable
    if model.codebook is not None and {"idm", "fdm"} <= trainable:
        model.trained.add("codebook")
    return TrainResult(model, log)

