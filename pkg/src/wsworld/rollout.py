"""Context-conditioned generation, content/motion retargeting and super-resolution."""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import torch

from .dynamics import quantize
from .inr import CoordinateGrid, DimensionError
from .model import WorldModel


class ContextError(ValueError):
    """Not enough reference frames for the requested context ratio."""


@dataclass(frozen=True)
class RolloutConfig:
    T_inf: int
    rho: float = 0.0
    scale: float = 1
    apply_mask: bool = False

    def __post_init__(self):
        if self.T_inf < 1:
            raise ValueError("T_inf must be >= 1")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        if self.scale <= 0:
            raise ValueError("scale must be positive")

    def uses_idm(self, t: int) -> bool:
        return t / self.T_inf < self.rho

    def frames_needed(self) -> int:
        """Reference frames consumed: o_1 plus o_{t+1} for every IDM step."""
        idm_steps = [t for t in range(1, self.T_inf) if self.uses_idm(t)]
        return max(idm_steps) + 1 if idm_steps else 1


@dataclass
class Intervention:
    steps: set[int] = field(default_factory=set)
    alien_states: dict[int, torch.Tensor] = field(default_factory=dict)
    alien_actions: dict[int, torch.Tensor] = field(default_factory=dict)

    def __post_init__(self):
        self.steps = set(self.steps)
        stray = (set(self.alien_states) | set(self.alien_actions)) - self.steps
        if stray:
            raise ValueError(f"alien values given for steps outside the intervention set: {sorted(stray)}")


@dataclass
class RolloutTrace:
    frames: torch.Tensor  # (B, T_inf, H, W, C)
    latents: torch.Tensor  # (B, T_inf, d_z) states as rendered
    actions: torch.Tensor  # (B, T_inf - 1, d_u) actions fed to the FDM
    action_source: list[str]  # per step: idm | gcm | alien
    content_swapped: list[bool]


def scaled_grid(model: WorldModel, scale) -> CoordinateGrid:
    s = Fraction(scale).limit_denominator(1000)
    h, w = model.config.height * s, model.config.width * s
    return CoordinateGrid(max(1, round(h)), max(1, round(w)))


def retarget(
    ref: torch.Tensor,
    config: RolloutConfig,
    model: WorldModel,
    grid: CoordinateGrid | None = None,
    iv: Intervention | None = None,
) -> RolloutTrace:
    """Generation with optional state/action substitution at the intervention steps.

    Per step: render, choose the action (IDM while ``t / T_inf < rho``, else the
    GCM), update the GCM memory, apply interventions, then step the FDM.  The
    action of the final step is never computed since ``z_{T_inf+1}`` is not
    rendered.
    """
    iv = iv or Intervention()
    single = ref.dim() == 4
    if single:
        ref = ref.unsqueeze(0)
    need = config.frames_needed()
    if ref.shape[1] < need:
        raise ContextError(f"rho={config.rho} over {config.T_inf} steps needs {need} reference frames, got {ref.shape[1]}")
    grid = grid or model.train_grid
    mask = model.nyquist_mask() if config.apply_mask else None
    d_z, d_u = model.config.d_z, model.config.d_u
    for t, zs in iv.alien_states.items():
        if zs.shape[-1] != d_z:
            raise DimensionError(f"alien state at step {t} has length {zs.shape[-1]}, expected {d_z}")
    for t, us in iv.alien_actions.items():
        if us.shape[-1] != d_u:
            raise DimensionError(f"alien action at step {t} has length {us.shape[-1]}, expected {d_u}")

    batch = ref.shape[0]
    frames, latents, actions, sources, swapped = [], [], [], [], []
    with torch.no_grad():
        z = model.encode(ref[:, 0])
        memory = model.gcm.init_memory((batch,))
        for t in range(1, config.T_inf + 1):
            frames.append(model.render(z, grid, mask))
            latents.append(z)
            if t == config.T_inf:
                break
            if config.uses_idm(t):
                u = model.idm(z, model.encode(ref[:, t]))
                src = "idm"
            else:
                u = model.gcm.decode(memory, z, t)
                src = "gcm"
            if model.codebook is not None:
                u, _ = quantize(u, model.codebook.vectors)
            memory = model.gcm.encode(memory, z, u, t)
            z_step = z
            if t in iv.steps:
                if t in iv.alien_states:
                    z_step = iv.alien_states[t].to(z.dtype).expand_as(z)
                if t in iv.alien_actions:
                    u = iv.alien_actions[t].to(u.dtype).expand_as(u)
                    src = "alien"
            swapped.append(z_step is not z)
            sources.append(src)
            actions.append(u)
            z = model.fdm(z_step, u)
    stack = lambda xs, shape: torch.stack(xs, 1) if xs else torch.zeros(shape)  # noqa: E731
    trace = RolloutTrace(
        frames=torch.stack(frames, 1),
        latents=torch.stack(latents, 1),
        actions=stack(actions, (batch, 0, d_u)),
        action_source=sources,
        content_swapped=swapped,
    )
    if single:
        trace.frames, trace.latents, trace.actions = trace.frames[0], trace.latents[0], trace.actions[0]
    return trace


def generate(ref, config: RolloutConfig, model: WorldModel, grid: CoordinateGrid | None = None) -> RolloutTrace:
    return retarget(ref, config, model, grid, None)


def superresolve(latents: torch.Tensor, model: WorldModel, scale=1, apply_mask: bool = True) -> torch.Tensor:
    """Render offsets on an ``(s*H) x (s*W)`` grid; the mask follows the training grid."""
    grid = scaled_grid(model, scale)
    mask = model.nyquist_mask() if apply_mask else None
    with torch.no_grad():
        return model.render(latents, grid, mask)


def export_frames(frames: torch.Tensor) -> torch.Tensor:
    """Clamp to [0, 1] for export and evaluation."""
    return frames.clamp(0.0, 1.0)


def quantize_8bit(frames: torch.Tensor) -> torch.Tensor:
    return torch.round(export_frames(frames) * 255).to(torch.uint8)


def action_table(trace: RolloutTrace) -> str:
    """Plain-text sidecar: one row per (sequence, step) with source and action."""
    acts = trace.actions if trace.actions.dim() == 3 else trace.actions.unsqueeze(0)
    lines = ["sequence\tstep\tsource\tcontent_swapped\taction"]
    for b in range(acts.shape[0]):
        for t, src in enumerate(trace.action_source):
            vec = ",".join(f"{v:.9g}" for v in acts[b, t].tolist())
            lines.append(f"{b}\t{t + 1}\t{src}\t{int(trace.content_swapped[t])}\t{vec}")
    return "\n".join(lines) + "\n"


def relative_change(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-step ``|a - b| / |b|`` over the last dimension."""
    return (a - b).norm(dim=-1) / b.norm(dim=-1).clamp_min(1e-12)

