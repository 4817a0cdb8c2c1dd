"""World-model container: encoder, base weights, IDM, FDM, GCM and optional codebook."""
from __future__ import annotations

from dataclasses import dataclass, fields

import torch
from torch import nn

from . import inr
from .dynamics import (
    Codebook,
    FdmConfig,
    ForwardDynamics,
    GcmConfig,
    GenerativeControl,
    IdmConfig,
    InverseDynamics,
    quantize,
)
from .encoder import EncoderConfig, Encoder

COMPONENTS = ("encoder", "zbar", "idm", "fdm", "gcm", "codebook")


@dataclass(frozen=True)
class ModelConfig:
    """Flat architecture description; every sub-config is derived from it."""

    height: int = 64
    width: int = 64
    channels: int = 1
    # INR
    inr_depth: int = 6
    inr_width: int = 12
    fourier_bands: int = 6
    raw_coords: bool = True
    # encoder
    enc_channels: tuple[int, ...] = (64, 128, 256, 512)
    enc_kernel: int = 3
    enc_stride: int = 2
    # dynamics
    d_u: int = 4
    idm_width: int = 0  # 0 -> d_z
    idm_layers: int = 4
    fdm_mode: str = "additive"
    fdm_width: int = 0  # 0 -> 2 * d_z
    fdm_depth: int = 4
    fdm_grid_bits: int = 16
    gcm_kind: str = "gru"
    gcm_hidden: int = 256
    gcm_decoder_width: int = 256
    gcm_blocks: int = 4
    gcm_heads: int = 8
    gcm_mlp_ratio: int = 4
    gcm_max_T: int = 32
    # discrete actions (0 disables the codebook)
    n_codes: int = 0
    commitment: float = 0.25

    @property
    def inr(self) -> inr.InrArchitecture:
        return inr.InrArchitecture(
            depth=self.inr_depth,
            width=self.inr_width,
            out_channels=self.channels,
            fourier_bands=self.fourier_bands,
            include_raw_coords=self.raw_coords,
        )

    @property
    def d_z(self) -> int:
        return self.inr.param_count()

    @property
    def encoder(self) -> EncoderConfig:
        return EncoderConfig(
            input_shape=(self.height, self.width, self.channels),
            conv_channels=tuple(self.enc_channels),
            kernel=self.enc_kernel,
            stride=self.enc_stride,
            out_dim=self.d_z,
        )

    @property
    def idm(self) -> IdmConfig:
        return IdmConfig(self.d_z, self.d_u, self.idm_width or self.d_z, self.idm_layers)

    @property
    def fdm(self) -> FdmConfig:
        return FdmConfig(
            self.d_z, self.d_u, self.fdm_mode, self.fdm_width or 2 * self.d_z, self.fdm_depth, self.fdm_grid_bits
        )

    @property
    def gcm(self) -> GcmConfig:
        return GcmConfig(
            d_z=self.d_z,
            d_u=self.d_u,
            kind=self.gcm_kind,
            hidden=self.gcm_hidden,
            decoder_width=self.gcm_decoder_width,
            blocks=self.gcm_blocks,
            heads=self.gcm_heads,
            mlp_ratio=self.gcm_mlp_ratio,
            max_T=self.gcm_max_T,
        )

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "ModelConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name in values:
                kwargs[f.name] = parse_value(values[f.name], f.default)
        return cls(**kwargs)


def parse_value(text: str, like):
    """Parse ``text`` into the type of the default value ``like``."""
    text = text.strip()
    if isinstance(like, bool):
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, tuple):
        cast = float if any(isinstance(x, float) for x in like) else int
        return tuple(cast(x) for x in text.split(",") if x.strip())
    return text


# presets matching the published configurations
MOVING_MNIST = ModelConfig(idm_layers=3)
PHYWORLD = ModelConfig(height=128, width=128, channels=3, gcm_kind="lstm")
WEATHERBENCH = ModelConfig(height=32, width=64, d_u=16, gcm_kind="transformer")


class WorldModel(nn.Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.encoder = Encoder(config.encoder)
            self.encoder.reset_parameters(seed)
            self.zbar = nn.Parameter(inr.init_weights(config.inr, torch.Generator().manual_seed(seed + 1)))
            self.idm = InverseDynamics(config.idm)
            self.fdm = ForwardDynamics(config.fdm)
            self.gcm = GenerativeControl(config.gcm)
            self.codebook = (
                Codebook(config.n_codes, config.d_u, commitment=config.commitment) if config.n_codes else None
            )
        # components that have been trained (or loaded from a checkpoint)
        self.trained: set[str] = set()
        self.meta: dict[str, str] = {}

    @property
    def inr_arch(self) -> inr.InrArchitecture:
        return self.config.inr

    @property
    def train_grid(self) -> inr.CoordinateGrid:
        return inr.CoordinateGrid(self.config.height, self.config.width)

    def component(self, name: str) -> nn.Module | nn.Parameter | None:
        return getattr(self, name)

    def render(self, z: torch.Tensor, grid: inr.CoordinateGrid | None = None, mask=None) -> torch.Tensor:
        """Frames from offsets ``z`` (the base weights are added here)."""
        return inr.render(self.zbar + z, grid or self.train_grid, self.inr_arch, mask)

    def encode(self, frames: torch.Tensor) -> torch.Tensor:
        return self.encoder(frames)

    def action(self, z_t: torch.Tensor, z_next: torch.Tensor) -> torch.Tensor:
        """IDM action, snapped to the codebook when actions are discrete."""
        u = self.idm(z_t, z_next)
        if self.codebook is not None:
            u, _ = quantize(u, self.codebook.vectors)
        return u

    def nyquist_mask(self) -> inr.FrequencyMask:
        return inr.nyquist_mask(self.config.height, self.config.width, self.config.fourier_bands)


def build_model(config: ModelConfig, seed: int = 0) -> WorldModel:
    return WorldModel(config, seed)
