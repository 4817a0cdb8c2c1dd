"""Strided convolutional encoder: frame -> weight-space offset z_t."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .inr import DimensionError


@dataclass(frozen=True)
class EncoderConfig:
    input_shape: tuple[int, int, int] = (64, 64, 1)
    conv_channels: tuple[int, ...] = (64, 128, 256, 512)
    kernel: int = 3
    stride: int = 2
    out_dim: int = 961

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.kernel < 1 or not self.conv_channels:
            raise ValueError("invalid convolution settings")

    def feature_shape(self) -> tuple[int, int, int]:
        """(channels, h, w) of the last feature map."""
        h, w, _ = self.input_shape
        pad = self.kernel // 2
        for _ in self.conv_channels:
            h = (h + 2 * pad - self.kernel) // self.stride + 1
            w = (w + 2 * pad - self.kernel) // self.stride + 1
        return self.conv_channels[-1], h, w


def _fan_in_uniform_(module: nn.Module, generator: torch.Generator) -> None:
    weight = module.weight
    fan_in = weight[0].numel()
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        weight.copy_((torch.rand(weight.shape, generator=generator) * 2 - 1) * bound)
        module.bias.copy_((torch.rand(module.bias.shape, generator=generator) * 2 - 1) * bound)


class Encoder(nn.Module):
    """Conv(stride 2) + ReLU blocks, then flatten and a linear projection to d_z.

    Frames are channels-last, ``(..., H, W, C)``.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        in_ch = config.input_shape[2]
        convs = []
        for ch in config.conv_channels:
            convs.append(nn.Conv2d(in_ch, ch, config.kernel, config.stride, padding=config.kernel // 2))
            in_ch = ch
        self.convs = nn.ModuleList(convs)
        c, h, w = config.feature_shape()
        self.proj = nn.Linear(c * h * w, config.out_dim)

    def reset_parameters(self, seed: int) -> None:
        g = torch.Generator().manual_seed(seed)
        for m in list(self.convs) + [self.proj]:
            _fan_in_uniform_(m, g)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        shape = tuple(frames.shape[-3:])
        if shape != tuple(self.config.input_shape):
            raise DimensionError(f"expected frame shape {tuple(self.config.input_shape)}, got {shape}")
        lead = frames.shape[:-3]
        x = frames.reshape(-1, *shape).permute(0, 3, 1, 2)
        for conv in self.convs:
            x = torch.relu(conv(x))
        z = self.proj(x.flatten(1))
        return z.reshape(*lead, -1)


def init_encoder(config: EncoderConfig, seed: int) -> Encoder:
    enc = Encoder(config)
    enc.reset_parameters(seed)
    return enc


def encode(frame: torch.Tensor, encoder: Encoder) -> torch.Tensor:
    return encoder(frame)
