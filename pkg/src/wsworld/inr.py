"""Fourier-feature coordinate MLP rendered directly from a flat weight vector.

The flat layout is frozen: layer-major, each layer's weight matrix (row-major,
shape ``(out, in)``) followed by its bias.  The embedding layout is
``[x block, y block, raw x, raw y]`` where each axis block is
``sin(2^0 pi v), cos(2^0 pi v), ..., sin(2^(K-1) pi v), cos(2^(K-1) pi v)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch


class DimensionError(ValueError):
    """Raised when a vector or array does not have the expected size."""


@dataclass(frozen=True)
class InrArchitecture:
    depth: int = 6
    width: int = 12
    out_channels: int = 1
    fourier_bands: int = 6
    include_raw_coords: bool = True
    activation: str = "relu"

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if self.width < 1:
            raise ValueError(f"width must be >= 1, got {self.width}")
        if self.fourier_bands < 1:
            raise ValueError(f"fourier_bands must be >= 1, got {self.fourier_bands}")
        if self.out_channels < 1:
            raise ValueError(f"out_channels must be >= 1, got {self.out_channels}")
        if self.activation != "relu":
            raise ValueError("only the 'relu' activation is supported")

    @property
    def in_dim(self) -> int:
        return 4 * self.fourier_bands + (2 if self.include_raw_coords else 0)

    def layer_shapes(self) -> list[tuple[int, int]]:
        """(out, in) for every linear layer, input layer first."""
        dims = [self.in_dim] + [self.width] * (self.depth - 1) + [self.out_channels]
        return [(dims[i + 1], dims[i]) for i in range(self.depth)]

    def param_count(self) -> int:
        return sum(o * i + o for o, i in self.layer_shapes())


def param_count(arch: InrArchitecture) -> int:
    return arch.param_count()


@dataclass(frozen=True)
class FrequencyMask:
    x_keep: tuple[bool, ...]
    y_keep: tuple[bool, ...]

    def __post_init__(self):
        if len(self.x_keep) != len(self.y_keep):
            raise DimensionError("x and y masks must have the same number of bands")

    @classmethod
    def all_pass(cls, bands: int) -> "FrequencyMask":
        return cls((True,) * bands, (True,) * bands)

    @property
    def bands(self) -> int:
        return len(self.x_keep)

    def multiplier(self, include_raw: bool, dtype=torch.float32) -> torch.Tensor:
        """Element-wise 0/1 multiplier over the full embedding vector."""
        x = [float(k) for k in self.x_keep for _ in range(2)]
        y = [float(k) for k in self.y_keep for _ in range(2)]
        raw = [1.0, 1.0] if include_raw else []
        return torch.tensor(x + y + raw, dtype=dtype)


def nyquist_mask(train_h: int, train_w: int, bands: int) -> FrequencyMask:
    """Keep band k of an axis iff 2**(k-1) < n/4, i.e. k < log2(n) - 1.

    Evaluated as the integer test ``2**(k+1) < n`` so no log rounding enters.
    """
    if train_h < 2 or train_w < 2:
        raise ValueError("training grid must be at least 2x2")
    keep = lambda n: tuple(2 ** (k + 1) < n for k in range(bands))  # noqa: E731
    return FrequencyMask(x_keep=keep(train_w), y_keep=keep(train_h))


@dataclass(frozen=True)
class CoordinateGrid:
    """Pixel-centre grid over [-1, 1]^2; x runs across columns, y down rows."""

    rows: int
    cols: int

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("grid must have at least one row and column")

    def coords(self, dtype=torch.float32) -> torch.Tensor:
        ys = (2 * torch.arange(self.rows, dtype=torch.float64) + 1) / self.rows - 1
        xs = (2 * torch.arange(self.cols, dtype=torch.float64) + 1) / self.cols - 1
        yy, xx = torch.meshgrid(ys, xs, indexing="ij")
        return torch.stack([xx, yy], dim=-1).to(dtype)


def fourier_embed(
    coords: torch.Tensor,
    bands: int,
    mask: FrequencyMask | None = None,
    raw: bool = True,
) -> torch.Tensor:
    """Embed ``(..., 2)`` coordinates into ``(..., 4*bands [+2])`` features."""
    coords = torch.as_tensor(coords)
    freqs = (2.0 ** torch.arange(bands, dtype=coords.dtype)) * math.pi
    blocks = []
    for axis in range(2):
        phase = coords[..., axis : axis + 1] * freqs
        # interleave sin/cos per band
        blocks.append(torch.stack([torch.sin(phase), torch.cos(phase)], dim=-1).flatten(-2))
    if raw:
        blocks.append(coords)
    emb = torch.cat(blocks, dim=-1)
    if mask is not None:
        if mask.bands != bands:
            raise DimensionError(f"mask has {mask.bands} bands, embedding has {bands}")
        emb = emb * mask.multiplier(raw, dtype=emb.dtype)
    return emb


def unflatten(weights: torch.Tensor, arch: InrArchitecture) -> list[tuple[torch.Tensor, torch.Tensor]]:
    """Split ``(..., d_z)`` into per-layer ``(W (..., out, in), b (..., out))``."""
    expected = arch.param_count()
    if weights.shape[-1] != expected:
        raise DimensionError(f"expected weight vector of length {expected}, got {weights.shape[-1]}")
    lead = weights.shape[:-1]
    layers = []
    offset = 0
    for out_f, in_f in arch.layer_shapes():
        w = weights[..., offset : offset + out_f * in_f].reshape(*lead, out_f, in_f)
        offset += out_f * in_f
        b = weights[..., offset : offset + out_f]
        offset += out_f
        layers.append((w, b))
    return layers


def flatten(layers: Sequence[tuple[torch.Tensor, torch.Tensor]]) -> torch.Tensor:
    parts = []
    for w, b in layers:
        parts.append(w.flatten(-2))
        parts.append(b)
    return torch.cat(parts, dim=-1)


def init_weights(arch: InrArchitecture, generator: torch.Generator | None = None) -> torch.Tensor:
    """Fan-in uniform initialisation, flattened."""
    layers = []
    for out_f, in_f in arch.layer_shapes():
        bound = 1.0 / math.sqrt(in_f)
        w = (torch.rand(out_f, in_f, generator=generator) * 2 - 1) * bound
        b = (torch.rand(out_f, generator=generator) * 2 - 1) * bound
        layers.append((w, b))
    return flatten(layers)


def render(
    weights: torch.Tensor,
    grid: CoordinateGrid,
    arch: InrArchitecture,
    mask: FrequencyMask | None = None,
) -> torch.Tensor:
    """Evaluate the INR on every grid point.

    ``weights`` may carry leading batch dimensions; the result has shape
    ``(..., rows, cols, out_channels)``.  Output is not clamped.
    """
    layers = unflatten(weights, arch)
    feats = fourier_embed(
        grid.coords(dtype=weights.dtype), arch.fourier_bands, mask, arch.include_raw_coords
    ).reshape(-1, arch.in_dim)
    h = feats
    for i, (w, b) in enumerate(layers):
        h = h @ w.transpose(-1, -2) + b.unsqueeze(-2)
        if i < len(layers) - 1:
            h = torch.relu(h)
    return h.reshape(*weights.shape[:-1], grid.rows, grid.cols, arch.out_channels)
