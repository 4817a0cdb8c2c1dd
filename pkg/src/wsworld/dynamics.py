"""Inverse/forward dynamics, the generative control model and action quantisation."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F

from .inr import DimensionError


class GcmStepError(ValueError):
    """Raised for out-of-range steps or illegal writes to the GCM memory."""


def mlp(in_dim: int, width: int, out_dim: int, n_linear: int) -> nn.Sequential:
    """``n_linear`` Linear layers with ReLU between them (none after the last)."""
    if n_linear < 1:
        raise ValueError("an MLP needs at least one linear layer")
    dims = [in_dim] + [width] * (n_linear - 1) + [out_dim]
    layers: list[nn.Module] = []
    for i in range(n_linear):
        layers.append(nn.Linear(dims[i], dims[i + 1]))
        if i < n_linear - 1:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


def pass_through(value: torch.Tensor, source: torch.Tensor) -> torch.Tensor:
    """Forward ``value`` exactly; backward as if it were ``source``."""
    return value.detach() + (source - source.detach())


def dyadic_round(x: torch.Tensor, bits: int) -> torch.Tensor:
    """Snap to multiples of ``2**-bits`` with a straight-through gradient.

    Sums and differences of such values are exact in float32 while their
    magnitudes stay below ``2**(23 - bits)``.
    """
    scale = float(2**bits)
    return pass_through(torch.round(x * scale) / scale, x)


def n_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def _check_last(x: torch.Tensor, n: int, name: str) -> None:
    if x.shape[-1] != n:
        raise DimensionError(f"{name}: expected last dimension {n}, got {x.shape[-1]}")


# --------------------------------------------------------------------------- IDM


@dataclass(frozen=True)
class IdmConfig:
    d_z: int = 961
    d_u: int = 4
    width: int = 961
    n_layers: int = 4


class InverseDynamics(nn.Module):
    def __init__(self, config: IdmConfig):
        super().__init__()
        self.config = config
        self.net = mlp(2 * config.d_z, config.width, config.d_u, config.n_layers)

    def forward(self, z_t: torch.Tensor, z_next: torch.Tensor) -> torch.Tensor:
        _check_last(z_t, self.config.d_z, "idm z_t")
        _check_last(z_next, self.config.d_z, "idm z_next")
        return self.net(torch.cat([z_t, z_next], dim=-1))


def idm_infer(z_t, z_next, idm: InverseDynamics) -> torch.Tensor:
    return idm(z_t, z_next)


# --------------------------------------------------------------------------- FDM


@dataclass(frozen=True)
class FdmConfig:
    d_z: int = 961
    d_u: int = 4
    mode: str = "additive"
    hidden_width: int = 1922
    depth: int = 4
    grid_bits: int = 16  # additive branch outputs snapped to 2**-grid_bits; 0 disables

    def __post_init__(self):
        if self.mode not in ("additive", "joint"):
            raise ValueError(f"unknown FDM mode {self.mode!r}")


def _mlp_count(dims: list[int]) -> int:
    return sum(dims[i] * dims[i + 1] + dims[i + 1] for i in range(len(dims) - 1))


def additive_param_count(config: FdmConfig) -> int:
    hid = [config.hidden_width] * (config.depth - 1)
    return _mlp_count([config.d_z, *hid, config.d_z]) + _mlp_count([config.d_u, *hid, config.d_z])


def joint_width(config: FdmConfig) -> int:
    """Hidden width giving a joint MLP the same parameter budget as A + B."""
    target = additive_param_count(config)
    n_hidden = config.depth - 1
    d_in, d_out = config.d_z + config.d_u, config.d_z

    def count(w: int) -> int:
        return _mlp_count([d_in] + [w] * n_hidden + [d_out])

    lo, hi = 1, 1
    while count(hi) < target:
        hi *= 2
    while lo < hi:
        mid = (lo + hi) // 2
        if count(mid) < target:
            lo = mid + 1
        else:
            hi = mid
    # pick the closer of the two neighbours
    return min((lo - 1, lo), key=lambda w: abs(count(w) - target)) if lo > 1 else lo


class ForwardDynamics(nn.Module):
    """Additive ``A(z) + B(u)`` or a joint MLP on ``[z, u]``."""

    def __init__(self, config: FdmConfig):
        super().__init__()
        self.config = config
        if config.mode == "additive":
            self.A = mlp(config.d_z, config.hidden_width, config.d_z, config.depth)
            self.B = mlp(config.d_u, config.hidden_width, config.d_z, config.depth)
        else:
            self.net = mlp(config.d_z + config.d_u, joint_width(config), config.d_z, config.depth)

    def forward(self, z_t: torch.Tensor, u_t: torch.Tensor) -> torch.Tensor:
        _check_last(z_t, self.config.d_z, "fdm z_t")
        _check_last(u_t, self.config.d_u, "fdm u_t")
        if self.config.mode == "additive":
            return self.content(z_t) + self.motion(u_t)
        return self.net(torch.cat([z_t, u_t], dim=-1))

    def _snap(self, x: torch.Tensor) -> torch.Tensor:
        # a shared dyadic grid keeps fdm(z, u1) - fdm(z, u2) bit-identical for every z
        return dyadic_round(x, self.config.grid_bits) if self.config.grid_bits else x

    def content(self, z_t: torch.Tensor) -> torch.Tensor:
        """The ``A(z)`` branch of the additive model."""
        return self._snap(self.A(z_t))

    def motion(self, u_t: torch.Tensor) -> torch.Tensor:
        """The ``B(u)`` branch of the additive model."""
        return self._snap(self.B(u_t))


def fdm_step(z_t, u_t, fdm: ForwardDynamics) -> torch.Tensor:
    return fdm(z_t, u_t)


# --------------------------------------------------------------------------- GCM


@dataclass(frozen=True)
class GcmConfig:
    d_z: int = 961
    d_u: int = 4
    kind: str = "gru"
    hidden: int = 256
    decoder_width: int = 256
    blocks: int = 4
    heads: int = 8
    mlp_ratio: int = 4
    max_T: int = 32

    def __post_init__(self):
        if self.kind not in ("gru", "lstm", "transformer"):
            raise ValueError(f"unknown GCM kind {self.kind!r}")
        if self.kind == "transformer" and self.hidden % self.heads:
            raise ValueError("transformer hidden size must be divisible by heads")


@dataclass
class GcmMemory:
    """Recurrent state ``h`` (and ``c`` for LSTM), or the transformer token buffer.

    ``cursor`` is the next row the transformer buffer expects to be written
    (1-based); recurrent memories track it only for bookkeeping.
    """

    kind: str
    h: torch.Tensor | None = None
    c: torch.Tensor | None = None
    buffer: torch.Tensor | None = None
    cursor: int = 1


class GRUCell(nn.Module):
    """GRU with input bias on all gates and a separate candidate hidden bias."""

    def __init__(self, in_dim: int, hidden: int):
        super().__init__()
        self.hidden = hidden
        bound = 1.0 / math.sqrt(hidden)
        self.weight_ih = nn.Parameter(torch.empty(3 * hidden, in_dim).uniform_(-bound, bound))
        self.weight_hh = nn.Parameter(torch.empty(3 * hidden, hidden).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.empty(3 * hidden).uniform_(-bound, bound))
        self.bias_n = nn.Parameter(torch.empty(hidden).uniform_(-bound, bound))

    def forward(self, x: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        ig = x @ self.weight_ih.T + self.bias
        hg = h @ self.weight_hh.T
        i_r, i_z, i_n = ig.chunk(3, dim=-1)
        h_r, h_z, h_n = hg.chunk(3, dim=-1)
        r = torch.sigmoid(i_r + h_r)
        z = torch.sigmoid(i_z + h_z)
        n = torch.tanh(i_n + r * (h_n + self.bias_n))
        return (1 - z) * n + z * h


class LSTMCell(nn.Module):
    def __init__(self, in_dim: int, hidden: int):
        super().__init__()
        self.hidden = hidden
        bound = 1.0 / math.sqrt(hidden)
        self.weight_ih = nn.Parameter(torch.empty(4 * hidden, in_dim).uniform_(-bound, bound))
        self.weight_hh = nn.Parameter(torch.empty(4 * hidden, hidden).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.empty(4 * hidden).uniform_(-bound, bound))

    def forward(self, x, state):
        h, c = state
        gates = x @ self.weight_ih.T + h @ self.weight_hh.T + self.bias
        i, f, g, o = gates.chunk(4, dim=-1)
        c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
        h = torch.sigmoid(o) * torch.tanh(c)
        return h, c


class CausalBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim))

    def attend(self, x: torch.Tensor) -> torch.Tensor:
        *lead, T, D = x.shape
        hd = D // self.heads
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        split = lambda t: t.reshape(*lead, T, self.heads, hd).transpose(-2, -3)  # noqa: E731
        q, k, v = split(q), split(k), split(v)
        scores = q @ k.transpose(-1, -2) / math.sqrt(hd)
        causal = torch.ones(T, T, dtype=torch.bool).tril()
        scores = scores.masked_fill(~causal, float("-inf"))
        y = torch.softmax(scores, dim=-1) @ v
        return self.out(y.transpose(-2, -3).reshape(*lead, T, D))

    def forward(self, x):
        x = x + self.attend(self.ln1(x))
        return x + self.mlp(self.ln2(x))


class GenerativeControl(nn.Module):
    """Causal action generator exposing the init / decode / encode memory contract."""

    def __init__(self, config: GcmConfig):
        super().__init__()
        self.config = config
        d_in = config.d_z + config.d_u
        if config.kind == "gru":
            self.cell = GRUCell(d_in, config.hidden)
        elif config.kind == "lstm":
            self.cell = LSTMCell(d_in, config.hidden)
        else:
            self.in_proj = nn.Linear(d_in, config.hidden)
            self.pos = nn.Parameter(torch.randn(config.max_T, config.hidden) * 0.02)
            self.blocks = nn.ModuleList(
                CausalBlock(config.hidden, config.heads, config.mlp_ratio) for _ in range(config.blocks)
            )
            self.head = nn.Linear(config.hidden, config.d_u)
        if config.kind != "transformer":
            self.decoder = mlp(config.hidden + config.d_z, config.decoder_width, config.d_u, 2)

    # memory contract -------------------------------------------------------

    def init_memory(self, batch_shape: tuple[int, ...] = ()) -> GcmMemory:
        cfg = self.config
        dtype = next(self.parameters()).dtype
        if cfg.kind == "gru":
            return GcmMemory("gru", h=torch.zeros(*batch_shape, cfg.hidden, dtype=dtype))
        if cfg.kind == "lstm":
            zeros = torch.zeros(*batch_shape, cfg.hidden, dtype=dtype)
            return GcmMemory("lstm", h=zeros, c=zeros.clone())
        return GcmMemory("transformer", buffer=torch.zeros(*batch_shape, cfg.max_T, cfg.hidden, dtype=dtype))

    def _check_step(self, t: int) -> None:
        if t < 1 or (self.config.kind == "transformer" and t > self.config.max_T):
            raise GcmStepError(f"step {t} outside [1, {self.config.max_T}]")

    def decode(self, memory: GcmMemory, z_t: torch.Tensor, t: int) -> torch.Tensor:
        self._check_step(t)
        _check_last(z_t, self.config.d_z, "gcm z_t")
        if self.config.kind != "transformer":
            return self.decoder(torch.cat([memory.h, z_t], dim=-1))
        pad = z_t.new_zeros(*z_t.shape[:-1], self.config.d_u)
        query = self.in_proj(torch.cat([z_t, pad], dim=-1))
        buf = memory.buffer
        buf = torch.cat([buf[..., : t - 1, :], query.unsqueeze(-2), buf[..., t:, :]], dim=-2)
        x = buf + self.pos
        for block in self.blocks:
            x = block(x)
        return self.head(x[..., t - 1, :])

    def encode(self, memory: GcmMemory, z_t: torch.Tensor, u_t: torch.Tensor, t: int) -> GcmMemory:
        self._check_step(t)
        _check_last(z_t, self.config.d_z, "gcm z_t")
        _check_last(u_t, self.config.d_u, "gcm u_t")
        x = torch.cat([z_t, u_t], dim=-1)
        if self.config.kind == "gru":
            return GcmMemory("gru", h=self.cell(x, memory.h), cursor=t + 1)
        if self.config.kind == "lstm":
            h, c = self.cell(x, (memory.h, memory.c))
            return GcmMemory("lstm", h=h, c=c, cursor=t + 1)
        if t < memory.cursor:
            raise GcmStepError(f"buffer row {t} already written")
        if t > memory.cursor:
            raise GcmStepError(f"buffer row {memory.cursor} must be written before row {t}")
        token = self.in_proj(x).unsqueeze(-2)
        buf = memory.buffer
        buf = torch.cat([buf[..., : t - 1, :], token, buf[..., t:, :]], dim=-2)
        return GcmMemory("transformer", buffer=buf, cursor=t + 1)


def gcm_init(gcm: GenerativeControl, batch_shape=()) -> GcmMemory:
    return gcm.init_memory(batch_shape)


# --------------------------------------------------------------------------- VQ


class EmptyCodebookError(ValueError):
    pass


class Codebook(nn.Module):
    """Action codebook updated by exponential moving averages (no gradients)."""

    def __init__(self, n_codes: int = 200, d_u: int = 2, decay: float = 0.99, commitment: float = 0.25):
        super().__init__()
        if n_codes < 1:
            raise EmptyCodebookError("codebook needs at least one vector")
        self.decay = decay
        self.commitment = commitment
        self.register_buffer("vectors", torch.randn(n_codes, d_u))
        self.register_buffer("ema_counts", torch.ones(n_codes))
        self.register_buffer("ema_sums", self.vectors.clone())

    @torch.no_grad()
    def ema_update(self, u: torch.Tensor, index: torch.Tensor, eps: float = 1e-5) -> None:
        flat_u = u.reshape(-1, u.shape[-1])
        onehot = F.one_hot(index.reshape(-1), self.vectors.shape[0]).to(flat_u.dtype)
        self.ema_counts.mul_(self.decay).add_(onehot.sum(0), alpha=1 - self.decay)
        self.ema_sums.mul_(self.decay).add_(onehot.T @ flat_u, alpha=1 - self.decay)
        n = self.ema_counts.sum()
        counts = (self.ema_counts + eps) / (n + self.vectors.shape[0] * eps) * n
        self.vectors.copy_(self.ema_sums / counts.unsqueeze(-1))


def quantize(u: torch.Tensor, codebook: torch.Tensor, straight_through: bool = False):
    """Nearest codebook row (Euclidean, lowest index on ties).

    With ``straight_through`` the returned value is ``sg(q) + (u - sg(u))``:
    bit-equal to ``q`` in the forward pass, identity Jacobian in the backward.
    """
    if codebook.shape[0] == 0:
        raise EmptyCodebookError("cannot quantise against an empty codebook")
    _check_last(u, codebook.shape[-1], "quantize")
    dist = ((u.unsqueeze(-2) - codebook) ** 2).sum(-1)
    index = torch.argmin(dist, dim=-1)
    q = codebook[index]
    if straight_through:
        q = pass_through(q, u)
    return q, index

