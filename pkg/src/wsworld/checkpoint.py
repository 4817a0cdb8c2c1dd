"""Self-describing binary checkpoint container.

Layout (little-endian): magic ``NVCK``, u16 version, u32 section count, then per
section u16 name length, UTF-8 name, u8 dtype, u8 rank, u32 dims, payload.
dtype 0 is f32 (parameters), dtype 1 is raw bytes (the UTF-8 config text).
The ``config`` section carries the model architecture followed by ``meta.*``
lines (phase, step, seed, trained components).
"""
from __future__ import annotations

import struct

import numpy as np
import torch

from .model import COMPONENTS, ModelConfig, WorldModel
from .runconfig import parse_kv
from .synthdata import _atomic_write

MAGIC = b"NVCK"
VERSION = 1
DTYPE_F32 = 0
DTYPE_BYTES = 1
CONFIG_SECTION = "config"

# components a checkpoint must hold before it can be used for a purpose
PURPOSES = {
    "phase1": (),
    "joint12": (),
    "phase2": ("encoder", "zbar"),
    "phase3": ("encoder", "zbar", "idm", "fdm"),
    "rollout": ("encoder", "zbar", "idm", "fdm", "gcm"),
    "superres": ("encoder", "zbar", "idm", "fdm"),
}


class CheckpointFormatError(ValueError):
    pass


class CheckpointMagicError(CheckpointFormatError):
    pass


class CheckpointVersionError(CheckpointFormatError):
    pass


class CheckpointTruncatedError(CheckpointFormatError):
    pass


class MissingSectionError(CheckpointFormatError):
    pass


def _component_of(name: str) -> str:
    return name.split(".", 1)[0]


def _section(name: str, dtype: int, shape: tuple[int, ...], payload: bytes) -> bytes:
    raw = name.encode("utf-8")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<BB", dtype, len(shape))
    return head + struct.pack(f"<{len(shape)}I", *shape) + payload


def state_sections(model: WorldModel) -> dict[str, torch.Tensor]:
    """Parameters and buffers of the trained components, keyed by state-dict name."""
    return {k: v for k, v in model.state_dict().items() if _component_of(k) in model.trained}


def checkpoint_bytes(model: WorldModel, meta: dict[str, object] | None = None) -> bytes:
    meta = {**model.meta, **(meta or {})}
    meta["trained"] = ",".join(c for c in COMPONENTS if c in model.trained)
    text = model.config.to_text() + "".join(f"meta.{k} = {v}\n" for k, v in meta.items())
    body = [_section(CONFIG_SECTION, DTYPE_BYTES, (len(text.encode()),), text.encode())]
    for name, tensor in state_sections(model).items():
        arr = np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype="<f4")
        body.append(_section(name, DTYPE_F32, arr.shape, arr.tobytes()))
    return MAGIC + struct.pack("<HI", VERSION, len(body)) + b"".join(body)


def save_checkpoint(model: WorldModel, path, meta: dict[str, object] | None = None) -> None:
    _atomic_write(path, checkpoint_bytes(model, meta))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(f"checkpoint truncated at byte {len(self.data)} (needed {self.pos + n})")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def parse_sections(data: bytes) -> dict[str, np.ndarray | bytes]:
    r = _Reader(data)
    if len(data) >= 4 and data[:4] != MAGIC:
        raise CheckpointMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    r.take(4)
    version, count = r.unpack("<HI")
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, this reader understands {VERSION}")
    sections: dict[str, np.ndarray | bytes] = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("utf-8")
        dtype, rank = r.unpack("<BB")
        shape = r.unpack(f"<{rank}I")
        size = int(np.prod(shape, dtype=np.int64))
        if name in sections:
            raise CheckpointFormatError(f"duplicate section {name!r}")
        if dtype == DTYPE_F32:
            sections[name] = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape).copy()
        elif dtype == DTYPE_BYTES:
            sections[name] = r.take(size)
        else:
            raise CheckpointFormatError(f"section {name!r} has unknown dtype code {dtype}")
    if r.pos != len(data):
        raise CheckpointFormatError(f"{len(data) - r.pos} trailing bytes after the last section")
    return sections


def parse_checkpoint(data: bytes) -> WorldModel:
    sections = parse_sections(data)
    if CONFIG_SECTION not in sections:
        raise MissingSectionError("checkpoint has no config section")
    values = parse_kv(sections.pop(CONFIG_SECTION).decode("utf-8"))
    meta = {k[5:]: v for k, v in values.items() if k.startswith("meta.")}
    arch = {k: v for k, v in values.items() if not k.startswith("meta.")}
    model = WorldModel(ModelConfig.from_mapping(arch))
    trained = {c for c in meta.pop("trained", "").split(",") if c}
    expected = {k: v for k, v in model.state_dict().items() if _component_of(k) in trained}
    missing = sorted(set(expected) - set(sections))
    if missing:
        raise MissingSectionError(f"checkpoint lists {sorted(trained)} but lacks sections {missing}")
    stray = sorted(set(sections) - set(expected))
    if stray:
        raise CheckpointFormatError(f"unexpected sections {stray}")
    with torch.no_grad():
        for name, ref in expected.items():
            arr = sections[name]
            if tuple(arr.shape) != tuple(ref.shape):
                raise CheckpointFormatError(f"section {name!r} has shape {arr.shape}, model expects {tuple(ref.shape)}")
            ref.copy_(torch.from_numpy(arr))
    model.trained = trained
    model.meta = meta
    return model


def load_checkpoint(path, purpose: str | None = None) -> WorldModel:
    with open(path, "rb") as fh:
        model = parse_checkpoint(fh.read())
    if purpose is not None:
        require(model, purpose)
    return model


def require(model: WorldModel, purpose: str) -> None:
    """Reject checkpoints lacking the sections a purpose depends on."""
    missing = [c for c in PURPOSES[purpose] if c not in model.trained]
    if missing:
        raise MissingSectionError(f"{purpose} needs sections for {', '.join(missing)}; checkpoint has {sorted(model.trained)}")
