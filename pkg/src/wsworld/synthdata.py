"""Procedural video datasets and the ``NVDS`` binary container.

Container layout (little-endian)::

    b"NVDS" | u16 version=1 | u8 flags (bit0: truth) | u32 N | u16 T | u16 H | u16 W | u8 C
    f32 frames[N][T][H][W][C]
    [f32 radii[N*2] | f32 positions[N*T*2*2] | f32 velocities[N*T*2*2]]   if flags & 1
"""
from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

MAGIC = b"NVDS"
VERSION = 1
_HEADER = struct.Struct("<4sHBIHHHB")


class DatasetFormatError(ValueError):
    pass


class BadMagicError(DatasetFormatError):
    pass


class TruncatedError(DatasetFormatError):
    pass


class VersionMismatchError(DatasetFormatError):
    pass


@dataclass
class VideoDataset:
    """``frames`` is ``(N, T, H, W, C)`` float32; truth arrays are optional.

    positions/velocities are ``(N, T, 2, 2)`` indexed ``[seq, t, ball, (x, y)]``
    in normalised world units; radii is ``(N, 2)``.
    """

    frames: np.ndarray
    radii: np.ndarray | None = None
    positions: np.ndarray | None = None
    velocities: np.ndarray | None = None

    def __post_init__(self):
        self.frames = np.ascontiguousarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 5:
            raise DatasetFormatError(f"frames must be 5-D (N,T,H,W,C), got shape {self.frames.shape}")
        truth = (self.radii, self.positions, self.velocities)
        if any(x is None for x in truth) and not all(x is None for x in truth):
            raise DatasetFormatError("radii, positions and velocities must be given together")
        if self.has_truth:
            n, t = self.frames.shape[:2]
            if self.radii.shape != (n, 2) or self.positions.shape != (n, t, 2, 2) or self.velocities.shape != (n, t, 2, 2):
                raise DatasetFormatError("truth arrays do not match the frame dimensions")

    @property
    def has_truth(self) -> bool:
        return self.radii is not None

    @property
    def shape(self) -> tuple[int, int, int, int, int]:
        return tuple(self.frames.shape)

    def __len__(self):
        return self.frames.shape[0]

    def subset(self, index) -> "VideoDataset":
        pick = lambda a: None if a is None else a[index]  # noqa: E731
        return VideoDataset(self.frames[index], pick(self.radii), pick(self.positions), pick(self.velocities))

    def equals(self, other: "VideoDataset") -> bool:
        """Bit-exact comparison of every array."""

        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()

        return all(
            same(getattr(self, k), getattr(other, k)) for k in ("frames", "radii", "positions", "velocities")
        )

    def as_float32(self) -> "VideoDataset":
        """Copy with truth cast to float32, i.e. what survives a file round trip."""
        cast = lambda a: None if a is None else a.astype(np.float32)  # noqa: E731
        return VideoDataset(self.frames, cast(self.radii), cast(self.positions), cast(self.velocities))


def _atomic_write(path, payload: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dataset_bytes(ds: VideoDataset) -> bytes:
    n, t, h, w, c = ds.shape
    if max(t, h, w) > 0xFFFF or c > 0xFF:
        raise DatasetFormatError("dimension too large for the container header")
    parts = [_HEADER.pack(MAGIC, VERSION, int(ds.has_truth), n, t, h, w, c), ds.frames.astype("<f4").tobytes()]
    if ds.has_truth:
        for arr in (ds.radii, ds.positions, ds.velocities):
            parts.append(np.asarray(arr).astype("<f4").tobytes())
    return b"".join(parts)


def write_dataset(ds: VideoDataset, path) -> None:
    _atomic_write(path, dataset_bytes(ds))


def parse_dataset(data: bytes) -> VideoDataset:
    if len(data) < 4:
        raise TruncatedError("file shorter than the magic number")
    if data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < _HEADER.size:
        raise TruncatedError("truncated header")
    _, version, flags, n, t, h, w, c = _HEADER.unpack_from(data)
    if version != VERSION:
        raise VersionMismatchError(f"unsupported dataset version {version}")
    sizes = [n * t * h * w * c]
    if flags & 1:
        sizes += [n * 2, n * t * 4, n * t * 4]
    need = _HEADER.size + 4 * sum(sizes)
    if len(data) < need:
        raise TruncatedError(f"payload truncated: need {need} bytes, have {len(data)}")
    if len(data) > need:
        raise DatasetFormatError(f"{len(data) - need} trailing bytes after payload")
    arrays = []
    offset = _HEADER.size
    for size in sizes:
        arrays.append(np.frombuffer(data, dtype="<f4", count=size, offset=offset).astype(np.float32))
        offset += 4 * size
    frames = arrays[0].reshape(n, t, h, w, c)
    if flags & 1:
        return VideoDataset(frames, arrays[1].reshape(n, 2), arrays[2].reshape(n, t, 2, 2), arrays[3].reshape(n, t, 2, 2))
    return VideoDataset(frames)


def read_dataset(path) -> VideoDataset:
    with open(path, "rb") as fh:
        return parse_dataset(fh.read())


def import_raw(path, dims: tuple[int, int, int, int, int], normalize: str = "none") -> VideoDataset:
    """Read a headerless little-endian f32 array of shape ``dims`` (N,T,H,W,C).

    ``normalize``: ``none`` keeps values, ``minmax`` maps the global range to
    [0, 1], ``standard`` applies a global z-score.
    """
    raw = np.fromfile(path, dtype="<f4")
    if raw.size != int(np.prod(dims)):
        raise TruncatedError(f"raw file has {raw.size} floats, dims {dims} need {int(np.prod(dims))}")
    x = raw.astype(np.float64).reshape(dims)
    if normalize == "minmax":
        lo, hi = x.min(), x.max()
        x = (x - lo) / (hi - lo) if hi > lo else np.zeros_like(x)
    elif normalize == "standard":
        x = (x - x.mean()) / (x.std() or 1.0)
    elif normalize != "none":
        raise ValueError(f"unknown normalisation {normalize!r}")
    return VideoDataset(x.astype(np.float32))


# ----------------------------------------------------------------- sprites

GLYPH_SIZE = 9


def _glyphs() -> np.ndarray:
    n = GLYPH_SIZE
    yy, xx = np.mgrid[:n, :n]
    c = n // 2
    bar = np.abs(xx - c) <= 1
    cross = (np.abs(xx - c) <= 1) | (np.abs(yy - c) <= 1)
    ell = (xx <= 2) | (yy >= n - 3)
    r = np.hypot(xx - c, yy - c)
    ring = (r <= 4.2) & (r >= 2.5)
    disc = r <= 4.2
    tee = (yy <= 2) | (np.abs(xx - c) <= 1)
    diag = np.abs(xx - yy) <= 1
    box = (xx <= 1) | (xx >= n - 2) | (yy <= 1) | (yy >= n - 2)
    return np.stack([bar, cross, ell, ring, disc, tee, diag, box]).astype(np.float32)


GLYPHS = _glyphs()


@dataclass(frozen=True)
class SpriteConfig:
    height: int = 32
    width: int = 32
    n_sprites: int = 2
    speed_min: float = 1.0
    speed_max: float = 2.5
    T: int = 10
    N: int = 100
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.speed_min <= self.speed_max:
            raise ValueError("speed range must be positive and ordered")
        if GLYPH_SIZE > min(self.height, self.width):
            raise ValueError(f"{GLYPH_SIZE}x{GLYPH_SIZE} sprite does not fit a {self.height}x{self.width} canvas")


def reflect_step(pos: np.ndarray, vel: np.ndarray, upper: np.ndarray):
    """Advance one step inside ``[0, upper]`` with mirror reflection at the walls."""
    pos = pos + vel
    vel = vel.copy()
    for _ in range(2):  # a second pass only matters for speeds beyond the box size
        over, under = pos > upper, pos < 0
        pos = np.where(over, 2 * upper - pos, np.where(under, -pos, pos))
        vel = np.where(over | under, -vel, vel)
    return pos, vel


def simulate_sprites(pos0: np.ndarray, vel0: np.ndarray, steps: int, upper: np.ndarray):
    """Top-left positions and velocities, each ``(steps, n_sprites, 2)`` in (x, y) pixels."""
    pos, vel = np.asarray(pos0, float), np.asarray(vel0, float)
    ps, vs = [pos], [vel]
    for _ in range(steps - 1):
        pos, vel = reflect_step(pos, vel, upper)
        ps.append(pos)
        vs.append(vel)
    return np.stack(ps), np.stack(vs)


def render_sprites(positions: np.ndarray, glyph_ids, height: int, width: int) -> np.ndarray:
    """Composite glyphs at rounded top-left ``positions`` (n, 2) by per-pixel max."""
    canvas = np.zeros((height, width), np.float32)
    for (x, y), gid in zip(positions, glyph_ids):
        xi, yi = int(round(x)), int(round(y))
        patch = canvas[yi : yi + GLYPH_SIZE, xi : xi + GLYPH_SIZE]
        np.maximum(patch, GLYPHS[gid], out=patch)
    return canvas


def gen_sprites(config: SpriteConfig) -> VideoDataset:
    rng = np.random.default_rng(config.seed)
    upper = np.array([config.width - GLYPH_SIZE, config.height - GLYPH_SIZE], float)
    frames = np.zeros((config.N, config.T, config.height, config.width, 1), np.float32)
    for n in range(config.N):
        pos0 = rng.uniform(0, 1, (config.n_sprites, 2)) * upper
        angle = rng.uniform(0, 2 * np.pi, config.n_sprites)
        speed = rng.uniform(config.speed_min, config.speed_max, config.n_sprites)
        vel0 = np.stack([np.cos(angle), np.sin(angle)], -1) * speed[:, None]
        glyph_ids = rng.integers(0, len(GLYPHS), config.n_sprites)
        pos, _ = simulate_sprites(pos0, vel0, config.T, upper)
        for t in range(config.T):
            frames[n, t, ..., 0] = render_sprites(pos[t], glyph_ids, config.height, config.width)
    return VideoDataset(frames)


# -------------------------------------------------------------- collisions


@dataclass(frozen=True)
class CollisionConfig:
    """Two balls on the horizontal line y = 0.5 of a unit-square world."""

    height: int = 32
    width: int = 32
    radius_ind: tuple[float, float] = (0.06, 0.10)
    radius_ood: tuple[float, float] = (0.11, 0.14)
    speed_ind: tuple[float, float] = (0.01, 0.03)
    speed_ood: tuple[float, float] = (0.035, 0.05)
    ood: bool = False
    T: int = 16
    N: int = 100
    seed: int = 0
    red: tuple[float, float, float] = (1.0, 0.0, 0.0)
    blue: tuple[float, float, float] = (0.0, 0.0, 1.0)

    def __post_init__(self):
        for lo, hi in (self.radius_ind, self.radius_ood, self.speed_ind, self.speed_ood):
            if not 0 < lo <= hi:
                raise ValueError("ranges must be positive and ordered")


def collide(v1: float, v2: float, m1: float, m2: float) -> tuple[float, float]:
    """1-D elastic collision; written so equal masses swap velocities exactly."""
    total = m1 + m2
    return v2 + (m1 - m2) / total * (v1 - v2), v1 + (m2 - m1) / total * (v2 - v1)


def simulate_collision(x1, x2, v1, v2, r1, r2, steps: int):
    """x positions and velocities, each ``(steps, 2)``, with exact contact timing."""
    m1, m2 = r1 * r1, r2 * r2
    xs, vs = [(x1, x2)], [(v1, v2)]
    for _ in range(steps - 1):
        remaining = 1.0
        gap = x2 - x1 - r1 - r2
        closing = v1 - v2
        if closing > 0 and gap <= closing * remaining:
            tc = max(gap, 0.0) / closing
            x1, x2 = x1 + v1 * tc, x2 + v2 * tc
            v1, v2 = collide(v1, v2, m1, m2)
            remaining -= tc
        x1, x2 = x1 + v1 * remaining, x2 + v2 * remaining
        xs.append((x1, x2))
        vs.append((v1, v2))
    return np.array(xs), np.array(vs)


def render_balls(centers, radii, colors, height: int, width: int) -> np.ndarray:
    """Filled discs on white; pixel (i, j) samples world point ((j+.5)/W, (i+.5)/H)."""
    img = np.ones((height, width, 3), np.float32)
    ys = (np.arange(height) + 0.5) / height
    xs = (np.arange(width) + 0.5) / width
    for (cx, cy), r, col in zip(centers, radii, colors):
        inside = (xs[None, :] - cx) ** 2 + (ys[:, None] - cy) ** 2 <= r * r
        img[inside] = col
    return img


def gen_collisions(config: CollisionConfig) -> VideoDataset:
    rng = np.random.default_rng(config.seed)
    r_lo, r_hi = config.radius_ood if config.ood else config.radius_ind
    s_lo, s_hi = config.speed_ood if config.ood else config.speed_ind
    n, t = config.N, config.T
    frames = np.zeros((n, t, config.height, config.width, 3), np.float32)
    radii = np.zeros((n, 2))
    positions = np.zeros((n, t, 2, 2))
    velocities = np.zeros((n, t, 2, 2))
    for k in range(n):
        r1, r2 = rng.uniform(r_lo, r_hi, 2)
        x1 = rng.uniform(r1, 0.35)
        x2 = rng.uniform(0.65, 1.0 - r2)
        v1 = rng.uniform(s_lo, s_hi)
        v2 = -rng.uniform(s_lo, s_hi) * rng.integers(0, 2)
        xs, vs = simulate_collision(x1, x2, v1, v2, r1, r2, t)
        radii[k] = r1, r2
        positions[k, :, :, 0] = xs
        positions[k, :, :, 1] = 0.5
        velocities[k, :, :, 0] = vs
        for i in range(t):
            frames[k, i] = render_balls(positions[k, i], (r1, r2), (config.red, config.blue), config.height, config.width)
    return VideoDataset(frames, radii, positions, velocities)
