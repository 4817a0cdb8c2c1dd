"""Flat ``key = value`` run configuration.

One file may mix model, training, rollout, generator and path keys; each
consumer picks the keys it understands.  Unknown keys are rejected.
"""
from __future__ import annotations

from dataclasses import MISSING, dataclass, fields


class ConfigError(ValueError):
    pass


def parse_kv(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


@dataclass(frozen=True)
class RolloutKeys:
    T_inf: int = 0  # 0 -> sequence length of the reference data
    rho: float = 0.0
    scale: float = 1.0
    apply_mask: bool = False
    n_sequences: int = 0  # 0 -> every sequence in the data file


@dataclass(frozen=True)
class PathKeys:
    data: str = ""
    init: str = ""
    out: str = ""


def _field_names(cls) -> set[str]:
    return {f.name for f in fields(cls)}


def known_keys() -> set[str]:
    from .model import ModelConfig
    from .synthdata import CollisionConfig, SpriteConfig
    from .training import TrainConfig

    keys: set[str] = set()
    for cls in (ModelConfig, TrainConfig, SpriteConfig, CollisionConfig, RolloutKeys, PathKeys):
        keys |= _field_names(cls)
    return keys


@dataclass
class RunConfig:
    values: dict[str, str]

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        values = parse_kv(text)
        unknown = sorted(set(values) - known_keys())
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(values)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())

    def build(self, cls, **overrides):
        """Instantiate dataclass ``cls`` from the keys it owns, plus ``overrides``."""
        from .model import parse_value

        kwargs = {}
        for f in fields(cls):
            if f.name in overrides:
                kwargs[f.name] = overrides[f.name]
            elif f.name in self.values:
                default = f.default if f.default is not MISSING else f.default_factory()
                try:
                    kwargs[f.name] = parse_value(self.values[f.name], default)
                except ValueError as exc:
                    raise ConfigError(f"{f.name}: {exc}") from None
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
