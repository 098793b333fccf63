"""Run configuration: flat ``key = value`` files with ``#`` comments."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


_ALIASES = {"lambda": "lam", "B": "batch_size", "g": "glimpse_g", "augmentation": "augment"}


@dataclass
class RunConfig:
    # widths
    d: int = 64
    d_l: int = 128
    d_dec: int = 128
    a: int = 64
    e: int = 64
    conv_channels: str = "16,32,64"
    activation: str = "relu"
    feature_act: str = "tanh"
    dec_feed: str = "input"
    # loss
    lam: float = 0.8
    eps_log: float = 1e-6
    # optimisation
    lr: float = 1e-3
    batch_size: int = 4
    k: int = 3
    m: int = 33
    epochs: int = 30
    seed: int = 0
    augment: bool = True
    # candidates
    hfov: float = 65.5
    glimpse_g: int = 4
    glimpse_pool: str = "mean"
    visual_path: str = "feature"
    grid_lons: str = "0,30,60,90,120,150,180,210,240,270,300,330"
    grid_lats: str = "-30,-15,0,15,30"
    # data
    min_count: int = 1
    split_seed: int = 0
    keep_checkpoints: int = 3

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda={self.lam} outside [0, 1]")
        if not 0.0 < self.hfov < 180.0:
            raise ConfigError(f"hfov={self.hfov} outside (0, 180)")
        for name in ("d", "d_l", "d_dec", "a", "e", "batch_size", "k", "m", "glimpse_g"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.glimpse_pool not in ("mean", "flatten"):
            raise ConfigError(f"glimpse_pool must be mean or flatten, got {self.glimpse_pool!r}")
        if self.visual_path not in ("feature", "pixel"):
            raise ConfigError(f"visual_path must be feature or pixel, got {self.visual_path!r}")
        if self.activation not in ("relu", "tanh"):
            raise ConfigError(f"activation must be relu or tanh, got {self.activation!r}")
        if self.feature_act not in ("none", "relu", "tanh"):
            raise ConfigError(f"feature_act must be none, relu or tanh, got {self.feature_act!r}")
        if self.dec_feed not in ("input", "hidden"):
            raise ConfigError(f"dec_feed must be input or hidden, got {self.dec_feed!r}")
        self.channels()
        self.lons()
        self.lats()

    def channels(self) -> tuple[int, ...]:
        return _int_list(self.conv_channels, "conv_channels", allow_empty=True)

    def lons(self) -> tuple[float, ...]:
        return _float_list(self.grid_lons, "grid_lons")

    def lats(self) -> tuple[float, ...]:
        return _float_list(self.grid_lats, "grid_lats")

    def to_dict(self) -> dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    def dumps(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.to_dict().items())

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs: dict[str, Any] = {}
        unknown = []
        for raw_key, value in data.items():
            key = _ALIASES.get(raw_key, raw_key)
            if key in known:
                kwargs[key] = _coerce(known[key].type, value, key)
            else:
                unknown.append(raw_key)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**kwargs)

    @classmethod
    def parse(cls, text: str, env: bool = True) -> "RunConfig":
        data: dict[str, str] = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            data[key] = value
        cfg = cls.from_dict(data)
        return cfg.with_env() if env else cfg

    @classmethod
    def load(cls, path: str | os.PathLike | None, env: bool = True) -> "RunConfig":
        if path is None:
            cfg = cls()
            return cfg.with_env() if env else cfg
        return cls.parse(Path(path).read_text(encoding="utf-8"), env=env)

    def with_env(self) -> "RunConfig":
        seed = os.environ.get("PG_SEED")
        if seed is None or seed == "":
            return self
        try:
            return self.replace(seed=int(seed))
        except ValueError:
            raise ConfigError(f"PG_SEED={seed!r} is not an integer") from None


def _fmt(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _coerce(typ, value: Any, key: str) -> Any:
    typ = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    try:
        if typ == "bool":
            if isinstance(value, bool):
                return value
            s = str(value).strip().lower()
            if s in ("1", "true", "yes", "on"):
                return True
            if s in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if typ == "int":
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if typ == "float":
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {value!r} as {typ}") from None


def _int_list(s: str, name: str, allow_empty: bool = False) -> tuple[int, ...]:
    parts = [p for p in str(s).replace(" ", "").split(",") if p]
    if not parts and not allow_empty:
        raise ConfigError(f"{name} is empty")
    try:
        vals = tuple(int(p) for p in parts)
    except ValueError:
        raise ConfigError(f"{name}: expected comma-separated integers, got {s!r}") from None
    if any(v < 1 for v in vals):
        raise ConfigError(f"{name}: entries must be positive")
    return vals


def _float_list(s: str, name: str) -> tuple[float, ...]:
    parts = [p for p in str(s).replace(" ", "").split(",") if p]
    if not parts:
        raise ConfigError(f"{name} is empty")
    try:
        return tuple(float(p) for p in parts)
    except ValueError:
        raise ConfigError(f"{name}: expected comma-separated numbers, got {s!r}") from None
