"""Flat ``key = value`` run configuration files.

Blank lines and ``#`` comments are ignored. Recognized keys: H, A, S, B, L,
p, epsilon, tol, table_path.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Optional

from .errors import ConfigFileError, ConfigurationError
from .memory_model import EncoderConfig

_INT_KEYS = {"H", "A", "S", "B", "L"}
_FLOAT_KEYS = {"p", "epsilon", "tol"}
_STR_KEYS = {"table_path"}


@dataclass(frozen=True)
class RunConfig:
    H: int = 32
    A: int = 4
    S: int = 8
    B: int = 2
    L: int = 1
    p: float = 0.1
    epsilon: float = 1e-5
    tol: float = 1e-4
    table_path: Optional[str] = None

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(H=self.H, A=self.A, S=self.S, B=self.B, L=self.L, p=self.p)

    def updated(self, **overrides) -> "RunConfig":
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})


KNOWN_KEYS = tuple(f.name for f in fields(RunConfig))


def parse_config(text: str, base: Optional[RunConfig] = None) -> RunConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KNOWN_KEYS:
            raise ConfigFileError(f"line {lineno}: unknown key {key!r}; known keys: {', '.join(KNOWN_KEYS)}")
        if key in values:
            raise ConfigFileError(f"line {lineno}: duplicate key {key!r}")
        try:
            if key in _INT_KEYS:
                values[key] = int(value)
            elif key in _FLOAT_KEYS:
                values[key] = float(value)
            else:
                values[key] = value
        except ValueError:
            raise ConfigFileError(f"line {lineno}: bad value {value!r} for {key!r}") from None
    cfg = replace(base or RunConfig(), **values)
    try:
        cfg.encoder_config()
    except ConfigurationError as exc:
        raise ConfigFileError(str(exc)) from None
    return cfg


def load_config(path, base: Optional[RunConfig] = None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigFileError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, base)
