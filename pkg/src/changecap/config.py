"""Flat key=value run configuration with flag overrides.

The file format is one ``key = value`` per line, ``#`` comments, blank lines
ignored. Unknown keys are rejected so typos fail loudly, and every run
writes its resolved configuration next to its outputs.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path


class UsageError(ValueError):
    """Bad flags, config keys, or paths; maps to exit code 2."""


@dataclass
class RunConfig:
    layers: int = 3
    width: int = 64
    state_size: int = 8
    gate_variant: str = "differential"
    temporal_variant: str = "interleave"
    decoder: str = "cross_attention"
    lr: float = 2e-3
    batch: int = 16
    epochs: int = 30
    seed: int = 7
    data_dir: str = "data"
    out_dir: str = "runs/default"
    heads: int = 4
    decoder_blocks: int = 2
    max_decode_len: int = 24
    patch: int = 8
    tie_directions: bool = False
    tt_conv: bool = True

    def validate(self) -> None:
        if self.layers < 1:
            raise UsageError("layers must be >= 1")
        if self.batch < 1 or self.epochs < 1:
            raise UsageError("batch and epochs must be >= 1")
        if self.lr <= 0:
            raise UsageError("lr must be positive")


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(key: str, value: str):
    f = _FIELDS[key]
    value = value.strip()
    if f.type in ("int", int):
        try:
            return int(value)
        except ValueError:
            raise UsageError(f"config key '{key}' needs an integer, got {value!r}") from None
    if f.type in ("float", float):
        try:
            return float(value)
        except ValueError:
            raise UsageError(f"config key '{key}' needs a number, got {value!r}") from None
    if f.type in ("bool", bool):
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"config key '{key}' needs a boolean, got {value!r}")
    return value


def _parse_pairs(lines, cfg: RunConfig, where: str) -> RunConfig:
    for raw in lines:
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{where}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise UsageError(f"{where}: unknown config key '{key}'")
        setattr(cfg, key, _coerce(key, value))
    return cfg


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> RunConfig:
    """Defaults, then the file (if any), then command-line overrides."""
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise UsageError(f"config file not found: {p}")
        _parse_pairs(p.read_text().splitlines(), cfg, str(p))
    if overrides:
        _parse_pairs(overrides, cfg, "override")
    cfg.validate()
    return cfg


def render_config(cfg: RunConfig) -> str:
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in dataclasses.fields(RunConfig)]
    return "\n".join(lines) + "\n"


def parse_config_text(text: str) -> RunConfig:
    cfg = _parse_pairs(text.splitlines(), RunConfig(), "config blob")
    cfg.validate()
    return cfg
