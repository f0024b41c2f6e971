"""Binary checkpoints: config echo, vocabulary, parameter tree, Adam moments.

Layout (little-endian):
  magic "CAMC", u32 format version,
  u64-length-prefixed utf-8 config text,
  u64-length-prefixed utf-8 vocabulary (one token per line),
  u64 optimizer step counter,
  u32 parameter count, then per entry: u16 name length, name, CAMT tensor,
  u32 moment count, same entry layout (names are "m/<param>" / "v/<param>").

A load followed by a forward pass reproduces the pre-save forward bitwise
at the same dtype.
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import Tensor, read_array, write_array

CHECKPOINT_MAGIC = b"CAMC"
FORMAT_VERSION = 1


@dataclass
class CheckpointData:
    config_text: str
    vocab_tokens: list[str]
    step: int
    params: dict[str, np.ndarray]
    moments: dict[str, np.ndarray]


def _write_blob(fh, text: str) -> None:
    raw = text.encode("utf-8")
    fh.write(struct.pack("<Q", len(raw)))
    fh.write(raw)


def _read_blob(fh) -> str:
    (n,) = struct.unpack("<Q", fh.read(8))
    return fh.read(n).decode("utf-8")


def _write_entries(fh, entries: dict[str, np.ndarray]) -> None:
    fh.write(struct.pack("<I", len(entries)))
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        fh.write(struct.pack("<H", len(raw)))
        fh.write(raw)
        write_array(fh, arr)


def _read_entries(fh) -> dict[str, np.ndarray]:
    (count,) = struct.unpack("<I", fh.read(4))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", fh.read(2))
        name = fh.read(n).decode("utf-8")
        out[name] = read_array(fh)
    return out


def save_checkpoint(path: str | Path, config_text: str, vocab_tokens: list[str],
                    params: dict[str, Tensor], moments: dict[str, np.ndarray],
                    step: int) -> None:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    _write_blob(buf, config_text)
    _write_blob(buf, "\n".join(vocab_tokens))
    buf.write(struct.pack("<Q", step))
    _write_entries(buf, {k: t.data for k, t in params.items()})
    _write_entries(buf, moments)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
        fh.flush()
        os.fsync(fh.fileno())
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> CheckpointData:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file (magic {magic!r})")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        config_text = _read_blob(fh)
        vocab_tokens = _read_blob(fh).splitlines()
        (step,) = struct.unpack("<Q", fh.read(8))
        params = _read_entries(fh)
        moments = _read_entries(fh)
    return CheckpointData(config_text=config_text, vocab_tokens=vocab_tokens,
                          step=step, params=params, moments=moments)


def restore_parameters(params: dict[str, Tensor], stored: dict[str, np.ndarray]) -> None:
    """Copy stored arrays into live tensors; names and shapes must match."""
    missing = sorted(set(params) - set(stored))
    extra = sorted(set(stored) - set(params))
    if missing or extra:
        raise ValueError(f"parameter tree mismatch: missing={missing[:3]} extra={extra[:3]}")
    for name, t in params.items():
        arr = stored[name]
        if arr.shape != t.shape:
            raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {t.shape}")
        t.data = arr.astype(t.data.dtype, copy=True)
