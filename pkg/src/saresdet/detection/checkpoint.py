"""Binary weight checkpoints.

Layout (little-endian): magic ``SMK1``, uint32 entry count, then per entry in
name order: uint32 name length, UTF-8 name, uint32 rank, rank x uint32 dims,
float32 data. The model configuration lives next to it in ``<path>.json``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SMK1"


class CheckpointError(ValueError):
    pass


def save_weights(path, state: dict[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<I", len(state))]
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_weights(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}, expected {MAGIC!r}")
    pos = 4

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    (count,) = take("<I")
    out = {}
    for _ in range(count):
        (nlen,) = take("<I")
        name = buf[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = take("<I")
        dims = take(f"<{rank}I") if rank else ()
        n = int(np.prod(dims)) if rank else 1
        if pos + 4 * n > len(buf):
            raise CheckpointError(f"{path}: truncated data for {name}")
        out[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(dims).astype(np.float32)
        pos += 4 * n
    return out


def save_checkpoint(path, model) -> None:
    path = Path(path)
    save_weights(path, model.state_dict())
    Path(f"{path}.json").write_text(model.config.to_json() + "\n")


def load_checkpoint(path):
    from ..config import ModelConfig
    from .model import Detector

    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"model checkpoint not found: {path}")
    cfg_path = Path(f"{path}.json")
    if not cfg_path.exists():
        raise CheckpointError(f"missing model config {cfg_path}")
    config = ModelConfig.from_dict(json.loads(cfg_path.read_text()))
    model = Detector(config)
    model.load_state_dict(load_weights(path))
    return model
