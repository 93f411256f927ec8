"""Binary checkpoint container and checkpoint averaging.

Layout (little-endian)::

    b"ORTHROS1" | u32 version | u32 n | n bytes JSON config | u32 n_records |
    n_records x (u32 name_len | name | u32 rank | rank x u32 dim | f32 data)
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
import torch

from .model import ModelConfig, OrthrosModel

MAGIC = b"ORTHROS1"
VERSION = 1

PathLike = Union[str, Path]


class CheckpointError(ValueError):
    pass


def _config_bytes(cfg: ModelConfig) -> bytes:
    return json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8")


def checkpoint_bytes(model: OrthrosModel) -> bytes:
    buf = io.BytesIO()
    cfg = _config_bytes(model.cfg)
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(cfg)))
    buf.write(cfg)
    state = model.state_dict()
    buf.write(struct.pack("<I", len(state)))
    for name, t in state.items():
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", t.dim()))
        buf.write(struct.pack(f"<{t.dim()}I", *t.shape))
        buf.write(t.detach().cpu().numpy().astype("<f4", copy=False).tobytes())
    return buf.getvalue()


def save_checkpoint(path: PathLike, model: OrthrosModel) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(model))
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else vals


def read_checkpoint(path: PathLike):
    """Return ``(ModelConfig, {name: float32 tensor})`` without building a model."""
    r = _Reader(Path(path).read_bytes())
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("bad checkpoint magic")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    cfg = ModelConfig.from_dict(json.loads(r.take(r.u32()).decode("utf-8")))
    state = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = r.u32(rank) if rank > 1 else ((r.u32(),) if rank == 1 else ())
        n = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(dims)
        state[name] = torch.from_numpy(arr.copy())
    if r.pos != len(r.data):
        raise CheckpointError("trailing bytes after checkpoint records")
    return cfg, state


def load_checkpoint(path: PathLike, model: Optional[OrthrosModel] = None) -> OrthrosModel:
    cfg, state = read_checkpoint(path)
    if model is None:
        model = OrthrosModel(cfg)
    elif model.cfg != cfg:
        raise CheckpointError("checkpoint config does not match model config")
    model = model.float()
    missing = set(model.state_dict()) ^ set(state)
    if missing:
        raise CheckpointError(f"parameter set mismatch: {sorted(missing)[:5]}")
    model.load_state_dict(state)
    model.eval()
    return model


def average_checkpoints(paths: Sequence[PathLike]) -> OrthrosModel:
    if not paths:
        raise ValueError("need at least one checkpoint")
    cfg0, acc = read_checkpoint(paths[0])
    acc = {k: v.double() for k, v in acc.items()}
    for p in paths[1:]:
        cfg, state = read_checkpoint(p)
        if cfg != cfg0:
            raise CheckpointError(f"config mismatch in {p}")
        for k in acc:
            acc[k] += state[k].double()
    model = OrthrosModel(cfg0)
    model.load_state_dict({k: (v / len(paths)).float() for k, v in acc.items()})
    model.eval()
    return model


def average_to_file(paths: Sequence[PathLike], out: PathLike) -> Path:
    return save_checkpoint(out, average_checkpoints(list(paths)))


def list_checkpoints(directory: PathLike) -> List[Path]:
    return sorted(Path(directory).glob("*.ckpt"))
