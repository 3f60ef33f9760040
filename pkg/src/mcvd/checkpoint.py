"""Binary checkpoint container.

Layout (little-endian): magic ``MCVDCKPT``, a version byte, a u32-length
UTF-8 JSON metadata document, a u32 tensor count, then per tensor: u32 name
length, name bytes, u32 rank, u32 dims, float32 payload.
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"MCVDCKPT"
VERSION = 1


class CheckpointError(IOError):
    pass


@dataclass
class CheckpointState:
    step: int
    params: "OrderedDict[str, torch.Tensor]"
    metadata: dict = field(default_factory=dict)
    optimizer: "OrderedDict[str, torch.Tensor]" = field(default_factory=OrderedDict)
    ema: "OrderedDict[str, torch.Tensor]" = field(default_factory=OrderedDict)


def _u32(n: int) -> bytes:
    return struct.pack("<I", n)


def encode_checkpoint(state: CheckpointState) -> bytes:
    meta = dict(state.metadata)
    meta["step"] = int(state.step)
    doc = json.dumps(meta, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")
    tensors = [("param." + k, v) for k, v in state.params.items()]
    tensors += [("opt." + k, v) for k, v in state.optimizer.items()]
    tensors += [("ema." + k, v) for k, v in state.ema.items()]
    parts = [MAGIC, bytes([VERSION]), _u32(len(doc)), doc, _u32(len(tensors))]
    for name, t in tensors:
        arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        if arr.dtype != np.float32:
            raise CheckpointError(f"tensor {name} is {arr.dtype}; only float32 is stored")
        raw = name.encode("utf-8")
        parts += [_u32(len(raw)), raw, _u32(arr.ndim)] + [_u32(d) for d in arr.shape]
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def decode_checkpoint(data: bytes) -> CheckpointState:
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("bad magic: not an MCVD checkpoint")
    version = r.take(1)[0]
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    meta = json.loads(r.take(r.u32()).decode("utf-8"))
    groups = {"param": OrderedDict(), "opt": OrderedDict(), "ema": OrderedDict()}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        dims = [r.u32() for _ in range(r.u32())]
        n = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(r.take(4 * n), dtype="<f4").astype(np.float32).reshape(dims)
        group, _, key = name.partition(".")
        if group not in groups:
            raise CheckpointError(f"unknown tensor group in {name!r}")
        groups[group][key] = torch.from_numpy(arr)
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after tensor section")
    return CheckpointState(int(meta.pop("step")), groups["param"], meta, groups["opt"], groups["ema"])


def save_checkpoint(path, state: CheckpointState) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(state))
    tmp.replace(path)


def load_checkpoint(path) -> CheckpointState:
    return decode_checkpoint(Path(path).read_bytes())
