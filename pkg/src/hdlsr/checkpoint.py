"""Binary checkpoint format.

Layout (all integers little-endian u32)::

    b"HDLC" | version | meta_len | meta (UTF-8 JSON)
    repeated: name_len | name | rank | dims... | float32 LE values

Parameter tensors use their canonical names; Adam moments are stored as
``adam.m/<name>`` and ``adam.v/<name>``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import _atomic_write
from .model import ModelConfig, ModelParams, param_shapes, trainable_names
from .optim import AdamState

MAGIC = b"HDLC"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: ModelParams
    step: int = 0
    adam: AdamState | None = None
    rng_state: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def config(self) -> ModelConfig:
        return self.params.config


def _record(name: str, arr: np.ndarray) -> bytes:
    nb = name.encode("utf-8")
    head = struct.pack("<I", len(nb)) + nb + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    meta = {
        "config": ckpt.config.to_dict(),
        "step": ckpt.step,
        "adam_t": None if ckpt.adam is None else ckpt.adam.t,
        "rng_state": ckpt.rng_state,
        "extra": ckpt.extra,
    }
    mb = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(mb)), mb]
    for name in ckpt.params:
        parts.append(_record(name, ckpt.params[name]))
    if ckpt.adam is not None:
        for name in trainable_names(ckpt.config):
            parts.append(_record(f"adam.m/{name}", ckpt.adam.m[name]))
            parts.append(_record(f"adam.v/{name}", ckpt.adam.v[name]))
    return b"".join(parts)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    _atomic_write(path, encode_checkpoint(ckpt))


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated file")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    @property
    def done(self) -> bool:
        return self.pos == len(self.buf)


def load_checkpoint(path, expected: ModelConfig | None = None) -> Checkpoint:
    """Load and validate a checkpoint.

    With ``expected`` the stored tensor names must also match the names that
    config implies (e.g. same width and block count).
    """
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: version mismatch (file {version}, supported {VERSION})")
    meta = json.loads(r.take(r.u32()).decode("utf-8"))
    cfg = ModelConfig.from_dict(meta["config"])

    tensors: dict[str, np.ndarray] = {}
    while not r.done:
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(dims, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims).astype(np.float32)

    param_names = set(param_shapes(cfg))
    if expected is not None and param_shapes(expected) != param_shapes(cfg):
        raise CheckpointError(f"{path}: name-set mismatch against the expected model config")
    stored = {n for n in tensors if not n.startswith("adam.")}
    if stored != param_names:
        raise CheckpointError(
            f"{path}: name-set mismatch (missing={sorted(param_names - stored)}, "
            f"extra={sorted(stored - param_names)})"
        )
    try:
        params = ModelParams(cfg, {n: tensors[n] for n in param_shapes(cfg)})
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from None

    adam = None
    moment_names = {n for n in tensors if n.startswith("adam.")}
    if moment_names:
        train = trainable_names(cfg)
        want = {f"adam.m/{n}" for n in train} | {f"adam.v/{n}" for n in train}
        if moment_names != want:
            raise CheckpointError(f"{path}: optimizer moment names do not match parameters")
        adam = AdamState(
            m={n: tensors[f"adam.m/{n}"] for n in train},
            v={n: tensors[f"adam.v/{n}"] for n in train},
            t=int(meta["adam_t"]),
        )
    return Checkpoint(params, int(meta["step"]), adam, meta.get("rng_state", {}), meta.get("extra", {}))
