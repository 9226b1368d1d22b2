"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"VARSCKPT"                      magic, 8 bytes
    u32 version
    u64 n, then n bytes of UTF-8 JSON  (config, loss trace, head/optimizer metadata)
    u32 tensor count
    per tensor:
        u32 name length, name bytes (UTF-8)
        u32 rank, rank x u64 dims
        prod(dims) x f64 values, row-major
    u32 CRC32 of every preceding byte

JSON is written with sorted keys and no whitespace so that save -> load ->
save is byte-identical.
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .model import ClassifierHead
from .numerics import AdamState, Tensor
from .train import Checkpoint, TrainConfig, init_state

MAGIC = b"VARSCKPT"
VERSION = 1


class CheckpointError(ValueError):
    """Unreadable, corrupted or incompatible checkpoint."""


class UnsupportedVersionError(CheckpointError):
    pass


def _tensor_record(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode()
    arr = np.array(arr, dtype="<f8", order="C")  # keeps rank 0, unlike ascontiguousarray
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim)
    head += b"".join(struct.pack("<Q", d) for d in arr.shape)
    return head + arr.tobytes()


def _collect(ckpt: Checkpoint) -> tuple[dict, list[tuple[str, np.ndarray]]]:
    tensors = [(n, t.data) for n, t in ckpt.state.named_parameters(include_head=False).items()]
    meta: dict = {"config": ckpt.config.to_dict(), "loss_trace": ckpt.loss_trace, "head": None, "adam": None}
    head = ckpt.state.head
    if head is not None:
        meta["head"] = {"mode": head.mode, "num_classes": head.num_classes, "hidden": head.w1.shape[1]}
        tensors += [(f"head.{n}", t.data) for n, t in head.named()]
        tensors += [("head.in_mean", head.in_mean), ("head.in_std", head.in_std)]
    if ckpt.adam is not None:
        a = ckpt.adam
        meta["adam"] = {"step": a.step, "learning_rate": a.learning_rate, "beta1": a.beta1,
                        "beta2": a.beta2, "epsilon": a.epsilon, "names": sorted(a.m)}
        for n in sorted(a.m):
            tensors += [(f"adam.m.{n}", a.m[n]), (f"adam.v.{n}", a.v[n])]
    return meta, tensors


def to_bytes(ckpt: Checkpoint) -> bytes:
    meta, tensors = _collect(ckpt)
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()
    body = MAGIC + struct.pack("<I", VERSION) + struct.pack("<Q", len(blob)) + blob
    body += struct.pack("<I", len(tensors))
    body += b"".join(_tensor_record(n, a) for n, a in tensors)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, buf: bytes, end: int):
        self.buf = buf
        self.pos = 0
        self.end = end

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > self.end:
            raise CheckpointError(f"truncated checkpoint: need {n} bytes for {what} at offset {self.pos}, "
                                  f"only {self.end - self.pos} left")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]


def from_bytes(buf: bytes) -> Checkpoint:
    if len(buf) < len(MAGIC):
        raise CheckpointError(f"truncated checkpoint: {len(buf)} bytes, magic needs {len(MAGIC)} at offset 0")
    if buf[:8] != MAGIC:
        bad = next(i for i in range(8) if buf[i] != MAGIC[i])
        raise CheckpointError(f"bad magic bytes at offset {bad}: expected {MAGIC!r}, got {bytes(buf[:8])!r}")
    if len(buf) < 12:
        raise CheckpointError("truncated checkpoint: missing version at offset 8")
    version = struct.unpack("<I", buf[8:12])[0]
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version} (this build reads {VERSION})")
    if len(buf) < 16:
        raise CheckpointError(f"truncated checkpoint: {len(buf)} bytes")
    stored = struct.unpack("<I", buf[-4:])[0]
    actual = zlib.crc32(buf[:-4]) & 0xFFFFFFFF
    if stored != actual:
        raise CheckpointError(f"checksum mismatch: stored {stored:08x}, computed {actual:08x} "
                              f"over bytes 0..{len(buf) - 5}")
    r = _Reader(buf, len(buf) - 4)
    r.pos = 12
    n = r.u64("config length")
    try:
        meta = json.loads(r.take(n, "config block").decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"config block at offset 20 is not valid JSON: {exc}") from None
    tensors: dict[str, np.ndarray] = {}
    for _ in range(r.u32("tensor count")):
        name = r.take(r.u32("name length"), "tensor name").decode()
        rank = r.u32(f"rank of {name}")
        dims = tuple(r.u64(f"dims of {name}") for _ in range(rank))
        count = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(r.take(8 * count, f"values of {name}"), dtype="<f8").reshape(dims)
        tensors[name] = arr.astype(np.float64)
    if r.pos != r.end:
        raise CheckpointError(f"{r.end - r.pos} trailing bytes before checksum at offset {r.pos}")
    return _assemble(meta, tensors)


def _assemble(meta: dict, tensors: dict[str, np.ndarray]) -> Checkpoint:
    cfg = TrainConfig.from_dict(meta["config"])
    state = init_state(cfg)
    for name, t in state.named_parameters(include_head=False).items():
        _fill(t, tensors, name)
    if meta.get("head"):
        h = meta["head"]
        head = ClassifierHead.init(cfg.hidden, h["num_classes"], np.random.default_rng(0), h["mode"])
        for n, t in head.named():
            _fill(t, tensors, f"head.{n}")
        head.in_mean = tensors["head.in_mean"].copy()
        head.in_std = tensors["head.in_std"].copy()
        state.head = head
    adam = None
    if meta.get("adam"):
        a = meta["adam"]
        adam = AdamState(a["learning_rate"], a["beta1"], a["beta2"], a["epsilon"], a["step"])
        for n in a["names"]:
            adam.m[n] = tensors[f"adam.m.{n}"].copy()
            adam.v[n] = tensors[f"adam.v.{n}"].copy()
    return Checkpoint(cfg, state, adam, meta.get("loss_trace", []))


def _fill(t: Tensor, tensors: dict[str, np.ndarray], name: str) -> None:
    if name not in tensors:
        raise CheckpointError(f"checkpoint is missing tensor {name!r}")
    arr = tensors[name]
    if arr.shape != t.shape:
        raise CheckpointError(f"tensor {name!r} has shape {arr.shape}, config implies {t.shape}")
    t.data = arr.copy()


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load_checkpoint(path: str | Path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
