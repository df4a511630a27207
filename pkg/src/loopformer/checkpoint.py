"""Binary checkpoints: magic 'LPFM', versioned, with a named parameter table.

Layout (all integers little-endian):

    4 bytes   magic b"LPFM"
    u32       format version
    u32 + n   canonical config text (model + train sections, utf-8)
    u64       training step
    u32       parameter count
    repeated  u16 name length, name, u8 ndim, ndim*u32 shape, f32 payload
    u8        optimizer-state flag
    [u64 t, then per parameter: f32 m payload, f32 v payload]

Parameters round-trip bitwise; the stored name table must match the
model's parameter census exactly.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .model import LoopFormerModel, init_model
from .runconfig import RunConfig, dump_config, parse_config_text
from .training import TrainConfig

MAGIC = b"LPFM"
FORMAT_VERSION = 1


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise ValueError("truncated checkpoint file")
        out = self.buf[self.off : self.off + n]
        self.off += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def array(self, shape) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = self.take(4 * n)
        return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)


def _write_array(out, arr: np.ndarray):
    out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def save_checkpoint(path: str, model: LoopFormerModel, optimizer=None, step: int = 0,
                    train_config: TrainConfig | None = None) -> None:
    """Write atomically (temp file + rename)."""
    if train_config is None and optimizer is not None:
        train_config = optimizer.config
    rc = RunConfig(model=model.config)
    if train_config is not None:
        rc.train = train_config
    cfg = dump_config(rc).encode("utf-8")

    params = model.parameters()
    out = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(cfg)), cfg,
           struct.pack("<Q", step), struct.pack("<I", len(params))]
    for name, p in params:
        encoded = name.encode("utf-8")
        out.append(struct.pack("<H", len(encoded)))
        out.append(encoded)
        out.append(struct.pack("<B", p.ndim))
        out.append(struct.pack(f"<{p.ndim}I", *p.shape))
        _write_array(out, p.data)
    if optimizer is None:
        out.append(b"\x00")
    else:
        state = optimizer.state_dict()
        out.append(b"\x01")
        out.append(struct.pack("<Q", state["t"]))
        for name, p in params:
            _write_array(out, state["m"][name])
            _write_array(out, state["v"][name])

    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(out))
    os.replace(tmp, path)


def _census_check(stored: list, expected: list):
    for i in range(max(len(stored), len(expected))):
        got = stored[i] if i < len(stored) else None
        want = expected[i] if i < len(expected) else None
        if got != want:
            raise ValueError(
                f"parameter census mismatch at entry {i}: checkpoint has {got!r}, model expects {want!r}"
            )


def load_checkpoint(path: str, model: LoopFormerModel | None = None):
    """Returns (model, extras) where extras has step/train_config/optimizer.

    When no model is passed, one is rebuilt from the embedded config and
    filled with the stored parameters (bitwise).
    """
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    magic = r.take(4)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}: not a checkpoint file")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}, expected {FORMAT_VERSION}")
    rc = parse_config_text(r.take(r.u32()).decode("utf-8"))
    step = r.u64()

    entries = []
    for _ in range(r.u32()):
        name = r.take(r.u16()).decode("utf-8")
        shape = tuple(r.u32() for _ in range(r.u8()))
        entries.append((name, r.array(shape)))

    if model is None:
        model = init_model(rc.model, seed=0)
    params = model.parameters()
    _census_check([n for n, _ in entries], [n for n, _ in params])
    for (name, arr), (_, p) in zip(entries, params):
        if arr.shape != p.shape:
            raise ValueError(f"shape mismatch for {name!r}: checkpoint {arr.shape}, model {p.shape}")
        p.data = arr.astype(p.dtype, copy=True)

    optimizer_state = None
    if r.u8():
        t = r.u64()
        m, v = {}, {}
        for name, p in params:
            m[name] = r.array(p.shape)
            v[name] = r.array(p.shape)
        optimizer_state = {"t": t, "m": m, "v": v}
    if r.off != len(r.buf):
        raise ValueError("trailing bytes after checkpoint payload")
    return model, {
        "step": step,
        "config": rc,
        "train_config": rc.train,
        "optimizer": optimizer_state,
    }
