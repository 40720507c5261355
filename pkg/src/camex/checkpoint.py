"""Single-file ``CMEX`` checkpoints.

Layout (all integers little-endian)::

    b"CMEX" | u32 version | u32 0x01020304 (endianness marker)
    u32 len | JSON config block
    u32 n_tensors | n x (u16 len, name, u8 dtype, u8 ndim, ndim x u64 shape, u64 offset)
    u64 payload length | payload (float64, little-endian) | u32 CRC32(payload)

The CRC is checked before any tensor is materialised.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .harness import Model, build_model
from .moe import PARAM_NAMES, Expert
from .tensor import Tensor

MAGIC = b"CMEX"
VERSION = 1
ENDIAN_MARKER = 0x01020304
DTYPE_F64 = 1


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    model: Model
    merged: dict[int, Expert] = field(default_factory=dict)  # per-layer offline merge result
    meta: dict = field(default_factory=dict)


# ------------------------------------------------------------------ naming
def model_tensors(model: Model) -> dict[str, np.ndarray]:
    """Flat name -> array table using one entry per expert / rank slot."""
    out: dict[str, np.ndarray] = {"embed": model.embed.data}
    if model.head is not None:
        out["head"] = model.head.data
    if model.shared_base is not None:
        for n, t in model.shared_base.params().items():
            out[f"base.{n}"] = t.data
    seen: set[int] = set()
    for l, layer in enumerate(model.layers):
        out[f"layer.{l}.router.W_g"] = layer.router.W_g.data
        if layer.base is not None:
            for n, t in layer.base.params().items():
                out[f"layer.{l}.base.{n}"] = t.data
        for n, t in layer.domain.params().items():
            for i in range(t.shape[0]):
                out[f"layer.{l}.expert.{i}.{n}"] = t.data[i]
        if layer.curvature is None:
            continue
        for pn, f in layer.curvature.items():
            if id(f) in seen:
                continue
            seen.add(id(f))
            for fn, t in f.factors().items():
                for i in range(t.shape[0]):
                    for r in range(t.shape[1]):
                        out[f"layer.{l}.curv.{pn}.{i}.r{r}.{fn}"] = t.data[i, r]
    return out


def _assign(model: Model, table: dict[str, np.ndarray]) -> None:
    expected = model_tensors(model)
    missing = set(expected) - set(table)
    if missing:
        raise CorruptCheckpointError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")

    def put(target: Tensor, idx, value):
        if target.data[idx].shape != value.shape:
            raise CorruptCheckpointError(f"shape mismatch {target.data[idx].shape} vs {value.shape}")
        target.data[idx] = value

    put(model.embed, ..., table["embed"])
    if model.head is not None:
        put(model.head, ..., table["head"])
    for name in expected:
        parts = name.split(".")
        if parts[0] == "base":
            put(getattr(model.shared_base, parts[1]), ..., table[name])
        elif parts[0] == "layer":
            layer = model.layers[int(parts[1])]
            kind = parts[2]
            if kind == "router":
                put(layer.router.W_g, ..., table[name])
            elif kind == "base":
                put(getattr(layer.base, parts[3]), ..., table[name])
            elif kind == "expert":
                put(getattr(layer.domain, parts[4]), int(parts[3]), table[name])
            elif kind == "curv":
                f = layer.curvature[parts[3]]
                put(getattr(f, parts[6]), (int(parts[4]), int(parts[5][1:])), table[name])


# ------------------------------------------------------------------ encode
def encode(model: Model, merged: dict[int, Expert] | None = None, meta: dict | None = None) -> bytes:
    table = model_tensors(model)
    for l, e in (merged or {}).items():
        for n, t in e.params().items():
            table[f"layer.{l}.merged.{n}"] = t.data
    cfg = model.cfg
    dims = {}
    if cfg.uses_curvature:
        for pn, f in model.layers[0].curvature.items():
            dims[pn] = list(f.dims.dims)
    block = {"config": cfg.to_flat(), "dim_factorization": dims, "meta": meta or {}}
    cfg_bytes = json.dumps(block, sort_keys=True).encode()

    entries, chunks, offset = [], [], 0
    for name, arr in table.items():
        arr = np.require(np.asarray(arr, dtype="<f8"), requirements="C")
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"refusing to save non-finite values in {name}")
        raw = arr.tobytes()
        entries.append((name, arr.shape, offset))
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)

    out = [MAGIC, struct.pack("<II", VERSION, ENDIAN_MARKER),
           struct.pack("<I", len(cfg_bytes)), cfg_bytes, struct.pack("<I", len(entries))]
    for name, shape, off in entries:
        nb = name.encode()
        out.append(struct.pack("<H", len(nb)) + nb)
        out.append(struct.pack("<BB", DTYPE_F64, len(shape)))
        out.append(struct.pack(f"<{len(shape)}Q", *shape))
        out.append(struct.pack("<Q", off))
    out.append(struct.pack("<Q", len(payload)))
    out.append(payload)
    out.append(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))
    return b"".join(out)


def save_checkpoint(model: Model, path, merged: dict[int, Expert] | None = None, meta: dict | None = None) -> None:
    Path(path).write_bytes(encode(model, merged, meta))


# ------------------------------------------------------------------ decode
class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptCheckpointError("checkpoint truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_table(buf: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse and validate a checkpoint; returns (config block, tensor table)."""
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise BadMagicError("not a CMEX checkpoint")
    version, marker = r.unpack("<II")
    if marker != ENDIAN_MARKER:
        raise CorruptCheckpointError(f"bad endianness marker {marker:#x}")
    if version != VERSION:
        raise UnsupportedVersionError(f"checkpoint version {version}, expected {VERSION}")
    (clen,) = r.unpack("<I")
    try:
        block = json.loads(r.take(clen).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"bad config block: {exc}") from exc
    (count,) = r.unpack("<I")
    entries = []
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        dtype, ndim = r.unpack("<BB")
        if dtype != DTYPE_F64:
            raise CorruptCheckpointError(f"{name}: unsupported dtype code {dtype}")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        (off,) = r.unpack("<Q")
        entries.append((name, tuple(shape), off))
    (plen,) = r.unpack("<Q")
    payload = r.take(plen)
    (crc,) = r.unpack("<I")
    if r.pos != len(buf):
        raise CorruptCheckpointError("trailing bytes after checksum")
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise CorruptCheckpointError("payload CRC mismatch")
    table = {}
    for name, shape, off in entries:
        n = int(np.prod(shape, dtype=np.int64)) * 8
        if off + n > plen:
            raise CorruptCheckpointError(f"{name}: extends past payload")
        table[name] = np.frombuffer(payload, dtype="<f8", count=n // 8, offset=off).reshape(shape).astype(np.float64)
    return block, table


def load_checkpoint(path) -> Checkpoint:
    block, table = decode_table(Path(path).read_bytes())
    cfg = TrainConfig.from_flat(block["config"])
    model = build_model(cfg)
    _assign(model, table)
    if cfg.uses_curvature:
        for pn, dims in block.get("dim_factorization", {}).items():
            if tuple(dims) != model.layers[0].curvature[pn].dims.dims:
                raise CorruptCheckpointError(f"{pn}: stored factorization {dims} differs from model")
    merged: dict[int, Expert] = {}
    for l in range(cfg.layers):
        names = [f"layer.{l}.merged.{n}" for n in PARAM_NAMES]
        if all(n in table for n in names):
            merged[l] = Expert(*(Tensor(table[n]) for n in names), activation=cfg.activation)
    return Checkpoint(model, merged, block.get("meta", {}))
