"""Binary checkpoint format for the phase handoff.

Layout (all integers little-endian):
  magic "LFMP" | version u32 | phase tag byte (S/T/P/O) | dtype size u8 |
  m u32 | m' u32 | D u32 | hidden count u32 + sizes |
  schema hash (8 bytes of sha256) |
  optional gate section | optional mask section |
  named tensors (name, shape prefix, raw data) |
  CRC-32 of every preceding byte.

Tensors are stored in the model's compute dtype (f32 by default, f64 for
gradient-check fixtures). Writes are atomic: temp file then rename.
"""

from __future__ import annotations

import hashlib
import io
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .compute import BackboneModel
from .data import FieldSchema
from .gate import GateParams
from .pipeline import PruneMask

MAGIC = b"LFMP"
VERSION = 1


class CheckpointError(Exception):
    pass


def schema_hash(schema: FieldSchema) -> bytes:
    return hashlib.sha256(schema.to_toml().encode()).digest()[:8]


@dataclass
class Checkpoint:
    phase: str  # "S" | "T" | "P" | "O"
    model: BackboneModel
    gate: Optional[GateParams] = None
    mask: Optional[PruneMask] = None


def _w_str(buf: io.BytesIO, s: str) -> None:
    raw = s.encode()
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)


def _r_str(buf: io.BytesIO) -> str:
    (n,) = struct.unpack("<H", buf.read(2))
    return buf.read(n).decode()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    model = ckpt.model
    if ckpt.phase not in "STPO":
        raise CheckpointError(f"bad phase tag {ckpt.phase!r}")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(ckpt.phase.encode())
    buf.write(struct.pack("<B", model.dtype.itemsize))
    m_full = ckpt.mask.m if ckpt.mask is not None else model.m
    buf.write(struct.pack("<III", m_full, model.m, model.embed_dim))
    buf.write(struct.pack("<I", len(model.hidden_sizes)))
    for h in model.hidden_sizes:
        buf.write(struct.pack("<I", h))
    buf.write(schema_hash(model.schema))

    if ckpt.gate is not None:
        buf.write(b"\x01")
        g = ckpt.gate
        buf.write(struct.pack("<dddI", g.beta, g.zeta, g.gamma, g.m))
        buf.write(g.log_alpha.astype("<f8").tobytes())
    else:
        buf.write(b"\x00")

    if ckpt.mask is not None:
        buf.write(b"\x01")
        mk = ckpt.mask
        buf.write(struct.pack("<I", mk.m))
        buf.write(mk.keep.astype(np.uint8).tobytes())
        buf.write(mk.importance.astype("<f8").tobytes())
        buf.write(struct.pack("<d", mk.tau))
    else:
        buf.write(b"\x00")

    params = model.params()
    buf.write(struct.pack("<I", len(params)))
    dt = model.dtype.newbyteorder("<")
    for name, tensor in params.items():
        _w_str(buf, name)
        buf.write(struct.pack("<B", tensor.ndim))
        for d in tensor.shape:
            buf.write(struct.pack("<I", d))
        buf.write(np.ascontiguousarray(tensor, dtype=dt).tobytes())

    payload = buf.getvalue()
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
        fh.write(struct.pack("<I", crc))
    os.replace(tmp, path)


def load_checkpoint(path, schema: FieldSchema) -> Checkpoint:
    """Load and verify a checkpoint against the active full schema; for
    pruned phases the stored keep mask selects the sub-schema."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no such checkpoint: {path}")
    raw = path.read_bytes()
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    payload, (stored_crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(payload) & 0xFFFFFFFF != stored_crc:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt checkpoint)")
    buf = io.BytesIO(payload)
    buf.read(4)
    (version,) = struct.unpack("<I", buf.read(4))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    phase = buf.read(1).decode()
    (itemsize,) = struct.unpack("<B", buf.read(1))
    dtype = np.dtype(np.float32 if itemsize == 4 else np.float64)
    m_full, m_model, embed_dim = struct.unpack("<III", buf.read(12))
    (n_hidden,) = struct.unpack("<I", buf.read(4))
    hidden = tuple(struct.unpack("<I", buf.read(4))[0] for _ in range(n_hidden))
    stored_hash = buf.read(8)

    gate = None
    if buf.read(1) == b"\x01":
        beta, zeta, gamma, gm = struct.unpack("<dddI", buf.read(28))
        log_alpha = np.frombuffer(buf.read(8 * gm), dtype="<f8").copy()
        gate = GateParams(log_alpha=log_alpha, beta=beta, zeta=zeta, gamma=gamma)

    mask = None
    if buf.read(1) == b"\x01":
        (mm,) = struct.unpack("<I", buf.read(4))
        keep = np.frombuffer(buf.read(mm), dtype=np.uint8).astype(bool)
        importance = np.frombuffer(buf.read(8 * mm), dtype="<f8").copy()
        (tau,) = struct.unpack("<d", buf.read(8))
        mask = PruneMask(keep=keep, importance=importance, tau=tau)

    if schema.m != m_full:
        raise CheckpointError(f"{path}: checkpoint is for m={m_full}, schema has m={schema.m}")
    model_schema = schema
    if mask is not None and m_model < m_full:
        model_schema = FieldSchema(tuple(
            schema.fields[j] for j in np.flatnonzero(mask.keep)))
    if schema_hash(model_schema) != stored_hash:
        raise CheckpointError(f"{path}: schema hash mismatch")

    model = object.__new__(BackboneModel)
    model.schema = model_schema
    model.embed_dim = embed_dim
    model.hidden_sizes = hidden
    model.dtype = dtype
    model.embeddings = [None] * model_schema.m
    model.weights = [None] * (n_hidden + 1)
    model.biases = [None] * (n_hidden + 1)
    (n_tensors,) = struct.unpack("<I", buf.read(4))
    dt = dtype.newbyteorder("<")
    for _ in range(n_tensors):
        name = _r_str(buf)
        (ndim,) = struct.unpack("<B", buf.read(1))
        shape = tuple(struct.unpack("<I", buf.read(4))[0] for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        tensor = np.frombuffer(buf.read(count * itemsize), dtype=dt).reshape(shape).copy()
        model.set_param(name, tensor.astype(dtype))
    if any(t is None for t in model.embeddings + model.weights + model.biases):
        raise CheckpointError(f"{path}: missing tensors")
    return Checkpoint(phase=phase, model=model, gate=gate, mask=mask)
