"""Binary checkpoints.

Layout (little-endian throughout)::

    b"HAWQKIT1"  u32 version
    u32 meta_len, meta (UTF-8 JSON: model spec, activation ranges, extras)
    u32 tensor_count, then per tensor:
        u32 name_len, name, u32 rank, rank x u64 dims, float64 payload
    u32 quantizer_count, then per block:
        u32 name_len, name, i32 bits, f64 scale, f64 clip_max

``clip_max`` is stored next to ``scale`` so quantizers round-trip bit-exactly.
"""
from __future__ import annotations

import io
import json
import struct

import numpy as np

from ._io import atomic_write_bytes
from .errors import CheckpointError
from .models import ModelSpec, build_model
from .quant import ActQuantState, Quantizer

MAGIC = b"HAWQKIT1"
VERSION = 1


def _name(buf, s):
    raw = s.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def dumps(model, extra=None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    meta = {
        "spec": model.spec.to_dict(),
        "act_quant": bool(model.act_quant),
        "act_state": {k: v.to_dict() | {"momentum": v.momentum}
                      for k, v in sorted(model.act_state.items())},
        "extra": extra or {},
    }
    raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<I", len(model.params)))
    for name, t in model.params.items():
        _name(buf, name)
        buf.write(struct.pack("<I", t.data.ndim))
        buf.write(struct.pack(f"<{t.data.ndim}Q", *t.data.shape))
        buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    buf.write(struct.pack("<I", len(model.weight_quant)))
    for block, q in sorted(model.weight_quant.items()):
        _name(buf, block)
        buf.write(struct.pack("<idd", q.bits, q.scale, q.clip_max))
    return buf.getvalue()


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def name(self):
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")


def loads(data: bytes):
    """Rebuild the model; returns (model, extra)."""
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a hawqkit checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (mlen,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(mlen).decode("utf-8"))
        spec = ModelSpec(**meta["spec"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"bad checkpoint metadata: {exc}") from None
    model = build_model(spec)[0]
    state = {}
    (count,) = r.unpack("<I")
    for _ in range(count):
        name = r.name()
        (rank,) = r.unpack("<I")
        dims = r.unpack(f"<{rank}Q")
        size = int(np.prod(dims, dtype=np.int64))
        state[name] = np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64).reshape(dims)
    try:
        model.load_state_dict(state)
    except ValueError as exc:
        raise CheckpointError(f"checkpoint does not fit its model spec: {exc}") from None
    (nq,) = r.unpack("<I")
    for _ in range(nq):
        block = r.name()
        bits, scale, clip = r.unpack("<idd")
        q = Quantizer(bits, clip)
        if q.scale != scale:
            raise CheckpointError(f"quantizer for {block}: stored scale disagrees with clip range")
        model.weight_quant[block] = q
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after quantizer table")
    for site, d in meta["act_state"].items():
        st = ActQuantState(d["bits"], d["momentum"])
        st.min, st.max, st.numel, st.calibrated = d["min"], d["max"], d["numel"], d["calibrated"]
        model.act_state[site] = st
    model.act_quant = meta["act_quant"]
    return model, meta.get("extra", {})


def save(path, model, extra=None):
    atomic_write_bytes(path, dumps(model, extra))


def load(path):
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    return loads(data)
