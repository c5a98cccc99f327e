"""Binary checkpoint format for :class:`~awmf.networks.ModelBundle`.

Layout (all integers unsigned 32-bit little-endian)::

    b"AWMF" | version | M | W | n_scales | scales...
    | meta_len | meta (UTF-8 JSON: architecture + training state)
    | n_records | records...            parameters and batch-norm statistics
    | has_opt (u8) | [n_records | records...]   optimizer slots

    record := name_len | name (UTF-8) | rank | extents... | dtype (u8) | raw values

``dtype`` is 1 for float32 and 2 for float64. Parameters are written as
float64 so that a resumed run continues bit-for-bit.
"""

from __future__ import annotations

import io
import json
import os
import struct

import numpy as np

from .exceptions import (
    CheckpointError,
    CheckpointMagicError,
    CheckpointTruncatedError,
    CheckpointVersionError,
)
from .networks import ModelBundle

MAGIC = b"AWMF"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}


def _u32(n: int) -> bytes:
    return struct.pack("<I", n)


def _write_record(buf: io.BytesIO, name: str, values: np.ndarray, dtype=np.dtype("<f8")) -> None:
    raw = name.encode("utf-8")
    arr = np.ascontiguousarray(values, dtype=dtype)
    buf.write(_u32(len(raw)))
    buf.write(raw)
    buf.write(_u32(arr.ndim))
    for n in arr.shape:
        buf.write(_u32(n))
    buf.write(struct.pack("<B", _CODES[np.dtype(dtype)]))
    buf.write(arr.tobytes())


def _state_records(bundle: ModelBundle):
    for p in bundle.parameters():
        yield p.name, p.data
    for norm in bundle.norms():
        if norm.state.initialized:
            yield f"{norm.name}.running_mean", norm.state.mean
            yield f"{norm.name}.running_var", norm.state.var


def _optimizer_records(bundle: ModelBundle):
    for p in bundle.parameters():
        st = p.opt_state
        if "m" in st:
            yield f"{p.name}.m", st["m"]
            yield f"{p.name}.v", st["v"]
            yield f"{p.name}.step", np.array(float(st["step"]))


def dumps(bundle: ModelBundle, include_optimizer: bool = True) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(_u32(VERSION))
    buf.write(_u32(bundle.n_classes))
    buf.write(_u32(bundle.window))
    buf.write(_u32(len(bundle.scales)))
    for s in bundle.scales:
        buf.write(_u32(s))
    meta = json.dumps({"arch": bundle.arch, "meta": bundle.meta}, sort_keys=True, separators=(",", ":"))
    raw = meta.encode("utf-8")
    buf.write(_u32(len(raw)))
    buf.write(raw)
    records = list(_state_records(bundle))
    buf.write(_u32(len(records)))
    for name, values in records:
        _write_record(buf, name, values)
    opt = list(_optimizer_records(bundle)) if include_optimizer else []
    buf.write(struct.pack("<B", 1 if opt else 0))
    if opt:
        buf.write(_u32(len(opt)))
        for name, values in opt:
            _write_record(buf, name, values)
    return buf.getvalue()


def save_bundle(bundle: ModelBundle, path, include_optimizer: bool = True) -> None:
    data = dumps(bundle, include_optimizer)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(f"truncated checkpoint: need {n} bytes at offset {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u8(self) -> int:
        return self.take(1)[0]

    def record(self):
        name = self.take(self.u32()).decode("utf-8")
        rank = self.u32()
        shape = tuple(self.u32() for _ in range(rank))
        code = self.u8()
        if code not in _DTYPES:
            raise CheckpointError(f"record {name!r} has unknown dtype code {code}")
        dtype = _DTYPES[code]
        count = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(self.take(count * dtype.itemsize), dtype=dtype).reshape(shape)
        return name, values.astype(np.float64)


def loads(data: bytes) -> ModelBundle:
    if data[:4] != MAGIC:
        raise CheckpointMagicError("not an AWMF checkpoint")
    r = _Reader(data)
    r.take(4)
    version = r.u32()
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version} (expected {VERSION})")
    n_classes, window = r.u32(), r.u32()
    scales = tuple(r.u32() for _ in range(r.u32()))
    try:
        header = json.loads(r.take(r.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint metadata: {exc}") from exc
    arch = header["arch"]
    bundle = ModelBundle.build(
        n_classes, window, in_channels=arch["in_channels"], expert_widths=arch["expert_widths"],
        weighting_widths=arch["weighting_widths"], aggregator_width=arch["aggregator_width"], scales=scales,
    )
    bundle.meta = header["meta"]
    params = bundle.named_parameters()
    norms = {n.name: n for n in bundle.norms()}
    seen = set()
    for _ in range(r.u32()):
        name, values = r.record()
        if name in params:
            if params[name].shape != values.shape:
                raise CheckpointError(f"record {name!r} has shape {values.shape}, expected {params[name].shape}")
            params[name].data[...] = values
        elif name.endswith((".running_mean", ".running_var")):
            base, _, kind = name.rpartition(".")
            if base not in norms:
                raise CheckpointError(f"unknown batch-norm record {name!r}")
            setattr(norms[base].state, "mean" if kind == "running_mean" else "var", values.copy())
        else:
            raise CheckpointError(f"unknown parameter record {name!r}")
        seen.add(name)
    missing = set(params) - seen
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    if r.u8():
        for _ in range(r.u32()):
            name, values = r.record()
            base, _, slot = name.rpartition(".")
            if base not in params or slot not in ("m", "v", "step"):
                raise CheckpointError(f"unknown optimizer record {name!r}")
            params[base].opt_state[slot] = int(values.reshape(-1)[0]) if slot == "step" else values.copy()
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after checkpoint payload")
    return bundle


def load_bundle(path) -> ModelBundle:
    with open(path, "rb") as fh:
        return loads(fh.read())
