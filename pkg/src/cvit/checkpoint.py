"""Binary checkpoint files.

Layout (little-endian)::

    b"CVIT"  u32 version  u32 config_len  config JSON (UTF-8)  u32 tensor_count
    per tensor:
        u32 name_len, name (UTF-8), u8 entry kind
        kind 0 (data):      u32 rank, u64 extent * rank, u8 dtype tag, raw values
        kind 1 (reference): u32 target_len, target name (UTF-8)

Shared tensors are written once; every further use is a reference entry that
points at the first name. Parameters come first, then buffers (running
statistics), both in module traversal order.
"""
from __future__ import annotations

import struct

import numpy as np

from .errors import (CheckpointFormatError, CheckpointShapeError, CheckpointTruncatedError,
                     CheckpointVersionError, ConfigError)
from .model import ModelConfig, build

MAGIC = b"CVIT"
VERSION = 1
DATA, REFERENCE = 0, 1
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
DTYPE_TAGS = {np.dtype("float32"): 1, np.dtype("float64"): 2}


def _entries(model):
    """(name, key, getter, setter) for every tensor use, params then buffers."""
    out = []
    for name, p in model.named_parameters(remove_duplicate=False):
        out.append((name, ("p", id(p)), p))
    for name, m, bname in model.named_buffers(remove_duplicate=False):
        out.append((name, ("b", id(m), bname), (m, bname)))
    return out


def _value(target):
    if isinstance(target, tuple):
        m, bname = target
        return m._buffers[bname]
    return target.data


def _assign(target, arr):
    if isinstance(target, tuple):
        m, bname = target
        m._buffers[bname] = arr.astype(m._buffers[bname].dtype, copy=True)
    else:
        target.data = arr.astype(target.data.dtype, copy=True)
        target.grad = None


def _pack_str(s):
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def save_checkpoint(model, path):
    config = model.config.to_json().encode("utf-8")
    entries = _entries(model)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(config)), config, struct.pack("<I", len(entries))]
    first = {}
    for name, key, target in entries:
        chunks.append(_pack_str(name))
        if key in first:
            chunks.append(struct.pack("<B", REFERENCE))
            chunks.append(_pack_str(first[key]))
            continue
        first[key] = name
        arr = np.ascontiguousarray(_value(target))
        tag = DTYPE_TAGS.get(arr.dtype)
        if tag is None:
            arr, tag = arr.astype(np.float32), 1
        chunks.append(struct.pack("<BI", DATA, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(struct.pack("<B", tag))
        chunks.append(arr.astype(DTYPES[tag], copy=False).tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(chunks))


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(
                f"checkpoint truncated: needed {n} bytes at offset {self.pos}, file has {len(self.buf)}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self):
        (n,) = self.unpack("<I")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointFormatError(f"invalid UTF-8 string at offset {self.pos - n}") from None


def read_checkpoint(path):
    """Parse a checkpoint into ``(config, entries)`` without building a model.

    ``entries`` maps name to either a numpy array or ``("ref", target)``.
    """
    with open(path, "rb") as f:
        r = _Reader(f.read())
    if len(r.buf) < 4 or r.buf[:4] != MAGIC:
        raise CheckpointFormatError(f"bad magic bytes {bytes(r.buf[:4])!r}, expected {MAGIC!r}")
    r.take(4)
    version, clen = r.unpack("<II")
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version} (expected {VERSION})")
    try:
        config = ModelConfig.from_json(r.take(clen).decode("utf-8"))
    except (UnicodeDecodeError, ConfigError) as e:
        raise CheckpointFormatError(f"embedded config is unreadable: {e}") from None
    (count,) = r.unpack("<I")
    entries = {}
    for _ in range(count):
        name = r.string()
        (kind,) = r.unpack("<B")
        if kind == REFERENCE:
            entries[name] = ("ref", r.string())
            continue
        if kind != DATA:
            raise CheckpointFormatError(f"unknown entry kind {kind} for tensor '{name}'")
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}Q") if rank else ()
        (tag,) = r.unpack("<B")
        if tag not in DTYPES:
            raise CheckpointFormatError(f"unknown dtype tag {tag} for tensor '{name}'")
        dt = DTYPES[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        entries[name] = np.frombuffer(r.take(nbytes), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if r.pos != len(r.buf):
        raise CheckpointFormatError(f"{len(r.buf) - r.pos} trailing bytes after last tensor")
    return config, entries


def load_checkpoint(path, config=None):
    """Rebuild the model described by the file and restore every tensor bit-exactly.

    If ``config`` is given it must equal the embedded one.
    """
    stored, entries = read_checkpoint(path)
    if config is not None and config.to_dict() != stored.to_dict():
        raise CheckpointFormatError("checkpoint config does not match the requested config")
    model = build(stored)
    expected = _entries(model)
    names = [e[0] for e in expected]
    if set(names) != set(entries):
        missing = sorted(set(names) - set(entries))
        extra = sorted(set(entries) - set(names))
        raise CheckpointFormatError(f"tensor names differ from model: missing {missing[:5]}, unexpected {extra[:5]}")
    first = {}
    for name, key, target in expected:
        value = entries[name]
        if isinstance(value, tuple):
            if first.get(key) != value[1]:
                raise CheckpointFormatError(f"reference '{name}' -> '{value[1]}' does not match model sharing")
            continue
        if key in first:
            raise CheckpointFormatError(f"tensor '{name}' should be a reference to '{first[key]}'")
        first[key] = name
        want = _value(target).shape
        if tuple(value.shape) != tuple(want):
            raise CheckpointShapeError(name, value.shape, want)
        _assign(target, value)
    return model
