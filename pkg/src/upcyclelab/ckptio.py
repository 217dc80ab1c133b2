"""UPCY checkpoint files.

Layout::

    b"UPCY"                      magic
    u32 little-endian            format version (1)
    u64 little-endian            header length in bytes
    header                       UTF-8 JSON, keys sorted, no whitespace:
                                 {"config": ..., "meta": ...,
                                  "tensors": {name: {"dtype": "float32", "shape": [r, c],
                                                     "offset": o, "length": n}}}
    zero padding to a 64-byte boundary
    payloads                     little-endian float32, each starting on a
                                 64-byte boundary; ``offset`` is relative to
                                 the start of the payload section

Payloads appear in schema order.  Identical checkpoints serialize to
identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct

import numpy as np

from .config import ModelConfig
from .errors import StateError
from .model import Checkpoint, param_schema

MAGIC = b"UPCY"
VERSION = 1
ALIGN = 64


def _pad(n: int) -> int:
    return (-n) % ALIGN


def _json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False).encode("utf-8")


def to_bytes(ckpt: Checkpoint) -> bytes:
    ckpt.validate()
    index = {}
    payloads = []
    offset = 0
    for name, t in ckpt.tensors.items():
        raw = np.ascontiguousarray(t, dtype="<f4").tobytes()
        index[name] = {"dtype": "float32", "shape": list(t.shape), "offset": offset, "length": len(raw)}
        payloads.append(raw)
        offset += len(raw) + _pad(len(raw))
    header = _json_bytes({"config": ckpt.config.to_dict(), "meta": ckpt.meta, "tensors": index})
    prefix = MAGIC + struct.pack("<IQ", VERSION, len(header)) + header
    parts = [prefix, b"\0" * _pad(len(prefix))]
    for raw in payloads:
        parts.append(raw)
        parts.append(b"\0" * _pad(len(raw)))
    return b"".join(parts)


def from_bytes(buf: bytes) -> Checkpoint:
    if buf[:4] != MAGIC:
        raise StateError("not an UPCY checkpoint (bad magic)")
    version, header_len = struct.unpack_from("<IQ", buf, 4)
    if version != VERSION:
        raise StateError(f"unsupported UPCY version {version}")
    start = 16
    header = json.loads(buf[start:start + header_len].decode("utf-8"))
    data_start = start + header_len
    data_start += _pad(data_start)
    config = ModelConfig.from_dict(header["config"])
    tensors = {}
    for name in param_schema(config):
        try:
            entry = header["tensors"][name]
        except KeyError:
            raise StateError(f"checkpoint is missing tensor {name}") from None
        if entry["dtype"] != "float32":
            raise StateError(f"{name}: unsupported dtype {entry['dtype']}")
        lo = data_start + entry["offset"]
        arr = np.frombuffer(buf, dtype="<f4", count=entry["length"] // 4, offset=lo)
        tensors[name] = arr.reshape(entry["shape"]).astype(np.float32)
    if set(header["tensors"]) != set(tensors):
        raise StateError("checkpoint holds tensors outside the config's schema")
    return Checkpoint(config, tensors, header.get("meta", {})).validate()


def content_hash(ckpt_or_bytes) -> str:
    """SHA-256 hex digest of the serialized checkpoint."""
    buf = ckpt_or_bytes if isinstance(ckpt_or_bytes, (bytes, bytearray)) else to_bytes(ckpt_or_bytes)
    return hashlib.sha256(buf).hexdigest()


def save(ckpt: Checkpoint, path) -> str:
    """Write ``ckpt`` to ``path``; returns the file's content hash."""
    buf = to_bytes(ckpt)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf)
    os.replace(tmp, path)
    return content_hash(buf)


def load(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())


def file_hash(path) -> str:
    with open(path, "rb") as fh:
        return content_hash(fh.read())
