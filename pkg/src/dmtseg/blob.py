"""Versioned binary model blobs: magic, JSON header, raw little-endian arrays.

Layout: b"DMTB" | u16 version | u32 header length | header JSON (sorted keys)
| array payloads in header order.  Output is a pure function of the
content, so equal models give byte-identical files.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DMTB"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")


class BlobError(ValueError):
    pass


def dumps(kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    specs = []
    payload = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        specs.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)})
        payload.append(arr.tobytes())
    header = json.dumps({"kind": kind, "meta": meta, "arrays": specs}, sort_keys=True,
                        separators=(",", ":")).encode()
    return _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(payload)


def loads(buf: bytes, expect_kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    if len(buf) < _PREFIX.size:
        raise BlobError("truncated blob header")
    magic, version, hlen = _PREFIX.unpack_from(buf, 0)
    if magic != MAGIC:
        raise BlobError(f"bad blob magic {magic!r}")
    if version != VERSION:
        raise BlobError(f"unsupported blob version {version}")
    start = _PREFIX.size
    header = json.loads(buf[start:start + hlen])
    if expect_kind is not None and header["kind"] != expect_kind:
        raise BlobError(f"blob holds a {header['kind']!r}, expected {expect_kind!r}")
    offset = start + hlen
    arrays = {}
    for spec in header["arrays"]:
        dtype = np.dtype(spec["dtype"])
        count = int(np.prod(spec["shape"], dtype=np.int64))
        end = offset + count * dtype.itemsize
        if end > len(buf):
            raise BlobError(f"truncated array {spec['name']!r}")
        arrays[spec["name"]] = np.frombuffer(buf, dtype=dtype, count=count, offset=offset).reshape(spec["shape"]).copy()
        offset = end
    if offset != len(buf):
        raise BlobError("trailing bytes in blob")
    return header["meta"], arrays


def save(path: str | Path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(kind, meta, arrays))


def load(path: str | Path, expect_kind: str | None = None):
    return loads(Path(path).read_bytes(), expect_kind)
