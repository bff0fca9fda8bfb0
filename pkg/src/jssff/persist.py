"""Binary container shared by checkpoints (``JSSF1``) and archives (``JSSA1``).

Layout, all integers little-endian::

    magic        5 bytes
    version      u8
    n_blocks     u8, then per block: u32 length + UTF-8 JSON
    n_records    u32, then per record:
        u16 name length, name (UTF-8), u8 ndim, u32 dims[ndim],
        float64 data (row-major)
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import PersistenceError

VERSION = 1


def atomic_write(path, data: bytes):
    """Write via a temporary sibling and rename, so readers never see partial files."""
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _json_block(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def pack(magic: bytes, blocks: list, tensors: dict) -> bytes:
    out = [magic, struct.pack("<BB", VERSION, len(blocks))]
    for b in blocks:
        raw = _json_block(b)
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
    out.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8", order="C")  # keeps 0-d arrays 0-d
        raw_name = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw_name)))
        out.append(raw_name)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise PersistenceError(f"truncated file at offset {self.pos} (need {n} more bytes)")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def unpack(magic: bytes, buf: bytes):
    """Inverse of ``pack``; returns ``(blocks, tensors)``."""
    r = _Reader(buf)
    got = buf[:len(magic)]
    if got != magic:
        raise PersistenceError(f"bad magic {got!r}: expected {magic.decode()!r}")
    r.take(len(magic))
    version, n_blocks = r.unpack("<BB")
    if version != VERSION:
        raise PersistenceError(f"unsupported version {version} (expected {VERSION})")
    blocks = []
    for _ in range(n_blocks):
        (length,) = r.unpack("<I")
        start = r.pos
        try:
            blocks.append(json.loads(r.take(length).decode("utf-8")))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise PersistenceError(f"corrupt JSON block at offset {start}: {exc}") from exc
    (n_records,) = r.unpack("<I")
    tensors = {}
    for _ in range(n_records):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8", errors="replace")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        count = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(buf):
        raise PersistenceError(f"{len(buf) - r.pos} trailing bytes after offset {r.pos}")
    return blocks, tensors


def read_file(path, magic: bytes):
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise PersistenceError(f"cannot read {path}: {exc}") from exc
    return unpack(magic, buf)
