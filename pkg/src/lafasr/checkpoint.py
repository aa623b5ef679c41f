"""Named-tensor container ("QFN1") used for model checkpoints and CMVN statistics.

Layout, all integers 4-byte little-endian unsigned::

    b"QFN1" | version=1 | entry count
    per entry: name length | UTF-8 name | rank | extents... | float32 LE values
"""

from __future__ import annotations

import io
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"QFN1"
VERSION = 1


class CheckpointFormatError(ValueError):
    """Bad magic, version or truncated container."""


class CheckpointSchemaError(KeyError):
    """Entries do not match what the loader expects."""

    def __str__(self):
        return str(self.args[0])


def write_container(path: str | Path, entries: Mapping[str, np.ndarray]) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(entries)))
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        a = np.asarray(arr)
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", a.ndim))
        buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
        buf.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def read_container(path: str | Path) -> "OrderedDict[str, np.ndarray]":
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {data[:4]!r}")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise CheckpointFormatError(f"{path}: truncated container")
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    version, count = take("<II")
    if version != VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (n,) = take("<I")
        if pos + n > len(data):
            raise CheckpointFormatError(f"{path}: truncated container")
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = take("<I")
        shape = take(f"<{rank}I") if rank else ()
        size = int(np.prod(shape)) if rank else 1
        if pos + 4 * size > len(data):
            raise CheckpointFormatError(f"{path}: truncated values for {name}")
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * size
        out[name] = arr
    if pos != len(data):
        raise CheckpointFormatError(f"{path}: {len(data) - pos} trailing bytes")
    return out


def check_schema(entries: Mapping[str, np.ndarray], expected: Mapping[str, tuple[int, ...]],
                 optional: tuple[str, ...] = ()) -> None:
    extra = [k for k in entries if k not in expected and k not in optional]
    if extra:
        raise CheckpointSchemaError(f"unknown checkpoint entries: {', '.join(extra)}")
    missing = [k for k in expected if k not in entries]
    if missing:
        raise CheckpointSchemaError(f"missing checkpoint entries: {', '.join(missing)}")
    for k, shape in expected.items():
        if tuple(entries[k].shape) != tuple(shape):
            raise CheckpointSchemaError(f"entry {k} has shape {entries[k].shape}, expected {tuple(shape)}")
