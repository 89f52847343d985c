"""Flat binary container of named arrays.

Layout (all integers little-endian)::

    magic   4 bytes  b"HDLP"
    version u32      1
    count   u32      number of entries
    entry * count:
        name_len u16, name utf-8 bytes
        dtype    u8   0=float32 1=float64 2=int64
        rank     u8
        dims     u32 * rank
        payload  raw little-endian, row-major

Entries are written in the order given, so a fixed parameter ordering
yields byte-identical files.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict, Mapping, Union

import numpy as np

MAGIC = b"HDLP"
VERSION = 1
_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2}
_DTYPES = {v: k for k, v in _TAGS.items()}


class ContainerError(ValueError):
    pass


def dumps(arrays: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype not in _TAGS:
            raise ContainerError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", _TAGS[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> Dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise ContainerError("not a parameter container (bad magic)")
    if len(buf) < 12:
        raise ContainerError("truncated header")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    off = 12
    out: Dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off : off + nlen].decode("utf-8")
            off += nlen
            tag, rank = struct.unpack_from("<BB", buf, off)
            off += 2
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            dtype = _DTYPES[tag].newbyteorder("<")
            nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            if off + nbytes > len(buf):
                raise ContainerError(f"{name}: truncated payload")
            arr = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=off)
            out[name] = arr.reshape(dims).astype(_DTYPES[tag])
            off += nbytes
    except (struct.error, KeyError) as exc:
        raise ContainerError(f"corrupt container: {exc}") from exc
    if off != len(buf):
        raise ContainerError(f"{len(buf) - off} trailing bytes after the last entry")
    return out


def save(path: Union[str, Path], arrays: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(arrays))


def load(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
