"""Binary tensor container used for checkpoints and mask sets.

Layout (all integers u32 little-endian)::

    b"MNAF" | version | len(header) | header (UTF-8) | n_tensors
    per tensor: len(name) | name | rank | dims... | float32 LE values
    crc32 of every preceding byte
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"MNAF"
VERSION = 1


class CheckpointError(Exception):
    pass


def encode(header: str, tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    hb = header.encode("utf-8")
    parts += [struct.pack("<I", len(hb)), hb, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        nb = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        parts += [struct.pack("<I", len(nb)), nb, struct.pack("<I", arr.ndim)]
        parts += [struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode(blob: bytes) -> tuple[str, dict[str, np.ndarray]]:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointError("not an MNAF container (bad magic)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError("CRC mismatch: file is corrupt")
    (version,) = struct.unpack_from("<I", body, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported container version {version}")
    off = 8
    (hlen,) = struct.unpack_from("<I", body, off)
    off += 4
    header = body[off:off + hlen].decode("utf-8")
    off += hlen
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", body, off)
        off += 4
        name = body[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", body, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", body, off)
        off += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(body, dtype="<f4", count=size, offset=off).reshape(dims)
        off += 4 * size
        tensors[name] = arr.astype(np.float32)
    if off != len(body):
        raise CheckpointError("trailing bytes after tensor table")
    return header, tensors


def save(path: str | Path, header: str, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(header, tensors))


def load(path: str | Path) -> tuple[str, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes())
