"""Binary serialization for named float64 tensors (the project-wide "TFM1" format).

Layout, all little-endian:

    magic   4 bytes  b"TFM1"
    count   u32      number of tensors
    per tensor:
        name_len u16, name bytes (utf-8)
        rank     u8
        dims     rank x u64
        payload  prod(dims) x f64

Tensors are written in sorted-name order so identical contents always
produce identical bytes.
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Dict

import numpy as np

from .errors import InputError

MAGIC = b"TFM1"


def write_tensors(fp: BinaryIO, tensors: Dict[str, np.ndarray]) -> None:
    fp.write(MAGIC)
    fp.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        # np.ascontiguousarray would promote rank-0 tensors to rank 1
        arr = np.asarray(tensors[name], dtype="<f8", order="C")
        encoded = name.encode("utf-8")
        fp.write(struct.pack("<H", len(encoded)))
        fp.write(encoded)
        fp.write(struct.pack("<B", arr.ndim))
        for d in arr.shape:
            fp.write(struct.pack("<Q", d))
        fp.write(arr.tobytes())


def read_tensors(fp: BinaryIO) -> Dict[str, np.ndarray]:
    magic = fp.read(4)
    if magic != MAGIC:
        raise InputError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (count,) = struct.unpack("<I", _read_exact(fp, 4))
    out: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", _read_exact(fp, 2))
        name = _read_exact(fp, name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", _read_exact(fp, 1))
        dims = struct.unpack(f"<{rank}Q", _read_exact(fp, 8 * rank))
        n = 1
        for d in dims:
            n *= d
        payload = _read_exact(fp, 8 * n)
        out[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
    return out


def save_tensors(path, tensors: Dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fp:
        write_tensors(fp, tensors)


def load_tensors(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as fp:
        return read_tensors(fp)


def _read_exact(fp: BinaryIO, n: int) -> bytes:
    data = fp.read(n)
    if len(data) != n:
        raise InputError(f"truncated tensor file: wanted {n} bytes, got {len(data)}")
    return data
