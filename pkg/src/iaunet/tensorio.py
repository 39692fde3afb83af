"""Raw tensor files and named-record containers.

Single-tensor layout: magic ``IAUT``, version byte 0x01, dtype byte
(0x00 = little-endian float32), rank byte, rank u32 little-endian dims,
then the row-major payload. A container is a plain concatenation of
records, each record being a u16 little-endian name length, the UTF-8
name bytes, and one tensor in the layout above.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"IAUT"
VERSION = 0x01
DTYPE_F32 = 0x00


def tensor_bytes(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    if arr.ndim > 255:
        raise FormatError(f"rank {arr.ndim} exceeds the format limit")
    header = MAGIC + bytes([VERSION, DTYPE_F32, arr.ndim])
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + dims + arr.tobytes()


def write_tensor(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(tensor_bytes(arr))


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated tensor file while reading {what}")
    return buf


def read_tensor_from(fh) -> np.ndarray:
    magic = _read_exact(fh, 4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version, dtype, rank = _read_exact(fh, 3, "header")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if dtype != DTYPE_F32:
        raise FormatError(f"unsupported dtype byte {dtype:#x}")
    shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "dims"))
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    payload = _read_exact(fh, 4 * count, "payload")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).copy()


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        arr = read_tensor_from(fh)
        if fh.read(1):
            raise FormatError(f"trailing bytes after tensor in {path}")
    return arr


def write_records(path, records: dict[str, np.ndarray]) -> None:
    """Write a named-record container (e.g. a model checkpoint)."""
    with open(path, "wb") as fh:
        for name, arr in records.items():
            encoded = name.encode("utf-8")
            if len(encoded) > 0xFFFF:
                raise FormatError(f"record name too long: {name[:40]}...")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(tensor_bytes(arr))


def read_records(path) -> dict[str, np.ndarray]:
    """Read a whole container; any corruption fails the load atomically."""
    records: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        while True:
            head = fh.read(2)
            if not head:
                break
            if len(head) != 2:
                raise FormatError("truncated record header")
            (name_len,) = struct.unpack("<H", head)
            name = _read_exact(fh, name_len, "record name").decode("utf-8")
            records[name] = read_tensor_from(fh)
    return records


def encode_text(text: str) -> np.ndarray:
    """Pack UTF-8 text into a float32 byte-value vector for a record."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def decode_text(arr: np.ndarray) -> str:
    return arr.astype(np.uint8).tobytes().decode("utf-8")
