"""Flat binary files of named float64 tensors.

One format serves both dataset sample files and model checkpoints:

    header:      magic b"FDT1" | version uint32 | tensor count uint32
    per tensor:  name length uint32 | name utf-8 | rank uint32
                 | dims uint64 * rank | payload float64 * prod(dims)

Everything is little-endian.  Insertion order of the mapping is preserved on
disk and restored on read, so a write/read cycle is bitwise faithful.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

MAGIC = b"FDT1"
FORMAT_VERSION = 1

__all__ = [
    "TensorFileError",
    "VersionMismatchError",
    "write_tensors",
    "read_tensors",
    "file_checksum",
]


class TensorFileError(IOError):
    """Malformed or truncated tensor file."""


class VersionMismatchError(TensorFileError):
    """Tensor file written by an incompatible format version."""


def write_tensors(path, tensors: dict):
    """Write a name -> ndarray mapping; arrays are stored as float64."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(tensors)))
        for name, array in tensors.items():
            # not ascontiguousarray: that would promote rank-0 arrays to rank 1
            arr = np.asarray(array, dtype=np.float64, order="C")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.astype("<f8", copy=False).tobytes())


def _read_exact(fh, n: int, path, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise TensorFileError(f"{path}: truncated while reading {what}")
    return data


def read_tensors(path) -> dict:
    """Read a tensor file back into an ordered name -> ndarray mapping."""
    out = {}
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, path, "magic") != MAGIC:
            raise TensorFileError(f"{path}: not a tensor file (bad magic)")
        version, count = struct.unpack("<II", _read_exact(fh, 8, path, "header"))
        if version != FORMAT_VERSION:
            raise VersionMismatchError(
                f"{path}: format version {version}, expected {FORMAT_VERSION}"
            )
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, path, "name length"))
            name = _read_exact(fh, name_len, path, "name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, path, "rank"))
            dims = struct.unpack(
                f"<{rank}Q", _read_exact(fh, 8 * rank, path, f"dims of {name!r}")
            )
            n_bytes = 8 * int(np.prod(dims, dtype=np.int64)) if rank else 8
            payload = _read_exact(fh, n_bytes, path, f"payload of {name!r}")
            out[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
        if fh.read(1):
            raise TensorFileError(f"{path}: trailing bytes after last tensor")
    return out


def file_checksum(path) -> str:
    """sha256 hex digest of a file's bytes."""
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
