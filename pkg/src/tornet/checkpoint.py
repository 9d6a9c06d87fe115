"""Fixed-layout little-endian checkpoint files.

Layout::

    magic        4 bytes   b"TORN"
    version      u16
    meta_len     u32       byte length of the UTF-8 JSON metadata document
    metadata     meta_len bytes
    n_tensors    u32
    per tensor:
      name_len   u16, name (UTF-8)
      dtype      u8        0 = float32, 1 = float64
      rank       u8
      dims       rank x u32
      data       prod(dims) values, little-endian, row-major

Every declared length is checked against the remaining bytes before it is
used, so a truncated or corrupted file fails with the name of the section
that could not be read.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np

from .errors import CheckpointError

MAGIC = b"TORN"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}

PathLike = Union[str, Path]


def encode(tensors: Dict[str, np.ndarray], metadata: dict) -> bytes:
    meta = json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<HI", VERSION, len(meta)), meta, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise CheckpointError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, section: str) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise CheckpointError(
                f"truncated checkpoint: section '{section}' needs {n} bytes at offset {self.pos}, "
                f"only {len(self.buf) - self.pos} remain"
            )
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, section: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), section))


def decode(buf: bytes) -> Tuple[Dict[str, np.ndarray], dict]:
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (this build reads version {VERSION})")
    (meta_len,) = r.unpack("<I", "metadata length")
    try:
        metadata = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"metadata section is not valid UTF-8 JSON: {exc}") from None
    (count,) = r.unpack("<I", "tensor count")
    tensors: Dict[str, np.ndarray] = {}
    for i in range(count):
        section = f"tensor table entry {i}"
        (name_len,) = r.unpack("<H", f"{section} name length")
        name = r.take(name_len, f"{section} name").decode("utf-8", errors="replace")
        section = f'tensor "{name}"'
        code, rank = r.unpack("<BB", f"{section} header")
        if code not in _DTYPES:
            raise CheckpointError(f"{section}: unknown dtype code {code}")
        dims = r.unpack(f"<{rank}I", f"{section} dims")
        dtype = _DTYPES[code]
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = r.take(n * dtype.itemsize, f"{section} data")
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        tensors[name] = np.frombuffer(data, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after tensor table")
    return tensors, metadata


def save_checkpoint(path: PathLike, tensors: Dict[str, np.ndarray], metadata: dict) -> None:
    Path(path).write_bytes(encode(tensors, metadata))


def load_checkpoint(path: PathLike) -> Tuple[Dict[str, np.ndarray], dict]:
    return decode(Path(path).read_bytes())


def save_tensor_file(path: PathLike, tensors: Dict[str, np.ndarray]) -> None:
    save_checkpoint(path, tensors, {"kind": "tensors"})


def load_tensor_file(path: PathLike) -> Dict[str, np.ndarray]:
    return load_checkpoint(path)[0]
