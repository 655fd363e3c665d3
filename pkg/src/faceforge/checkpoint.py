"""Binary checkpoint format for named parameter arrays.

Layout (all integers little-endian u32 unless noted):

    magic "FFCK" | version | manifest_len | manifest JSON (utf-8)
    block_count
    per block, in sorted-name order:
        name_len | name utf-8 | ndim | dims... | float32 data (LE)

The manifest is a small JSON object recording architecture hyperparameters;
an empty dict is written when there is nothing to record.  Writes are fully
deterministic for identical inputs.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import BadMagicError, FileFormatError, TruncatedFileError

MAGIC = b"FFCK"
VERSION = 1


def write_checkpoint(
    path, params: Mapping[str, np.ndarray], manifest: Mapping | None = None
) -> None:
    path = Path(path)
    manifest_bytes = json.dumps(
        manifest or {}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    chunks.append(struct.pack("<I", len(manifest_bytes)))
    chunks.append(manifest_bytes)
    names = sorted(params)
    chunks.append(struct.pack("<I", len(names)))
    for name in names:
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    path.write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes, label: str):
        self.buf = buf
        self.off = 0
        self.label = label

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise TruncatedFileError(f"{self.label}: unexpected end of file")
        out = self.buf[self.off : self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    rd = _Reader(path.read_bytes(), str(path))
    if rd.take(4) != MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint file (bad magic)")
    version = rd.u32()
    if version != VERSION:
        raise FileFormatError(f"{path}: unsupported checkpoint version {version}")
    manifest_len = rd.u32()
    manifest = json.loads(rd.take(manifest_len).decode("utf-8")) if manifest_len else {}
    count = rd.u32()
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = rd.take(rd.u32()).decode("utf-8")
        ndim = rd.u32()
        shape = struct.unpack(f"<{ndim}I", rd.take(4 * ndim))
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        data = np.frombuffer(rd.take(4 * size), dtype="<f4").reshape(shape)
        params[name] = np.array(data, dtype=np.float32)  # own, writable copy
    return params, manifest
