"""Single-file tensor archive shared by base, adapter and gate checkpoints.

Layout::

    b"IMSMARC1"                    8-byte magic
    uint64 little-endian           header length in bytes
    header                         UTF-8 JSON: {"kind", "meta", "tensors": [{"name", "shape"}, ...]}
    payload                        float64 little-endian values, tensor by tensor in header order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"IMSMARC1"


class ArchiveError(ValueError):
    pass


def save_archive(path, kind: str, tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    index = [{"name": name, "shape": list(np.shape(arr))} for name, arr in tensors.items()]
    header = json.dumps({"kind": kind, "meta": meta or {}, "tensors": index}, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for arr in tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_archive(path, expect_kind: str | tuple[str, ...] | None = None):
    """Return ``(kind, meta, {name: array})``."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ArchiveError(f"{path}: not a tensor archive")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen].decode())
    kind = header["kind"]
    if expect_kind is not None:
        allowed = (expect_kind,) if isinstance(expect_kind, str) else expect_kind
        if kind not in allowed:
            raise ArchiveError(f"{path}: archive kind {kind!r}, expected {allowed}")
    offset = 16 + hlen
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * n
        if end > len(raw):
            raise ArchiveError(f"{path}: truncated payload at tensor {entry['name']!r}")
        tensors[entry["name"]] = np.frombuffer(raw[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
        offset = end
    if offset != len(raw):
        raise ArchiveError(f"{path}: {len(raw) - offset} trailing bytes")
    return kind, header["meta"], tensors
