"""``AASVCKPT`` checkpoint files.

Layout: 8-byte magic, little-endian u32 header length, UTF-8 JSON header,
then the tensors as little-endian float32 blobs in the order listed under
``header["tensors"]``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"AASVCKPT"
FORMAT_VERSION = 1


def dumps(header: Mapping, tensors: Mapping[str, np.ndarray], magic: bytes = MAGIC) -> bytes:
    head = dict(header)
    head["format_version"] = FORMAT_VERSION
    head["tensors"] = [{"name": k, "shape": list(v.shape)} for k, v in tensors.items()]
    blob = json.dumps(head, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [magic, struct.pack("<I", len(blob)), blob]
    parts += [np.ascontiguousarray(v, dtype="<f4").tobytes() for v in tensors.values()]
    return b"".join(parts)


def loads(raw: bytes, magic: bytes = MAGIC) -> tuple[dict, dict[str, np.ndarray]]:
    if len(raw) < 12 or raw[:8] != magic:
        raise ValueError(f"not a {magic.decode()} file")
    (n,) = struct.unpack_from("<I", raw, 8)
    header = json.loads(raw[12 : 12 + n].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported {magic.decode()} version {header.get('format_version')}")
    offset = 12 + n
    tensors = {}
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        if offset + 4 * count > len(raw):
            raise ValueError("truncated file: tensor data shorter than its header")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        tensors[spec["name"]] = arr.reshape(shape).astype(np.float32)
        offset += 4 * count
    if offset != len(raw):
        raise ValueError("file size does not match its header")
    return header, tensors


def save(path: str | Path, header: Mapping, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(header, tensors))


def load(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes())
