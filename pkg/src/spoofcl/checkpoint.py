"""Checkpoint container: a JSON header followed by little-endian float32 blobs.

Layout::

    b"SPCLCKPT"            8-byte magic
    uint64 (LE)            header length in bytes
    header                 UTF-8 JSON, keys sorted
    blobs                  concatenated float32 LE arrays

The header holds ``format_version``, a free-form ``meta`` object (config
snapshot, epoch, ...) and ``tensors``: a list of ``{name, shape, offset}``
where ``offset`` counts bytes from the start of the blob section.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"SPCLCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Container:
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)


def encode_container(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    directory = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        directory.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = {"format_version": FORMAT_VERSION, "meta": meta or {}, "tensors": directory}
    head = json.dumps(header, sort_keys=True, separators=(",", ":"),
                      ensure_ascii=False, allow_nan=False).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(head)) + head + b"".join(blobs)


def decode_container(raw: bytes, source: str = "<bytes>") -> Container:
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
    if len(raw) < 16:
        raise CheckpointError(f"{source}: truncated header")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: corrupt header ({exc})") from exc
    if header.get("format_version") != FORMAT_VERSION:
        version = header.get("format_version")
        raise CheckpointError(f"{source}: unsupported format version {version}")
    body = memoryview(raw)[16 + hlen:]
    tensors: dict[str, np.ndarray] = {}
    spans = []
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        start = int(entry["offset"])
        end = start + 4 * count
        if end > len(body):
            raise CheckpointError(f"{source}: tensor {entry['name']} runs past end of file")
        spans.append((start, end, entry["name"]))
        tensors[entry["name"]] = (
            np.frombuffer(body[start:end], dtype="<f4").astype(np.float32).reshape(shape)
        )
    spans.sort()
    for (s0, e0, n0), (s1, _, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise CheckpointError(f"{source}: tensors {n0} and {n1} overlap")
    return Container(tensors, header.get("meta", {}))


def write_container(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_container(tensors, meta))
    return path


def read_container(path) -> Container:
    path = Path(path)
    return decode_container(path.read_bytes(), str(path))
