"""Binary checkpoint format.

Byte layout (all integers little-endian)::

    offset  size  content
    0       8     magic b"COINCKPT"
    8       4     uint32 format version (currently 1)
    12      8     uint64 header length H
    20      H     UTF-8 JSON header, keys sorted:
                    {"format_version": 1,
                     "meta": {...},                      # free-form JSON
                     "tensors": [{"name", "shape", "offset"}, ...]}
    20+H    ...   payload: every tensor as little-endian float64, C order,
                  at byte ``offset`` relative to the payload start

Tensors are written in sorted-name order, so identical contents give
identical bytes.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"COINCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict, meta: dict | None = None) -> None:
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8", order="C")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"format_version": FORMAT_VERSION, "meta": meta or {}, "tensors": entries},
                        sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
        f.write(header)
        for c in chunks:
            f.write(c)


def load_checkpoint(path) -> tuple[dict, dict]:
    raw = Path(path).read_bytes()
    if len(raw) < 20 or raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic); expected format version {FORMAT_VERSION}")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format version {version} "
                              f"(expected {FORMAT_VERSION})")
    try:
        header = json.loads(raw[20:20 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupted header for format version {version}") from exc
    payload = memoryview(raw)[20 + hlen:]
    tensors = {}
    for e in header["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        start, stop = e["offset"], e["offset"] + 8 * n
        if stop > len(payload):
            raise CheckpointError(f"{path}: truncated payload (format version {version})")
        tensors[e["name"]] = np.frombuffer(payload[start:stop], dtype="<f8").reshape(tuple(e["shape"])).astype(np.float64)
    return tensors, header["meta"]
