"""Binary checkpoint: length-prefixed JSON header + little-endian float64 payload.

Layout::

    b"CPGCKPT1" | uint64 LE header length | header JSON (utf-8) | payload

Each header entry records name, shape and byte offset into the payload.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CPGCKPT1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict, meta: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        a = np.ascontiguousarray(getattr(arr, "data", arr), dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        b = a.tobytes()
        blobs.append(b)
        offset += len(b)
    header = {"format_version": FORMAT_VERSION, "tensors": entries, "meta": meta or {}}
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(hb)))
        f.write(hb)
        for b in blobs:
            f.write(b)


def load_checkpoint(path) -> tuple[dict, dict]:
    """Return ``(tensors, meta)`` with tensors as float64 numpy arrays."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header: {e}") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format {header.get('format_version')}")
    payload = raw[16 + hlen:]
    out = {}
    for e in header["tensors"]:
        n = int(np.prod(e["shape"])) * 8
        chunk = payload[e["offset"]:e["offset"] + n]
        if len(chunk) != n:
            raise CheckpointError(f"{path}: truncated payload at {e['name']}")
        out[e["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(e["shape"]).astype(np.float64)
    return out, header["meta"]
