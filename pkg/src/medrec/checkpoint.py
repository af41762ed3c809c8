"""Binary checkpoint files for named float64 tensors.

Layout: an 8-byte magic string, a uint32 format version, a uint64 header
length, a canonical-JSON header (metadata plus a manifest of tensor names,
shapes and payload byte offsets), then the raw little-endian float64 payload.
Writing is deterministic and round-trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MRECCKPT"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named arrays (insertion order preserved) and optional metadata."""
    manifest = []
    payload = bytearray()
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        manifest.append({"name": name, "shape": list(arr.shape), "offset": len(payload)})
        payload += arr.astype("<f8").tobytes()
    header = json.dumps({"meta": meta or {}, "tensors": manifest},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(bytes(payload))


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint back as ({name: array}, metadata)."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    (version,) = struct.unpack("<I", raw[8:12])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (header_len,) = struct.unpack("<Q", raw[12:20])
    header = json.loads(raw[20:20 + header_len].decode("utf-8"))
    payload = raw[20 + header_len:]
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=start)
        tensors[entry["name"]] = arr.reshape(shape).astype(np.float64)
    return tensors, header["meta"]
