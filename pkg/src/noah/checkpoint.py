"""Bit-exact named-tensor container.

Layout: magic "NOAH" | format version (u32 LE) | header length (u64 LE) |
UTF-8 JSON header mapping tensor name -> {shape, dtype "f32", offset} |
payload of concatenated little-endian float32 arrays. Offsets are ascending,
non-overlapping, and cover the payload exactly; saving loaded tensors
reproduces the file byte for byte.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MAGIC = b"NOAH"
VERSION = 1


class CheckpointError(Exception):
    """Structured load/save failure; ``kind`` distinguishes the causes."""

    def __init__(self, kind: str, message: str):
        super().__init__(f"{kind}: {message}")
        self.kind = kind


def save_checkpoint(path, tensors: dict) -> None:
    """Write name->array (or Tensor) map; names sorted for determinism."""
    if not tensors:
        raise CheckpointError("empty", "refusing to write a checkpoint with no tensors")
    arrays = {}
    for name, t in tensors.items():
        arr = np.ascontiguousarray(getattr(t, "data", t), dtype="<f4")
        arrays[name] = arr
    header: dict = {"tensors": {}}
    offset = 0
    blobs = []
    for name in sorted(arrays):
        arr = arrays[name]
        header["tensors"][name] = {
            "shape": list(arr.shape),
            "dtype": "f32",
            "offset": offset,
        }
        blob = arr.tobytes()
        blobs.append(blob)
        offset += len(blob)
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(np.array(VERSION, "<u4").tobytes())
        f.write(np.array(len(header_bytes), "<u8").tobytes())
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read and validate a checkpoint; returns name -> float32 array."""
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise CheckpointError("bad_magic", f"{path} is not a checkpoint file")
    version = int(np.frombuffer(raw[4:8], "<u4")[0])
    if version != VERSION:
        raise CheckpointError("unknown_version", f"format version {version}, expected {VERSION}")
    header_len = int(np.frombuffer(raw[8:16], "<u8")[0])
    if 16 + header_len > len(raw):
        raise CheckpointError("corrupt_header", "header extends past end of file")
    try:
        header = json.loads(raw[16 : 16 + header_len].decode("utf-8"))
        entries = header["tensors"]
        parsed = {
            str(name): (tuple(int(d) for d in e["shape"]), str(e["dtype"]), int(e["offset"]))
            for name, e in entries.items()
        }
    except (KeyError, TypeError, ValueError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError("corrupt_header", str(exc)) from exc

    payload = raw[16 + header_len :]
    expected_offset = 0
    ordered = sorted(parsed.items(), key=lambda kv: kv[1][2])
    for name, (shape, dtype, offset) in ordered:
        if dtype != "f32":
            raise CheckpointError("corrupt_header", f"{name}: unsupported dtype {dtype!r}")
        if offset != expected_offset:
            raise CheckpointError(
                "corrupt_header",
                f"{name}: offset {offset} leaves a gap or overlap at {expected_offset}",
            )
        expected_offset += int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
    if expected_offset > len(payload):
        raise CheckpointError(
            "truncated_payload",
            f"payload holds {len(payload)} bytes, header describes {expected_offset}",
        )
    if expected_offset < len(payload):
        raise CheckpointError(
            "corrupt_header",
            f"payload holds {len(payload)} bytes beyond the {expected_offset} described",
        )
    out = {}
    for name, (shape, _, offset) in ordered:
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        arr = np.frombuffer(payload, "<f4", count=size, offset=offset).reshape(shape)
        out[name] = arr.copy()
    return out
