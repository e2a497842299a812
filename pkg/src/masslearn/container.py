"""Versioned binary container for model checkpoints and dataset caches.

Layout (all integers little-endian):

    bytes 0..7    magic b"MASSCON1"
    bytes 8..15   uint64 header length H
    bytes 16..16+H-1  UTF-8 JSON header
    remainder     concatenated raw array buffers, in manifest order

The JSON header has two keys:

    "meta":   arbitrary JSON-serializable metadata supplied by the caller
    "arrays": list of {"name", "dtype", "shape", "offset", "nbytes"} entries;
              offsets are relative to the end of the header and arrays are
              stored C-contiguous in the listed order with no padding.

Only float64 and int64 arrays are accepted, which keeps round trips
bit-exact and the format trivially portable.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MAGIC = b"MASSCON1"
_ALLOWED = ("<f8", "<i8")


class ContainerError(ValueError):
    pass


def write_container(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    manifest = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype == np.float64:
            dtype = "<f8"
        elif arr.dtype == np.int64:
            dtype = "<i8"
        else:
            raise ContainerError(f"unsupported dtype {arr.dtype} for array {name!r}")
        buf = arr.astype(dtype, copy=False).tobytes()
        manifest.append(
            {
                "name": name,
                "dtype": dtype,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(buf),
            }
        )
        blobs.append(buf)
        offset += len(buf)
    header = json.dumps({"meta": meta, "arrays": manifest}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(header).to_bytes(8, "little"))
        fh.write(header)
        for buf in blobs:
            fh.write(buf)


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ContainerError(f"{path}: bad magic, not a MASSCON1 container")
    hlen = int.from_bytes(raw[8:16], "little")
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    base = 16 + hlen
    arrays = {}
    for entry in header["arrays"]:
        if entry["dtype"] not in _ALLOWED:
            raise ContainerError(f"{path}: unsupported dtype {entry['dtype']}")
        start = base + entry["offset"]
        stop = start + entry["nbytes"]
        if stop > len(raw):
            raise ContainerError(f"{path}: truncated container (array {entry['name']!r})")
        arr = np.frombuffer(raw[start:stop], dtype=entry["dtype"]).reshape(entry["shape"])
        arrays[entry["name"]] = arr.copy()  # detach from the read-only buffer
    return header["meta"], arrays
