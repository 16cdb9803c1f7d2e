"""Versioned binary checkpoints.

Layout: magic "STMD1", an 8-byte little-endian header length, a UTF-8 JSON
header (fusion variant tag, schedule parameters, config hashes, step count,
and a manifest of name/shape/offset per array), then the payload of
little-endian float32 arrays. Writing is deterministic, so save -> load ->
save is byte-identical.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"STMD1"
VERSION = 1


def save_checkpoint(path, arrays, meta):
    """`arrays` is an ordered name -> ndarray mapping; everything is stored
    as little-endian float32. `meta` is small JSON-safe metadata."""
    manifest = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        manifest.append({"name": name, "shape": list(a.shape),
                         "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    header = dict(meta)
    header["version"] = VERSION
    header["manifest"] = manifest
    blob = json.dumps(header, sort_keys=True,
                      separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)


def load_checkpoint(path):
    """Returns (meta, name -> float32 ndarray). Raises ValueError on any
    structural problem."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack_from("<Q", raw, len(MAGIC))
    hstart = len(MAGIC) + 8
    try:
        header = json.loads(raw[hstart:hstart + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: corrupt header ({exc})") from exc
    if header.get("version") != VERSION:
        raise ValueError(f"{path}: unsupported version {header.get('version')}")
    payload = raw[hstart + hlen:]
    arrays = {}
    for entry in header.pop("manifest"):
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        start = entry["offset"]
        if start + 4 * n > len(payload):
            raise ValueError(f"{path}: truncated payload at {entry['name']}")
        a = np.frombuffer(payload, dtype="<f4", count=n, offset=start)
        arrays[entry["name"]] = a.reshape(shape).copy()
    header.pop("version")
    return header, arrays
