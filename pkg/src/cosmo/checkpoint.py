"""Single-file parameter archive: JSON manifest plus raw float64 buffers.

Layout: 8-byte little-endian manifest length, the manifest JSON (UTF-8),
then one little-endian float64 buffer per named parameter, in manifest order.
"""

from __future__ import annotations

import json
import struct

import numpy as np


class ArchiveError(RuntimeError):
    """Manifest and buffers disagree, or the file is not an archive."""


def save_archive(path: str, manifest: dict, arrays: dict[str, np.ndarray]) -> None:
    manifest = dict(manifest)
    manifest["params"] = [{"name": k, "shape": list(v.shape)}
                          for k, v in arrays.items()]
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for v in arrays.values():
            f.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_archive(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8:
        raise ArchiveError(f"{path}: too short to be an archive")
    (mlen,) = struct.unpack("<Q", raw[:8])
    if 8 + mlen > len(raw):
        raise ArchiveError(f"{path}: truncated manifest")
    manifest = json.loads(raw[8:8 + mlen].decode("utf-8"))
    arrays: dict[str, np.ndarray] = {}
    offset = 8 + mlen
    for spec in manifest.get("params", []):
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(raw):
            raise ArchiveError(f"{path}: buffer for {spec['name']} truncated")
        arrays[spec["name"]] = np.frombuffer(
            raw, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset = end
    if offset != len(raw):
        raise ArchiveError(f"{path}: {len(raw) - offset} trailing bytes")
    return manifest, arrays
