"""Flat parameter blobs (little-endian float64, row-major) with a JSON manifest."""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

DTYPE = np.dtype("<f8")


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def atomic_write_json(path, obj) -> None:
    atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def pack(arrays: dict[str, np.ndarray]) -> tuple[bytes, list[dict]]:
    """Concatenate arrays in insertion order; manifest offsets are in bytes."""
    chunks, manifest, offset = [], [], 0
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr, dtype=DTYPE).tobytes()
        manifest.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    return b"".join(chunks), manifest


def unpack(blob: bytes, manifest: list[dict]) -> dict[str, np.ndarray]:
    out = {}
    for entry in manifest:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + count * DTYPE.itemsize
        if end > len(blob):
            raise ValueError(f"blob too short for {entry['name']}")
        out[entry["name"]] = np.frombuffer(blob[start:end], dtype=DTYPE).reshape(shape).astype(np.float64)
    return out


def save_arrays(stem, arrays: dict[str, np.ndarray]) -> None:
    """Write ``stem.bin`` and ``stem.json``."""
    blob, manifest = pack(arrays)
    stem = Path(stem)
    atomic_write_bytes(stem.with_suffix(".bin"), blob)
    atomic_write_json(stem.with_suffix(".json"), manifest)


def load_arrays(stem) -> dict[str, np.ndarray]:
    stem = Path(stem)
    with open(stem.with_suffix(".json")) as fh:
        manifest = json.load(fh)
    return unpack(stem.with_suffix(".bin").read_bytes(), manifest)


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def text_digest(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()
