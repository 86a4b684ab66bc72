"""Versioned weight container.

Layout of a checkpoint file::

    SYPCKPT <version>\\n
    <header length in bytes, base-10>\\n
    <JSON header>
    <raw little-endian float64 payload>

The header lists, per section, the arrays in payload order with their names,
shapes and byte offsets, plus a SHA-256 content checksum over names, shapes
and bytes. Files are written to a temporary path and renamed into place.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

MAGIC = "SYPCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def checksum(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.asarray(arrays[name], dtype="<f8", order="C")
        h.update(name.encode())
        h.update(json.dumps(list(a.shape)).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def save(path, sections: dict[str, dict[str, np.ndarray]], meta: dict | None = None) -> str:
    """Write ``{section: {name: array}}``; returns the checksum of all arrays."""
    entries, blobs, offset = [], [], 0
    flat = {}
    for section in sorted(sections):
        for name in sorted(sections[section]):
            a = np.asarray(sections[section][name], dtype="<f8", order="C")
            key = f"{section}/{name}"
            flat[key] = a
            raw = a.tobytes()
            entries.append({"section": section, "name": name, "shape": list(a.shape),
                            "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
    digest = checksum(flat)
    header = json.dumps({"version": VERSION, "checksum": digest, "arrays": entries,
                         "meta": meta or {}}, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    with open(tmp, "wb") as fh:
        fh.write(f"{MAGIC} {VERSION}\n{len(header)}\n".encode())
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)
    return digest


def load(path) -> tuple[dict[str, dict[str, np.ndarray]], dict]:
    """Return ``(sections, header)``; verifies the content checksum."""
    with open(path, "rb") as fh:
        first = fh.readline().decode(errors="replace").split()
        if len(first) != 2 or first[0] != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        if int(first[1]) != VERSION:
            raise CheckpointError(f"{path}: unsupported version {first[1]}")
        size = int(fh.readline())
        header = json.loads(fh.read(size))
        payload = fh.read()
    sections: dict[str, dict[str, np.ndarray]] = {}
    flat = {}
    for e in header["arrays"]:
        chunk = payload[e["offset"] : e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise CheckpointError(f"{path}: truncated payload for {e['section']}/{e['name']}")
        a = np.frombuffer(chunk, dtype="<f8").reshape(e["shape"]).copy()
        sections.setdefault(e["section"], {})[e["name"]] = a
        flat[f"{e['section']}/{e['name']}"] = a
    if checksum(flat) != header["checksum"]:
        raise CheckpointError(f"{path}: checksum mismatch")
    return sections, header
