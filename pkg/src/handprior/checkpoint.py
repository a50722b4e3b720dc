"""DPCK1 checkpoint files.

Layout: ``b"DPCK1"``, a UTF-8 JSON manifest, one null byte, then every
tensor listed in ``manifest["tensors"]`` as little-endian float32, in order.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MAGIC = b"DPCK1"


class CheckpointError(ValueError):
    pass


def dumps(manifest: dict, tensors: dict[str, np.ndarray]) -> bytes:
    entries = [{"name": k, "shape": list(v.shape)} for k, v in tensors.items()]
    body = dict(manifest)
    body["tensors"] = entries
    head = json.dumps(body, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    blobs = [np.ascontiguousarray(v, dtype="<f4").tobytes() for v in tensors.values()]
    return MAGIC + head.encode("utf-8") + b"\0" + b"".join(blobs)


def loads(raw: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if not raw.startswith(MAGIC):
        raise CheckpointError("not a DPCK1 checkpoint (bad magic)")
    end = raw.find(b"\0", len(MAGIC))
    if end < 0:
        raise CheckpointError("manifest is not null-terminated")
    try:
        manifest = json.loads(raw[len(MAGIC):end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"malformed manifest: {exc}") from None
    tensors: dict[str, np.ndarray] = {}
    offset = end + 1
    for entry in manifest.get("tensors", []):
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = 4 * count
        if offset + nbytes > len(raw):
            raise CheckpointError(f"truncated blob for tensor {entry['name']!r}")
        tensors[entry["name"]] = np.frombuffer(raw, dtype="<f4", count=count,
                                               offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{len(raw) - offset} trailing bytes after last tensor")
    return manifest, tensors


def save(path: str | Path, manifest: dict, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(manifest, tensors))


def load(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes())
