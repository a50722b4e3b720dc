"""On-disk dataset format and train/test splitting.

A dataset directory holds ``index.json`` and one DPTH1 blob per frame::

    DPTH1 | u32 width | u32 height | width*height little-endian float32 (mm, 0 = missing)

``index.json`` records intrinsics, J, joint names, units and, per frame,
the blob path, frame id and the pose in millimetres.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .preprocess import DepthFrame, Intrinsics

logger = logging.getLogger(__name__)

DEPTH_MAGIC = b"DPTH1"
INDEX_NAME = "index.json"


class DatasetError(ValueError):
    pass


def encode_depth(depth: np.ndarray) -> bytes:
    h, w = depth.shape
    return DEPTH_MAGIC + struct.pack("<II", w, h) + np.ascontiguousarray(depth, dtype="<f4").tobytes()


def decode_depth(raw: bytes) -> np.ndarray:
    if raw[:5] != DEPTH_MAGIC:
        raise DatasetError("bad depth blob magic")
    if len(raw) < 13:
        raise DatasetError("truncated depth blob header")
    w, h = struct.unpack("<II", raw[5:13])
    if len(raw) != 13 + 4 * w * h:
        raise DatasetError(f"depth blob holds {len(raw) - 13} bytes, header says {4 * w * h}")
    return np.frombuffer(raw, dtype="<f4", offset=13).reshape(h, w).astype(np.float32)


@dataclass
class Record:
    path: str
    pose: np.ndarray
    frame_id: str


@dataclass
class DatasetIndex:
    root: Path
    records: list[Record]
    intrinsics: Intrinsics
    num_joints: int
    joint_names: list[str] = field(default_factory=list)
    units: str = "mm"

    def __len__(self) -> int:
        return len(self.records)

    def subset(self, idx: Sequence[int]) -> "DatasetIndex":
        return DatasetIndex(self.root, [self.records[i] for i in idx], self.intrinsics,
                            self.num_joints, list(self.joint_names), self.units)

    def frames(self, strict: bool = True) -> Iterator[tuple[DepthFrame, np.ndarray]]:
        """Stream ``(frame, pose_mm)`` in index order.

        In strict mode the first bad record raises; otherwise it is logged
        and skipped.
        """
        for rec in self.records:
            try:
                blob = self.root / rec.path
                if not blob.is_file():
                    raise DatasetError(f"frame {rec.frame_id!r}: missing depth file {rec.path}")
                try:
                    depth = decode_depth(blob.read_bytes())
                except DatasetError as exc:
                    raise DatasetError(f"frame {rec.frame_id!r}: {exc}") from None
                yield DepthFrame(depth, self.intrinsics, rec.frame_id), rec.pose
            except DatasetError as exc:
                if strict:
                    raise
                logger.warning("skipping record: %s", exc)


def write_dataset(out_dir, frames: Sequence[DepthFrame], poses: Sequence[np.ndarray],
                  intrinsics: Intrinsics, joint_names: Sequence[str]) -> Path:
    out = Path(out_dir)
    (out / "depth").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (frame, pose) in enumerate(zip(frames, poses)):
        rel = f"depth/{i:06d}.dpth"
        (out / rel).write_bytes(encode_depth(frame.depth))
        entries.append({"frame_id": frame.frame_id or f"{i:06d}", "depth": rel,
                        "pose": np.asarray(pose, dtype=np.float64).tolist()})
    index = {
        "format": "DPTH1-dataset",
        "version": 1,
        "units": "mm",
        "num_joints": len(joint_names),
        "joint_names": list(joint_names),
        "intrinsics": {"fx": intrinsics.fx, "fy": intrinsics.fy, "cx": intrinsics.cx, "cy": intrinsics.cy},
        "frames": entries,
    }
    (out / INDEX_NAME).write_text(json.dumps(index, indent=1, sort_keys=True), encoding="utf-8")
    return out


def load_dataset(path, strict: bool = True) -> DatasetIndex:
    """Parse ``index.json``; records with a wrong joint count are rejected
    (strict) or skipped (lenient)."""
    root = Path(path)
    idx_file = root / INDEX_NAME
    if not idx_file.is_file():
        raise DatasetError(f"{root}: no {INDEX_NAME}")
    try:
        raw = json.loads(idx_file.read_text(encoding="utf-8"))
        k = raw["intrinsics"]
        intr = Intrinsics(float(k["fx"]), float(k["fy"]), float(k["cx"]), float(k["cy"]))
        nj = int(raw["num_joints"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"{idx_file}: malformed header ({exc})") from None
    records = []
    for i, e in enumerate(raw.get("frames", [])):
        fid = str(e.get("frame_id", i))
        try:
            pose = np.asarray(e["pose"], dtype=np.float64)
            if pose.shape != (nj, 3):
                raise DatasetError(f"frame {fid!r}: pose has shape {pose.shape}, expected ({nj}, 3)")
            records.append(Record(str(e["depth"]), pose, fid))
        except (KeyError, ValueError, DatasetError) as exc:
            msg = exc if isinstance(exc, DatasetError) else f"frame {fid!r}: malformed record ({exc})"
            if strict:
                raise DatasetError(str(msg)) from None
            logger.warning("skipping record: %s", msg)
    return DatasetIndex(root, records, intr, nj, list(raw.get("joint_names", [])), raw.get("units", "mm"))


def split(index: DatasetIndex, fraction: float, seed: int) -> tuple[DatasetIndex, DatasetIndex]:
    """Deterministic disjoint split; ``fraction`` of the frames go to train."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    n = len(index)
    perm = np.random.default_rng(seed).permutation(n)
    k = int(round(fraction * n))
    return index.subset(sorted(perm[:k])), index.subset(sorted(perm[k:]))
