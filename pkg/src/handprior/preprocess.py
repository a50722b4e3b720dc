"""Hand localisation, cube cropping and pose normalisation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_CUBE_SIDE = 250.0
DEFAULT_Z_BAND = 150.0
DEFAULT_PATCH_SIZE = 128


class NoHandError(ValueError):
    pass


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    def project(self, points: np.ndarray) -> np.ndarray:
        """Camera-space mm ``[..., 3]`` to pixel coordinates ``[..., 2]``."""
        p = np.asarray(points, dtype=np.float64)
        u = self.fx * p[..., 0] / p[..., 2] + self.cx
        v = self.fy * p[..., 1] / p[..., 2] + self.cy
        return np.stack([u, v], axis=-1)

    def backproject(self, u, v, d) -> np.ndarray:
        u, v, d = (np.asarray(a, dtype=np.float64) for a in (u, v, d))
        return np.stack([(u - self.cx) * d / self.fx, (v - self.cy) * d / self.fy, d], axis=-1)

    def as_list(self) -> list[float]:
        return [self.fx, self.fy, self.cx, self.cy]


@dataclass
class DepthFrame:
    """A depth image in millimetres; 0 marks a missing reading."""

    depth: np.ndarray
    intrinsics: Intrinsics
    frame_id: str = ""

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]


@dataclass(frozen=True)
class CubeSpec:
    center: tuple[float, float, float]
    side: float = DEFAULT_CUBE_SIDE

    def __post_init__(self):
        if self.side <= 0:
            raise ValueError("cube side must be > 0")
        if self.center[2] <= 0:
            raise ValueError("cube center must lie in front of the camera")


@dataclass
class NormalizedPatch:
    """``values`` is ``[S, S]`` in [-1, 1]; ``crop`` is the image rectangle
    ``(u0, v0, u1, v1)`` that was resampled into it."""

    values: np.ndarray
    cube: CubeSpec
    crop: tuple[float, float, float, float]
    intrinsics: Intrinsics

    @property
    def size(self) -> int:
        return self.values.shape[0]

    def to_patch_coords(self, points_mm: np.ndarray) -> np.ndarray:
        """Pixel coordinates of camera-space points inside this patch (continuous)."""
        uv = self.intrinsics.project(points_mm)
        u0, v0, u1, v1 = self.crop
        s = self.size
        return np.stack([(uv[..., 0] - u0) * s / (u1 - u0),
                         (uv[..., 1] - v0) * s / (v1 - v0)], axis=-1)


@dataclass
class Pose:
    """``joints`` is ``[J, 3]``; ``normalized`` tells millimetres from cube units."""

    joints: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.float64)
        if self.joints.ndim != 2 or self.joints.shape[1] != 3:
            raise ValueError(f"pose must be [J, 3], got {self.joints.shape}")


def detect_hand(frame: DepthFrame, cube_side: float = DEFAULT_CUBE_SIDE,
                z_band: float = DEFAULT_Z_BAND) -> CubeSpec:
    """Cube around the centre of mass of the closest object.

    The closest object is every pixel within ``z_band`` mm of the nearest
    valid depth.
    """
    d = frame.depth
    valid = d > 0
    if not valid.any():
        raise NoHandError(f"frame {frame.frame_id!r}: no valid depth")
    dmin = d[valid].min()
    sel = valid & (d <= dmin + z_band)
    v, u = np.nonzero(sel)
    pts = frame.intrinsics.backproject(u, v, d[v, u])
    c = pts.mean(axis=0)
    return CubeSpec(center=(float(c[0]), float(c[1]), float(c[2])), side=float(cube_side))


def crop_rect(cube: CubeSpec, intr: Intrinsics) -> tuple[float, float, float, float]:
    """Projection of the cube's x/y extents at the depth of its centre."""
    x, y, z = cube.center
    h = cube.side / 2.0
    return (intr.fx * (x - h) / z + intr.cx, intr.fy * (y - h) / z + intr.cy,
            intr.fx * (x + h) / z + intr.cx, intr.fy * (y + h) / z + intr.cy)


def normalize_depth(depth: np.ndarray, cube: CubeSpec) -> np.ndarray:
    out = np.clip(2.0 * (depth - cube.center[2]) / cube.side, -1.0, 1.0)
    out[depth <= 0] = 1.0
    return out


def extract_patch(frame: DepthFrame, cube: CubeSpec, size: int = DEFAULT_PATCH_SIZE) -> NormalizedPatch:
    """Crop the projected cube, resample to ``size x size`` (nearest
    neighbour) and map depth into [-1, 1] relative to the cube."""
    u0, v0, u1, v1 = crop_rect(cube, frame.intrinsics)
    if u1 <= 0 or v1 <= 0 or u0 >= frame.width or v0 >= frame.height:
        raise ValueError(f"frame {frame.frame_id!r}: cube projects outside the image")
    cols = np.floor(u0 + (np.arange(size) + 0.5) * (u1 - u0) / size).astype(np.int64)
    rows = np.floor(v0 + (np.arange(size) + 0.5) * (v1 - v0) / size).astype(np.int64)
    inside = ((rows >= 0) & (rows < frame.height))[:, None] & ((cols >= 0) & (cols < frame.width))[None, :]
    d = frame.depth[np.clip(rows, 0, frame.height - 1)[:, None], np.clip(cols, 0, frame.width - 1)[None, :]]
    d = np.where(inside, d, 0.0)
    return NormalizedPatch(normalize_depth(d.astype(np.float64), cube), cube, (u0, v0, u1, v1),
                           frame.intrinsics)


def normalize_pose(pose, cube: CubeSpec):
    """Millimetres to cube units: ``(p - center) / (side / 2)``."""
    if isinstance(pose, Pose):
        if pose.normalized:
            raise ValueError("pose is already normalized")
        return Pose(normalize_pose(pose.joints, cube), normalized=True)
    return (np.asarray(pose, dtype=np.float64) - np.asarray(cube.center)) / (cube.side / 2.0)


def denormalize_pose(pose, cube: CubeSpec):
    if isinstance(pose, Pose):
        if not pose.normalized:
            raise ValueError("pose is already in millimetres")
        return Pose(denormalize_pose(pose.joints, cube), normalized=False)
    return np.asarray(pose, dtype=np.float64) * (cube.side / 2.0) + np.asarray(cube.center)


def preprocess(frame: DepthFrame, size: int = DEFAULT_PATCH_SIZE, cube_side: float = DEFAULT_CUBE_SIDE,
               z_band: float = DEFAULT_Z_BAND) -> NormalizedPatch:
    return extract_patch(frame, detect_hand(frame, cube_side, z_band), size)
