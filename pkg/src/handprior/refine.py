"""Second stage: per-joint refinement from concentric patches around the
current joint estimate, applied iteratively."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import engine
from .engine import Graph, ShapeError
from .preprocess import NormalizedPatch

KINDS = ("orref", "stdref")


@dataclass
class RefineSpec:
    """Patch sizes descend; the matching pooling sizes end in 1."""

    patch_sizes: list = field(default_factory=lambda: [64, 32, 16])
    pools: list = field(default_factory=lambda: [4, 2, 1])
    iterations: int = 2
    joint_index: int = 0
    kind: str = "orref"
    filters: int = 8
    kernel: int = 5
    fc: list = field(default_factory=lambda: [256])
    offset_scale: float = 1.0     # raw network output times this = offset

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in KINDS:
            raise ValueError(f"unknown refiner kind {self.kind!r}; choose from {KINDS}")
        if not self.patch_sizes or len(self.patch_sizes) != len(self.pools):
            raise ValueError("patch_sizes and pools must be non-empty and of equal length")
        if any(a <= b for a, b in zip(self.patch_sizes, self.patch_sizes[1:])):
            raise ValueError(f"patch sizes must strictly descend, got {self.patch_sizes}")
        if self.pools[-1] != 1:
            raise ValueError("the smallest patch must not be pooled (pool size 1)")
        if any(p < 1 for p in self.pools):
            raise ValueError("pool sizes must be >= 1")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.joint_index < 0:
            raise ValueError("joint_index must be >= 0")
        if not self.offset_scale > 0:
            raise ValueError(f"offset_scale must be > 0, got {self.offset_scale}")

    @property
    def max_size(self) -> int:
        return self.patch_sizes[0]

    def towers(self) -> list[tuple[int, int]]:
        """``(patch size, pooling)`` per input tower of the refiner graph."""
        pairs = list(zip(self.patch_sizes, self.pools))
        return pairs if self.kind == "orref" else pairs[:1]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RefineSpec":
        return cls(**d)


def patch_pixels(centers: np.ndarray, side: float, crops: np.ndarray, intrinsics: Sequence,
                 size: int, points: np.ndarray) -> np.ndarray:
    """Continuous ``(x, y)`` patch pixels of normalized points ``[N, 3]``."""
    mm = centers + np.asarray(points, dtype=np.float64) * (side / 2.0)
    fx = np.array([k.fx for k in intrinsics])
    fy = np.array([k.fy for k in intrinsics])
    cx = np.array([k.cx for k in intrinsics])
    cy = np.array([k.cy for k in intrinsics])
    u = fx * mm[:, 0] / mm[:, 2] + cx
    v = fy * mm[:, 1] / mm[:, 2] + cy
    return np.stack([(u - crops[:, 0]) * size / (crops[:, 2] - crops[:, 0]),
                     (v - crops[:, 1]) * size / (crops[:, 3] - crops[:, 1])], axis=-1)


def windows(values: np.ndarray, pixels: np.ndarray, sizes: Sequence[int]) -> list[np.ndarray]:
    """``[N, s, s]`` windows of ``values [N, S, S]`` centred on ``pixels [N, 2]``.

    The window for size ``s`` starts ``s // 2`` before the floored pixel, so
    even-sized windows nest concentrically. Outside the patch reads as 1.
    """
    n, h, w = values.shape
    pad = max(sizes)
    padded = np.ones((n, h + 2 * pad, w + 2 * pad), dtype=values.dtype)
    padded[:, pad:pad + h, pad:pad + w] = values
    px = np.floor(pixels).astype(np.int64)
    out = []
    for s in sizes:
        r0 = np.clip(px[:, 1] - s // 2 + pad, 0, h + 2 * pad - s)
        c0 = np.clip(px[:, 0] - s // 2 + pad, 0, w + 2 * pad - s)
        rows = r0[:, None] + np.arange(s)
        cols = c0[:, None] + np.arange(s)
        out.append(padded[np.arange(n)[:, None, None], rows[:, :, None], cols[:, None, :]])
    return out


def extract_joint_patches(patch: NormalizedPatch, joint_estimate, spec: RefineSpec) -> list[np.ndarray]:
    """``s x s`` windows (one per ``spec.patch_sizes``) centred on the
    estimate's pixel projection, padded with 1 outside the patch."""
    est = np.asarray(joint_estimate, dtype=np.float64).reshape(1, 3)
    px = patch_pixels(np.asarray(patch.cube.center, dtype=np.float64)[None], patch.cube.side,
                      np.asarray(patch.crop, dtype=np.float64)[None], [patch.intrinsics], patch.size, est)
    return [w[0] for w in windows(patch.values[None], px, spec.patch_sizes)]


def build_refiner(kind: str, spec: RefineSpec, seed: int = 0, dtype=np.float64) -> Graph:
    """ORRef: one conv tower per patch size; StdRef: a single tower on the
    largest patch. Towers are conv-pool-relu-conv(3x3)-relu, followed by the
    FC layers and a linear 3-vector output."""
    spec = RefineSpec.from_dict({**spec.to_dict(), "kind": kind})
    rng = np.random.default_rng(seed)
    g = Graph(dtype=dtype)
    feats = []
    for size, pool in spec.towers():
        pre = f"p{size}."
        x = g.input(f"{pre}input", (1, size, size))
        x = g.conv(x, f"{pre}conv1", spec.filters, spec.kernel, rng)
        if pool > 1:
            x = g.pool(x, f"{pre}pool1", pool)
        x = g.relu(x, f"{pre}relu1")
        if min(g.shape_of(x)[1:]) >= 3:
            x = g.conv(x, f"{pre}conv2", spec.filters, 3, rng)
            x = g.relu(x, f"{pre}relu2")
        feats.append(g.flatten(x, f"{pre}flat"))
    x = feats[0] if len(feats) == 1 else g.concat(feats, "concat")
    for i, width in enumerate(spec.fc, 1):
        x = g.fc(x, f"fc{i}", width, rng)
        x = g.relu(x, f"fc{i}.relu")
    g.set_output(g.fc(x, "out", 3, rng))
    g.meta = {"role": "refiner", "refine": spec.to_dict()}
    return g


def spec_of(graph: Graph) -> RefineSpec:
    return RefineSpec.from_dict(graph.meta["refine"])


def refiner_inputs(spec: RefineSpec, wins: Sequence[np.ndarray], depth) -> list[np.ndarray]:
    """Graph inputs ``[N, 1, s, s]``; depths are made relative to the
    current estimate's normalized z."""
    z = np.asarray(depth, dtype=np.float64).reshape(-1, 1, 1)
    by_size = {w.shape[-1]: w for w in wins}
    out = []
    for size, _ in spec.towers():
        if size not in by_size:
            raise ShapeError(f"refiner expects a {size}x{size} patch, got sizes {sorted(by_size)}")
        w = by_size[size]
        w = w[None] if w.ndim == 2 else w
        out.append((w - z)[:, None])
    return out


def refine_once(graph: Graph, patches: Sequence[np.ndarray], depth=0.0) -> np.ndarray:
    """Offset ``(dx, dy, dz)`` in normalized units for one joint.

    ``patches`` are the windows of :func:`extract_joint_patches` (or
    batched ``[N, s, s]`` windows); ``depth`` is the current estimate's z.
    """
    spec = spec_of(graph)
    single = np.asarray(patches[0]).ndim == 2
    out = engine.predict_batched(graph, refiner_inputs(spec, patches, depth)).astype(np.float64)
    out *= spec.offset_scale
    return out[0] if single else out


def _is_identity(graph) -> bool:
    return graph is None


def refine_batch(refiners: Sequence[Graph | None], values: np.ndarray, centers: np.ndarray, side: float,
                 crops: np.ndarray, intrinsics: Sequence, poses: np.ndarray,
                 iterations: int | None = None) -> np.ndarray:
    """Iterative refinement of normalized poses ``[N, J, 3]``.

    ``refiners[j]`` refines joint ``j``; ``None`` leaves the joint alone.
    Every iteration re-centres the windows on the previous estimate.
    """
    poses = np.array(poses, dtype=np.float64)
    if len(refiners) != poses.shape[1]:
        raise ShapeError(f"{len(refiners)} refiners for {poses.shape[1]} joints")
    specs = [None if _is_identity(g) else spec_of(g) for g in refiners]
    if iterations is None:
        its = [s.iterations for s in specs if s is not None]
        iterations = max(its) if its else 1
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")
    size = values.shape[-1]
    for _ in range(iterations):
        current = poses.copy()
        for j, (g, spec) in enumerate(zip(refiners, specs)):
            if spec is None:
                continue
            px = patch_pixels(centers, side, crops, intrinsics, size, current[:, j])
            wins = windows(values, px, spec.patch_sizes)
            poses[:, j] = current[:, j] + refine_once(g, wins, current[:, j, 2]).reshape(-1, 3)
    return poses


def refine_iterative(refiners: Sequence[Graph | None], patch: NormalizedPatch, initial_pose,
                     iterations: int | None = None) -> np.ndarray:
    """Refined normalized pose ``[J, 3]`` for one patch."""
    pose = np.asarray(getattr(initial_pose, "joints", initial_pose), dtype=np.float64)
    out = refine_batch(refiners, patch.values[None], np.asarray(patch.cube.center, dtype=np.float64)[None],
                       patch.cube.side, np.asarray(patch.crop, dtype=np.float64)[None], [patch.intrinsics],
                       pose[None], iterations)
    return out[0]


def training_set(spec: RefineSpec, values: np.ndarray, centers: np.ndarray, side: float, crops: np.ndarray,
                 intrinsics: Sequence, true_norm: np.ndarray, sigma, rng: np.random.Generator,
                 copies: int = 1, dtype=np.float32) -> engine.Dataset:
    """Perturbed-estimate samples for one joint.

    Estimates are ground truth plus Gaussian noise with per-axis std
    ``sigma``; the target is the offset ``true - estimate`` divided by
    ``spec.offset_scale``.
    """
    j = spec.joint_index
    truth = np.tile(true_norm[:, j], (copies, 1))
    reps = np.tile(np.arange(len(values)), copies)
    est = truth + rng.normal(0.0, 1.0, truth.shape) * np.asarray(sigma, dtype=np.float64)
    px = patch_pixels(centers[reps], side, crops[reps], [intrinsics[i] for i in reps], values.shape[-1], est)
    wins = windows(values[reps], px, spec.patch_sizes)
    inputs = [x.astype(dtype) for x in refiner_inputs(spec, wins, est[:, 2])]
    return engine.Dataset(inputs, ((truth - est) / spec.offset_scale).astype(dtype))


def train_refiner(spec: RefineSpec, values, centers, side, crops, intrinsics, true_norm, sigma,
                  optim: engine.OptimConfig, seed: int = 0, copies: int = 1, dtype=np.float32):
    """Build and train the refiner for ``spec.joint_index``; returns ``(graph, trace)``.

    The network regresses offsets in units of the mean perturbation std,
    which keeps targets near unit scale.
    """
    spec = RefineSpec.from_dict({**spec.to_dict(), "offset_scale": float(np.mean(sigma))})
    graph = build_refiner(spec.kind, spec, seed=seed, dtype=dtype)
    data = training_set(spec, values, centers, side, crops, intrinsics, true_norm, sigma,
                        np.random.default_rng(seed), copies, dtype)
    return graph, engine.train_epochs(graph, data, optim)
