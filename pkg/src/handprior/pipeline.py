"""Glue between frames on disk or in memory and the training / inference code."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import checkpoint, engine, netzoo, refine
from .preprocess import (DEFAULT_CUBE_SIDE, DEFAULT_Z_BAND, CubeSpec, DepthFrame, NoHandError,
                         NormalizedPatch, preprocess)
from .prior import PriorModel, fit_pca

logger = logging.getLogger(__name__)


@dataclass
class Samples:
    """Preprocessed frames: patch values plus the cube data needed to map
    normalized coordinates back to millimetres and patch pixels."""

    values: np.ndarray        # [N, S, S] float32
    centers: np.ndarray       # [N, 3] cube centres, mm
    crops: np.ndarray         # [N, 4] (u0, v0, u1, v1)
    intrinsics: list          # per frame
    poses_mm: np.ndarray      # [N, J, 3]
    cube_side: float
    frame_ids: list

    def __len__(self) -> int:
        return len(self.values)

    @property
    def size(self) -> int:
        return self.values.shape[1]

    @property
    def poses_norm(self) -> np.ndarray:
        return (self.poses_mm - self.centers[:, None, :]) / (self.cube_side / 2.0)

    def to_mm(self, norm: np.ndarray) -> np.ndarray:
        return np.asarray(norm, dtype=np.float64) * (self.cube_side / 2.0) + self.centers[:, None, :]

    def patch(self, i: int) -> NormalizedPatch:
        return NormalizedPatch(self.values[i].astype(np.float64), self.cube(i),
                               tuple(float(c) for c in self.crops[i]), self.intrinsics[i])

    def cube(self, i: int) -> CubeSpec:
        return CubeSpec(tuple(float(c) for c in self.centers[i]), self.cube_side)

    def subset(self, idx) -> "Samples":
        idx = np.asarray(idx, dtype=np.int64)
        return Samples(self.values[idx], self.centers[idx], self.crops[idx],
                       [self.intrinsics[i] for i in idx], self.poses_mm[idx], self.cube_side,
                       [self.frame_ids[i] for i in idx])


def prepare_samples(items: Iterable[tuple[DepthFrame, np.ndarray]], size: int,
                    cube_side: float = DEFAULT_CUBE_SIDE, z_band: float = DEFAULT_Z_BAND,
                    strict: bool = True) -> Samples:
    """Run hand detection and cropping on ``(frame, pose_mm)`` pairs.

    Frames without a detectable hand raise in strict mode and are skipped
    with a warning otherwise.
    """
    vals, centers, crops, intr, poses, ids = [], [], [], [], [], []
    for frame, pose in items:
        try:
            p = preprocess(frame, size, cube_side, z_band)
        except (NoHandError, ValueError) as exc:
            if strict:
                raise
            logger.warning("skipping frame %r: %s", frame.frame_id, exc)
            continue
        vals.append(p.values.astype(np.float32))
        centers.append(p.cube.center)
        crops.append(p.crop)
        intr.append(frame.intrinsics)
        poses.append(np.asarray(pose, dtype=np.float64))
        ids.append(frame.frame_id)
    if not vals:
        raise ValueError("no usable frames")
    return Samples(np.stack(vals), np.asarray(centers, dtype=np.float64), np.asarray(crops, dtype=np.float64),
                   intr, np.stack(poses), float(cube_side), ids)


def fit_prior(samples: Samples, d: int) -> PriorModel:
    return fit_pca(samples.poses_norm, d)


def train_pose_net(spec: netzoo.ArchSpec, samples: Samples, optim: engine.OptimConfig,
                   seed: int = 0, dtype=np.float32, on_epoch=None, freeze_recon: bool = False):
    """Build and train a first-stage net; returns ``(graph, loss_trace)``.

    A prior net gets its reconstruction layer from PCA of the training poses;
    ``freeze_recon`` keeps that layer fixed during training.
    """
    if samples.size != spec.input_size:
        raise ValueError(f"patches are {samples.size}px, architecture expects {spec.input_size}px")
    if samples.poses_mm.shape[1] != spec.num_joints:
        raise ValueError(f"data has {samples.poses_mm.shape[1]} joints, architecture expects {spec.num_joints}")
    prior = fit_prior(samples, spec.prior_dim) if spec.prior_dim else None
    graph = netzoo.build(spec, seed=seed, prior=prior, dtype=dtype)
    if freeze_recon and spec.prior_dim:
        graph.freeze("recon.W", "recon.b")
    data = engine.Dataset(netzoo.prepare_inputs(spec, samples.values),
                          samples.poses_norm.reshape(len(samples), -1).astype(dtype))
    trace = engine.train_epochs(graph, data, optim, on_epoch=on_epoch)
    return graph, trace


def predict_norm(graph: engine.Graph, samples: Samples) -> np.ndarray:
    """First-stage predictions in normalized cube units, ``[N, J, 3]``."""
    return netzoo.predict(graph, samples.values).astype(np.float64)


def save_model(graph: engine.Graph, path) -> None:
    """Write ``graph`` as a DPCK1 checkpoint; the manifest carries
    ``graph.meta`` plus the layer list."""
    manifest = dict(graph.meta)
    manifest["layers"] = [{"name": n.name, "op": n.op, "inputs": [graph.nodes[i].name for i in n.inputs]}
                          for n in graph.nodes]
    if manifest.get("role") == "pose":
        manifest["prior_dim"] = manifest["arch"]["prior_dim"]
    checkpoint.save(path, manifest, graph.params)


def load_model(path, dtype=np.float32) -> engine.Graph:
    """Rebuild a pose net or refiner from its checkpoint."""
    manifest, tensors = checkpoint.load(path)
    role = manifest.get("role")
    if role == "pose":
        graph = netzoo.build(netzoo.ArchSpec.from_dict(manifest["arch"]), dtype=dtype)
    elif role == "refiner":
        spec = refine.RefineSpec.from_dict(manifest["refine"])
        graph = refine.build_refiner(spec.kind, spec, dtype=dtype)
    else:
        raise checkpoint.CheckpointError(f"{path}: unknown model role {role!r}")
    if set(tensors) != set(graph.params):
        raise checkpoint.CheckpointError(f"{path}: tensors do not match the recorded architecture")
    for name, value in tensors.items():
        if value.shape != graph.params[name].shape:
            raise checkpoint.CheckpointError(f"{path}: tensor {name!r} has shape {value.shape}, "
                                             f"expected {graph.params[name].shape}")
        graph.params[name][...] = value
    graph.meta = {k: v for k, v in manifest.items() if k not in ("tensors", "layers", "prior_dim")}
    return graph
