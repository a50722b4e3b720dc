"""Linear pose prior: PCA subspace of normalized poses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .preprocess import Pose

DEFAULT_PRIOR_DIM = 30


@dataclass
class PriorModel:
    mean: np.ndarray          # [3J]
    components: np.ndarray    # [3J, d], orthonormal columns
    variances: np.ndarray | None = None   # eigenvalues of the kept components
    total_variance: float | None = None

    @property
    def dim(self) -> int:
        return self.components.shape[1]

    @property
    def num_joints(self) -> int:
        return self.mean.shape[0] // 3

    def explained_variance_ratio(self) -> float:
        if self.variances is None or not self.total_variance:
            return 1.0
        return float(self.variances.sum() / self.total_variance)


def _flat(poses) -> np.ndarray:
    if isinstance(poses, Pose):
        if not poses.normalized:
            raise ValueError("prior operates on normalized poses, got millimetres")
        return poses.joints.reshape(-1)
    if isinstance(poses, (list, tuple)) and poses and isinstance(poses[0], Pose):
        return np.stack([_flat(p) for p in poses])
    a = np.asarray(poses, dtype=np.float64)
    if a.ndim == 3:
        return a.reshape(a.shape[0], -1)
    if a.ndim == 2 and a.shape[1] == 3:
        return a.reshape(-1)
    return a


def fit_pca(poses, d: int) -> PriorModel:
    """Top-``d`` eigenvectors of the sample covariance, eigenvalue-descending.

    Each column is sign-fixed so its largest-magnitude entry is positive.
    """
    x = _flat(poses)
    if x.ndim != 2:
        raise ValueError(f"expected a stack of poses, got shape {x.shape}")
    n, dim = x.shape
    if d < 1 or d > dim:
        raise ValueError(f"embedding dimensionality must lie in [1, {dim}], got {d}")
    if n < d + 1:
        raise ValueError(f"need at least d + 1 = {d + 1} poses, got {n}")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (n - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:d]
    comps = evecs[:, order]
    pivot = np.argmax(np.abs(comps), axis=0)
    comps = comps * np.sign(comps[pivot, np.arange(d)])
    return PriorModel(mean=mean, components=np.ascontiguousarray(comps),
                      variances=np.clip(evals[order], 0.0, None),
                      total_variance=float(np.clip(evals, 0.0, None).sum()))


def embed(model: PriorModel, pose) -> np.ndarray:
    """Coefficients ``components^T (pose - mean)``; batched over leading axes."""
    x = _flat(pose)
    if x.shape[-1] != model.mean.shape[0]:
        raise ValueError(f"pose has {x.shape[-1]} coordinates, model expects {model.mean.shape[0]}")
    return (x - model.mean) @ model.components


def reconstruct(model: PriorModel, c: np.ndarray) -> np.ndarray:
    """``mean + components c`` as ``[..., J, 3]``."""
    c = np.asarray(c, dtype=np.float64)
    if c.shape[-1] != model.dim:
        raise ValueError(f"expected {model.dim} coefficients, got {c.shape[-1]}")
    flat = model.mean + c @ model.components.T
    return flat.reshape(*c.shape[:-1], -1, 3)


def reconstruction_error(model: PriorModel, poses) -> float:
    """Mean squared residual per pose after projecting onto the subspace."""
    x = _flat(poses)
    r = reconstruct(model, embed(model, x)).reshape(x.shape) - x
    return float(np.mean(np.sum(r * r, axis=-1)))


def make_reconstruction_layer(model: PriorModel) -> tuple[np.ndarray, np.ndarray]:
    """Fully connected parameters ``(W [3J, d], b [3J])`` whose forward is
    :func:`reconstruct`."""
    return model.components.copy(), model.mean.copy()
