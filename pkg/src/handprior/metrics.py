"""Evaluation metrics: mean joint error and fraction of frames within a distance."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

DEFAULT_THRESHOLDS = np.arange(0.0, 81.0, 1.0)


def _errors(predictions, ground_truth) -> np.ndarray:
    p = np.asarray(predictions, dtype=np.float64)
    g = np.asarray(ground_truth, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"prediction shape {p.shape} does not match ground truth {g.shape}")
    if p.ndim != 3 or p.shape[2] != 3:
        raise ValueError(f"expected [frames, J, 3], got {p.shape}")
    return np.linalg.norm(p - g, axis=2)


def avg_joint_error(predictions, ground_truth) -> tuple[np.ndarray, float]:
    """Per-joint mean Euclidean error over frames, and their mean (mm)."""
    e = _errors(predictions, ground_truth)
    per_joint = e.mean(axis=0) if len(e) else np.zeros(e.shape[1])
    return per_joint, float(per_joint.mean())


def fraction_within(predictions, ground_truth, thresholds=DEFAULT_THRESHOLDS) -> np.ndarray:
    """Fraction of frames whose worst joint error is <= each threshold."""
    t = np.asarray(thresholds, dtype=np.float64)
    if np.any(np.diff(t) < 0):
        raise ValueError("thresholds must be ascending")
    worst = _errors(predictions, ground_truth).max(axis=1)
    if len(worst) == 0:
        return np.zeros(len(t))
    return (worst[None, :] <= t[:, None]).mean(axis=1)


@dataclass
class EvalReport:
    per_joint: np.ndarray
    overall: float
    thresholds: np.ndarray
    fractions: np.ndarray
    frames: int
    joint_names: Sequence[str] | None = None

    def fraction_at(self, threshold: float) -> float:
        return float(np.interp(threshold, self.thresholds, self.fractions))

    def write_curve_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["threshold_mm", "fraction"])
            for t, f in zip(self.thresholds, self.fractions):
                w.writerow([f"{t:g}", f"{f:.6f}"])

    def write_joint_csv(self, path) -> None:
        names = self.joint_names or [str(i) for i in range(len(self.per_joint))]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["joint", "mean_error_mm"])
            for n, e in zip(names, self.per_joint):
                w.writerow([n, f"{e:.6f}"])


def evaluate(predictions, ground_truth, thresholds=DEFAULT_THRESHOLDS, joint_names=None) -> EvalReport:
    per_joint, overall = avg_joint_error(predictions, ground_truth)
    t = np.asarray(thresholds, dtype=np.float64)
    return EvalReport(per_joint, overall, t, fraction_within(predictions, ground_truth, t),
                      len(np.asarray(predictions)), joint_names)


def read_curve_csv(path) -> tuple[np.ndarray, np.ndarray]:
    rows = list(csv.reader(Path(path).read_text().splitlines()))[1:]
    return (np.array([float(r[0]) for r in rows]), np.array([float(r[1]) for r in rows]))
