"""First-stage pose regressors: shallow, deep and multi-scale, each
optionally ending in a linear bottleneck plus PCA-initialised
reconstruction layer."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import engine
from .engine import Graph, ShapeError
from .preprocess import NormalizedPatch
from .prior import PriorModel, make_reconstruction_layer

KINDS = ("shallow", "deep", "multiscale")

# (filters, kernel, pooling) per conv stage
_CONVS = {
    "shallow": [(8, 5, 8)],
    "deep": [(8, 5, 4), (8, 5, 2), (8, 3, 1)],
    "multiscale": [(8, 5, 4), (8, 5, 2), (8, 3, 1)],
}
_FC = {"shallow": [1024], "deep": [1024, 1024], "multiscale": [1024, 1024]}


@dataclass
class ArchSpec:
    kind: str = "deep"
    input_size: int = 128
    num_joints: int = 14
    prior_dim: int = 0
    convs: list = field(default_factory=list)
    fc: list = field(default_factory=list)
    scales: list = field(default_factory=lambda: [1])

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown architecture {self.kind!r}; choose from {KINDS}")
        if not self.convs:
            self.convs = [list(c) for c in _CONVS[self.kind]]
        if not self.fc:
            self.fc = list(_FC[self.kind])
        if self.kind == "multiscale" and self.scales == [1]:
            self.scales = [1, 2, 4]
        self.convs = [list(c) for c in self.convs]
        if self.prior_dim < 0 or self.prior_dim >= 3 * self.num_joints:
            raise ValueError(f"prior_dim must lie in [0, {3 * self.num_joints}), got {self.prior_dim}")

    @property
    def output_width(self) -> int:
        return 3 * self.num_joints

    def tower_convs(self, scale: int) -> list:
        """Conv stages of the tower fed with the ``1/scale`` input; the first
        pooling shrinks with the scale so coarse towers keep spatial extent."""
        convs = [list(c) for c in self.convs]
        convs[0][2] = max(1, convs[0][2] // scale)
        return convs

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(**d)


def _tower(g: Graph, x: int, prefix: str, convs, rng) -> int:
    for i, (filters, kernel, pool) in enumerate(convs, 1):
        x = g.conv(x, f"{prefix}conv{i}", filters, kernel, rng)
        if pool > 1:
            x = g.pool(x, f"{prefix}pool{i}", pool)
        x = g.relu(x, f"{prefix}relu{i}")
    return g.flatten(x, f"{prefix}flat")


def build(spec: ArchSpec, seed: int = 0, prior: PriorModel | None = None, dtype=np.float64) -> Graph:
    """Trainable graph for ``spec``.

    With ``spec.prior_dim > 0`` the graph ends in a linear bottleneck of that
    width followed by a reconstruction layer initialised from ``prior``
    (weights = components, bias = mean); without a model the reconstruction
    layer keeps its random initialisation.
    """
    rng = np.random.default_rng(seed)
    g = Graph(dtype=dtype)
    feats = []
    for s in spec.scales:
        if spec.input_size % s:
            raise ShapeError(f"scale {s} does not divide input size {spec.input_size}")
        size = spec.input_size // s
        prefix = f"s{s}." if len(spec.scales) > 1 else ""
        x = g.input(f"{prefix}input", (1, size, size))
        feats.append(_tower(g, x, prefix, spec.tower_convs(s), rng))
    x = feats[0] if len(feats) == 1 else g.concat(feats, "concat")
    for i, width in enumerate(spec.fc, 1):
        x = g.fc(x, f"fc{i}", width, rng)
        x = g.relu(x, f"fc{i}.relu")
    if spec.prior_dim:
        x = g.fc(x, "bottleneck", spec.prior_dim, rng)
        x = g.fc(x, "recon", spec.output_width, rng)
        if prior is not None:
            if prior.dim != spec.prior_dim or prior.mean.shape[0] != spec.output_width:
                raise ShapeError(f"prior model is {prior.mean.shape[0]}x{prior.dim}, "
                                 f"architecture needs {spec.output_width}x{spec.prior_dim}")
            w, b = make_reconstruction_layer(prior)
            g.params["recon.W"][...] = w
            g.params["recon.b"][...] = b
    else:
        x = g.fc(x, "out", spec.output_width, rng)
    g.set_output(x)
    g.meta = {"role": "pose", "arch": spec.to_dict()}
    return g


def arch_of(graph: Graph) -> ArchSpec:
    return ArchSpec.from_dict(graph.meta["arch"])


def downscale(values: np.ndarray, factor: int) -> np.ndarray:
    """Block average over ``factor x factor`` windows ignoring the
    missing-depth sentinel (1); all-missing windows stay 1."""
    if factor == 1:
        return values
    *lead, h, w = values.shape
    if h % factor or w % factor:
        raise ShapeError(f"scale {factor} does not divide patch size {h}x{w}")
    blk = values.reshape(*lead, h // factor, factor, w // factor, factor)
    valid = blk < 1.0
    cnt = valid.sum(axis=(-3, -1))
    tot = np.where(valid, blk, 0.0).sum(axis=(-3, -1))
    return np.where(cnt > 0, tot / np.maximum(cnt, 1), 1.0)


def multiscale_inputs(patch, scales) -> list[np.ndarray]:
    """Downscaled copies of a patch (``[S, S]`` or a batch ``[N, S, S]``)."""
    values = patch.values if isinstance(patch, NormalizedPatch) else np.asarray(patch)
    return [downscale(values, s) for s in scales]


def prepare_inputs(spec: ArchSpec, values: np.ndarray) -> list[np.ndarray]:
    """Graph inputs ``[N, 1, S/s, S/s]`` for a batch of patch values ``[N, S, S]``."""
    values = np.asarray(values)
    if values.ndim == 2:
        values = values[None]
    if values.shape[1:] != (spec.input_size, spec.input_size):
        raise ShapeError(f"patch is {values.shape[1:]}, network expects "
                         f"{spec.input_size}x{spec.input_size}")
    return [v[:, None] for v in multiscale_inputs(values, spec.scales)]


def predict(graph: Graph, patch) -> np.ndarray:
    """Normalized pose ``[J, 3]`` for one patch (or ``[N, J, 3]`` for a batch)."""
    spec = arch_of(graph)
    values = patch.values if isinstance(patch, NormalizedPatch) else np.asarray(patch)
    single = values.ndim == 2
    out = engine.predict_batched(graph, prepare_inputs(spec, values))
    out = out.reshape(len(out), spec.num_joints, 3)
    return out[0] if single else out


def bottleneck_and_output(graph: Graph, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Bottleneck activations and network outputs for a batch of patches."""
    spec = arch_of(graph)
    graph.forward(prepare_inputs(spec, values), keep=True)
    vals = graph._values
    c = vals[graph.node_id("bottleneck")].copy()
    out = vals[graph.output_id].copy()
    graph._values = graph._caches = None
    return c, out
