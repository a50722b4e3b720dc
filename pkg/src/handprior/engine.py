"""Small deterministic tensor engine: layer ops, a layer graph with
reverse-mode gradients, Huber loss and momentum SGD.

Tensors are plain numpy arrays. Layer ops accept a single sample
(``[C, H, W]`` / ``[n]``) or a batch (``[N, C, H, W]`` / ``[N, n]``) and
return the same rank. Every op has a ``*_forward`` returning ``(out, cache)``
and a ``*_backward`` consuming that cache.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numba
import numpy as np

logger = logging.getLogger(__name__)


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


# ---------------------------------------------------------------------------
# Layer ops
# ---------------------------------------------------------------------------


def _as_batch(x: np.ndarray, rank: int) -> tuple[np.ndarray, bool]:
    if x.ndim == rank:
        return x[None], True
    if x.ndim == rank + 1:
        return x, False
    raise ShapeError(f"expected rank {rank} or {rank + 1} input, got shape {x.shape}")


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    # x is channel-major [C, N, H, W]; returns [C*kh*kw, N*Ho*Wo]
    c, n, h, w = x.shape
    ho, wo = h - kh + 1, w - kw + 1
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = x[:, :, i:i + ho, j:j + wo]
    return cols.reshape(c * kh * kw, n * ho * wo)


def _check_conv(shape, kernels, bias):
    c, h, w = shape
    if kernels.ndim != 4:
        raise ShapeError(f"kernels must be [F, C, kh, kw], got {kernels.shape}")
    f, kc, kh, kw = kernels.shape
    if kc != c:
        raise ShapeError(f"channel axis mismatch: input has {c}, kernels expect {kc}")
    if kh > h:
        raise ShapeError(f"height axis: kernel height {kh} exceeds input height {h}")
    if kw > w:
        raise ShapeError(f"width axis: kernel width {kw} exceeds input width {w}")
    if bias.shape != (f,):
        raise ShapeError(f"bias axis: expected ({f},), got {bias.shape}")


@numba.njit(cache=True, fastmath=True)
def _conv_direct_kernel(x, w, b, out):
    c_in, n_b = x.shape[0], x.shape[1]
    f_out, _, kh, kw = w.shape
    ho, wo = out.shape[2], out.shape[3]
    for f in range(f_out):
        for n in range(n_b):
            o = out[f, n]
            o[:, :] = b[f]
            for c in range(c_in):
                xc = x[c, n]
                for i in range(kh):
                    for j in range(kw):
                        wv = w[f, c, i, j]
                        for y in range(ho):
                            for u in range(wo):
                                o[y, u] += wv * xc[y + i, u + j]


@numba.njit(cache=True)
def _conv_grad_kernel(x, w, d, dk, db, dx, need_dx):
    # skips zero output gradients, which pooling and relu make common
    f_out, n_b, ho, wo = d.shape
    c_in, _, kh, kw = w.shape[1], 0, w.shape[2], w.shape[3]
    for f in range(f_out):
        for n in range(n_b):
            for y in range(ho):
                for u in range(wo):
                    v = d[f, n, y, u]
                    if v == 0:
                        continue
                    db[f] += v
                    for c in range(c_in):
                        for i in range(kh):
                            for j in range(kw):
                                dk[f, c, i, j] += v * x[c, n, y + i, u + j]
                                if need_dx:
                                    dx[c, n, y + i, u + j] += v * w[f, c, i, j]


@numba.njit(cache=True, fastmath=True)
def _conv_pool_grad_kernel(x, w, dp, idx, p, dk, db, dx, need_dx):
    # gradient reaching a conv output through max pooling: only the argmax
    # cell of every window is nonzero, so walk the pooled gradient instead
    f_out, n_b, ho, wo = dp.shape
    c_in, kh, kw = w.shape[1], w.shape[2], w.shape[3]
    acc = np.zeros((f_out, c_in, kh, kw), dtype=x.dtype)
    for n in range(n_b):
        for f in range(f_out):
            a = acc[f]
            wf = w[f]
            for py in range(ho):
                for px in range(wo):
                    v = dp[f, n, py, px]
                    if v == 0:
                        continue
                    k = idx[f * n_b + n, py, px]
                    y = py * p + k // p
                    u = px * p + k - (k // p) * p
                    db[f] += v
                    for c in range(c_in):
                        xc = x[c, n]
                        for i in range(kh):
                            for j in range(kw):
                                a[c, i, j] += v * xc[y + i, u + j]
                    if need_dx:
                        for c in range(c_in):
                            dxc = dx[c, n]
                            for i in range(kh):
                                for j in range(kw):
                                    dxc[y + i, u + j] += v * wf[c, i, j]
        if (n + 1) % 16 == 0:
            dk += acc
            acc[...] = 0
    dk += acc


# output rows at least this wide use the direct kernel, narrower ones im2col + GEMM
_DIRECT_MIN_WIDTH = 32


def conv_cnhw_forward(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray):
    """Convolution on channel-major activations ``[C, N, H, W]``."""
    c, n, h, w = x.shape
    _check_conv((c, h, w), kernels, bias)
    f, _, kh, kw = kernels.shape
    ho, wo = h - kh + 1, w - kw + 1
    x = np.ascontiguousarray(x)
    if wo >= _DIRECT_MIN_WIDTH:
        out = np.empty((f, n, ho, wo), dtype=x.dtype)
        _conv_direct_kernel(x, kernels, bias.astype(x.dtype), out)
    else:
        out = kernels.reshape(f, -1) @ _im2col(x, kh, kw)
        out += bias[:, None]
        out = out.reshape(f, n, ho, wo)
    return out, (x, kernels)


class PooledGrad:
    """Gradient w.r.t. a max-pool output, kept unscattered for the conv below."""

    def __init__(self, grad: np.ndarray, cache):
        self.grad, self.cache = grad, cache

    def dense(self) -> np.ndarray:
        return pool_backward(self.grad, self.cache)


def conv_cnhw_backward(dout, cache, need_dx: bool = True):
    """Gradients of :func:`conv_cnhw_forward`; ``dout`` may be a :class:`PooledGrad`."""
    x, kernels = cache
    dk = np.zeros(kernels.shape, dtype=np.float64)
    db = np.zeros(kernels.shape[0], dtype=np.float64)
    dtype = x.dtype
    dx = np.zeros(x.shape, dtype=dtype) if need_dx else np.zeros((1, 1, 1, 1), dtype=dtype)
    if isinstance(dout, PooledGrad) and dout.cache[2] > 1:
        idx, _, p = dout.cache
        _conv_pool_grad_kernel(x, kernels, np.ascontiguousarray(dout.grad, dtype=dtype), idx, p,
                               dk, db, dx, need_dx)
    else:
        if isinstance(dout, PooledGrad):
            dout = dout.dense()
        _conv_grad_kernel(x, kernels, np.ascontiguousarray(dout, dtype=dtype), dk, db, dx, need_dx)
    return (dx if need_dx else None), dk.astype(dtype), db.astype(dtype)


def conv2d_forward(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray):
    """Valid, stride-1 cross-correlation on ``[C, H, W]`` or ``[N, C, H, W]``.

    ``out[f, y, x] = bias[f] + sum_{c,i,j} x[c, y+i, x+j] * kernels[f, c, i, j]``
    """
    xb, single = _as_batch(x, 3)
    out, cache = conv_cnhw_forward(np.ascontiguousarray(xb.transpose(1, 0, 2, 3)), kernels, bias)
    out = out.transpose(1, 0, 2, 3)
    return (out[0] if single else out), (cache, single)


def conv2d_backward(dout: np.ndarray, cache, need_dx: bool = True):
    inner, single = cache
    d = dout[None] if single else dout
    dx, dk, db = conv_cnhw_backward(np.ascontiguousarray(d.transpose(1, 0, 2, 3)), inner, need_dx)
    if dx is not None:
        dx = dx.transpose(1, 0, 2, 3)
        if single:
            dx = dx[0]
    return dx, dk, db


def conv2d(input: np.ndarray, kernels: np.ndarray, bias: np.ndarray) -> np.ndarray:
    return conv2d_forward(input, kernels, bias)[0]


@numba.njit(cache=True)
def _pool_kernel(x, p, out, idx):
    b, ho, wo = out.shape
    for n in range(b):
        for y in range(ho):
            for xo in range(wo):
                best = x[n, y * p, xo * p]
                k = 0
                for i in range(p):
                    for j in range(p):
                        v = x[n, y * p + i, xo * p + j]
                        if v > best:
                            best = v
                            k = i * p + j
                out[n, y, xo] = best
                idx[n, y, xo] = k


@numba.njit(cache=True)
def _unpool_kernel(dout, idx, p, dx):
    b, ho, wo = dout.shape
    for n in range(b):
        for y in range(ho):
            for xo in range(wo):
                k = idx[n, y, xo]
                dx[n, y * p + k // p, xo * p + k % p] = dout[n, y, xo]


def pool_forward(x: np.ndarray, p: int):
    """Max over non-overlapping ``p x p`` windows of the two trailing axes.

    Remainder rows/columns are dropped. The cache holds, per output cell,
    the row-major offset of the first maximal element inside its window.
    """
    *lead, h, w = x.shape
    if p < 1:
        raise ShapeError(f"pooling size must be >= 1, got {p}")
    if p > h or p > w:
        raise ShapeError(f"pooling size {p} exceeds spatial extent {h}x{w}")
    if p == 1:
        return x, (None, x.shape, 1)
    ho, wo = h // p, w // p
    xb = np.ascontiguousarray(x).reshape(-1, h, w)
    out = np.empty((xb.shape[0], ho, wo), dtype=x.dtype)
    idx = np.empty((xb.shape[0], ho, wo), dtype=np.int32)
    _pool_kernel(xb, p, out, idx)
    return out.reshape(*lead, ho, wo), (idx, x.shape, p)


def pool_backward(dout: np.ndarray, cache) -> np.ndarray:
    idx, xshape, p = cache
    if p == 1:
        return dout
    dx = np.zeros(xshape, dtype=dout.dtype)
    d = np.ascontiguousarray(dout).reshape(idx.shape)
    _unpool_kernel(d, idx, p, dx.reshape(-1, xshape[-2], xshape[-1]))
    return dx


def maxpool2d_forward(x: np.ndarray, p: int):
    _as_batch(x, 3)
    return pool_forward(x, p)


def maxpool2d_backward(dout: np.ndarray, cache) -> np.ndarray:
    return pool_backward(dout, cache)


def maxpool2d(input: np.ndarray, p: int) -> tuple[np.ndarray, np.ndarray | None]:
    """Returns the pooled tensor and the in-window argmax offsets."""
    out, cache = maxpool2d_forward(input, p)
    idx = cache[0]
    return out, (None if idx is None else idx.reshape(out.shape))


def fc_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    xb, single = _as_batch(x, 1)
    if weight.ndim != 2 or weight.shape[1] != xb.shape[1]:
        raise ShapeError(f"input width {xb.shape[1]} does not match weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} does not match weight rows {weight.shape[0]}")
    out = xb @ weight.T + bias
    return (out[0] if single else out), (xb, weight, single)


def fc_backward(dout: np.ndarray, cache, need_dx: bool = True):
    xb, weight, single = cache
    d = dout[None] if single else dout
    dw = d.T @ xb
    db = d.sum(axis=0)
    dx = None
    if need_dx:
        dx = d @ weight
        if single:
            dx = dx[0]
    return dx, dw, db


def fully_connected(input: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    return fc_forward(input, W, b)[0]


def relu_forward(x: np.ndarray):
    mask = x > 0
    return np.maximum(x, 0), mask


def relu_backward(dout: np.ndarray, mask: np.ndarray) -> np.ndarray:
    # subgradient at 0 is 0
    return dout * mask


def relu(input: np.ndarray) -> np.ndarray:
    return relu_forward(input)[0]


def huber_loss(pred: np.ndarray, target: np.ndarray, delta: float = 1.0):
    """Huber loss summed over components and averaged over the batch.

    Per residual ``r``: ``0.5 r^2`` if ``|r| <= delta`` else
    ``delta (|r| - delta/2)``. Returns ``(loss, d loss / d pred)``.
    """
    if delta <= 0:
        raise ValueError(f"huber delta must be > 0, got {delta}")
    if pred.shape != target.shape:
        raise ShapeError(f"pred {pred.shape} and target {target.shape} differ")
    n = pred.shape[0] if pred.ndim > 1 else 1
    r = pred - target
    a = np.abs(r)
    quad = a <= delta
    per = np.where(quad, 0.5 * r * r, delta * (a - 0.5 * delta))
    loss = float(per.sum()) / n
    grad = np.clip(r, -delta, delta) / n
    return loss, grad


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int,
                   dtype=np.float64) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# Graph
# ---------------------------------------------------------------------------


@dataclass
class Node:
    name: str
    op: str
    inputs: tuple[int, ...]
    attrs: dict = field(default_factory=dict)


class Graph:
    """A DAG of layer nodes with a parameter registry.

    Nodes are appended in topological order by the builder methods. Every
    parameter owns a gradient and a momentum buffer of the same shape.
    Parameters listed in ``frozen`` receive zero gradient and are not
    updated by :func:`sgd_step`.
    """

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.nodes: list[Node] = []
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.velocity: dict[str, np.ndarray] = {}
        self.decay: dict[str, bool] = {}
        self.frozen: set[str] = set()
        self.input_ids: list[int] = []
        self.output_id: int | None = None
        self.meta: dict = {}
        self._values: list | None = None
        self._caches: list | None = None

    # -- construction ------------------------------------------------------

    def _add(self, name: str, op: str, inputs: Sequence[int], **attrs) -> int:
        if any(n.name == name for n in self.nodes):
            raise ValueError(f"duplicate node name {name!r}")
        self.nodes.append(Node(name, op, tuple(inputs), attrs))
        return len(self.nodes) - 1

    def add_param(self, name: str, value: np.ndarray, decay: bool) -> None:
        value = np.ascontiguousarray(value, dtype=self.dtype)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        self.velocity[name] = np.zeros_like(value)
        self.decay[name] = decay

    def input(self, name: str, shape: tuple[int, ...]) -> int:
        nid = self._add(name, "input", (), shape=tuple(shape))
        self.input_ids.append(nid)
        return nid

    def conv(self, x: int, name: str, filters: int, kernel: int, rng: np.random.Generator) -> int:
        c, h, w = self.shape_of(x)
        if kernel > h or kernel > w:
            raise ShapeError(f"layer {name}: kernel {kernel} exceeds spatial extent {h}x{w}")
        shape = (filters, c, kernel, kernel)
        self.add_param(f"{name}.W", glorot_uniform(rng, shape, c * kernel * kernel,
                                                   filters * kernel * kernel), decay=True)
        self.add_param(f"{name}.b", np.zeros(filters), decay=False)
        return self._add(name, "conv", (x,), out_shape=(filters, h - kernel + 1, w - kernel + 1))

    def pool(self, x: int, name: str, size: int) -> int:
        c, h, w = self.shape_of(x)
        if size < 1 or h // size < 1 or w // size < 1:
            raise ShapeError(f"layer {name}: pooling {size} collapses spatial extent {h}x{w}")
        return self._add(name, "pool", (x,), size=size, out_shape=(c, h // size, w // size))

    def relu(self, x: int, name: str) -> int:
        return self._add(name, "relu", (x,), out_shape=self.shape_of(x))

    def flatten(self, x: int, name: str) -> int:
        return self._add(name, "flatten", (x,), out_shape=(int(np.prod(self.shape_of(x))),))

    def concat(self, xs: Sequence[int], name: str) -> int:
        widths = []
        for x in xs:
            s = self.shape_of(x)
            if len(s) != 1:
                raise ShapeError(f"layer {name}: concat expects flat inputs, got {s}")
            widths.append(s[0])
        return self._add(name, "concat", xs, widths=tuple(widths), out_shape=(sum(widths),))

    def fc(self, x: int, name: str, width: int, rng: np.random.Generator) -> int:
        s = self.shape_of(x)
        if len(s) != 1:
            raise ShapeError(f"layer {name}: fully connected layer expects a flat input, got {s}")
        n = s[0]
        self.add_param(f"{name}.W", glorot_uniform(rng, (width, n), n, width), decay=True)
        self.add_param(f"{name}.b", np.zeros(width), decay=False)
        return self._add(name, "fc", (x,), out_shape=(width,))

    def set_output(self, x: int) -> None:
        self.output_id = x

    def shape_of(self, nid: int) -> tuple[int, ...]:
        node = self.nodes[nid]
        return node.attrs["shape"] if node.op == "input" else node.attrs["out_shape"]

    def node_id(self, name: str) -> int:
        for i, n in enumerate(self.nodes):
            if n.name == name:
                return i
        raise KeyError(name)

    @property
    def output_width(self) -> int:
        return int(np.prod(self.shape_of(self.output_id)))

    # -- execution ---------------------------------------------------------

    def forward(self, inputs: Sequence[np.ndarray], keep: bool = True) -> np.ndarray:
        """Run the graph on batched inputs (one array per graph input)."""
        if len(inputs) != len(self.input_ids):
            raise ShapeError(f"graph takes {len(self.input_ids)} inputs, got {len(inputs)}")
        values: list = [None] * len(self.nodes)
        caches: list = [None] * len(self.nodes)
        for nid, x in zip(self.input_ids, inputs):
            want = self.shape_of(nid)
            if tuple(x.shape[1:]) != want:
                raise ShapeError(f"input {self.nodes[nid].name}: expected [N, {want}], got {x.shape}")
            x = np.asarray(x, dtype=self.dtype)
            # activations with spatial axes are kept channel-major [C, N, H, W]
            values[nid] = np.ascontiguousarray(x.transpose(1, 0, 2, 3)) if x.ndim == 4 else x
        p = self.params
        for nid, node in enumerate(self.nodes):
            op = node.op
            if op == "input":
                continue
            a = values[node.inputs[0]]
            if op == "conv":
                values[nid], caches[nid] = conv_cnhw_forward(a, p[node.name + ".W"], p[node.name + ".b"])
            elif op == "pool":
                values[nid], caches[nid] = pool_forward(a, node.attrs["size"])
            elif op == "relu":
                values[nid], caches[nid] = relu_forward(a)
            elif op == "flatten":
                if a.ndim == 4:
                    values[nid] = a.transpose(1, 0, 2, 3).reshape(a.shape[1], -1)
                else:
                    values[nid] = a.reshape(a.shape[0], -1)
                caches[nid] = a.shape
            elif op == "concat":
                values[nid] = np.concatenate([values[i] for i in node.inputs], axis=1)
            elif op == "fc":
                values[nid], caches[nid] = fc_forward(a, p[node.name + ".W"], p[node.name + ".b"])
            else:  # pragma: no cover
                raise ValueError(f"unknown op {op}")
            if not keep:
                # release everything no later node reads
                caches[nid] = None
        if keep:
            self._values, self._caches = values, caches
        return values[self.output_id]

    def __call__(self, *inputs: np.ndarray) -> np.ndarray:
        return self.forward(inputs, keep=False)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def backward(self, out_grad: np.ndarray) -> None:
        """Accumulate d loss / d param into ``grads`` given d loss / d output."""
        if self._caches is None:
            raise RuntimeError("backward called before forward")
        caches = self._caches
        grads: list = [None] * len(self.nodes)
        grads[self.output_id] = np.asarray(out_grad, dtype=self.dtype)
        needs = self._needs_input_grad()
        consumers = [0] * len(self.nodes)
        for node in self.nodes:
            for i in node.inputs:
                consumers[i] += 1
        for nid in range(len(self.nodes) - 1, -1, -1):
            node = self.nodes[nid]
            g = grads[nid]
            if g is None or node.op == "input":
                continue
            src = node.inputs[0] if node.inputs else None
            if node.op == "conv":
                dx, dw, db = conv_cnhw_backward(g, caches[nid], need_dx=needs[src])
                self._accum_param(node.name, dw, db)
                self._push(grads, src, dx)
            elif node.op == "fc":
                dx, dw, db = fc_backward(g, caches[nid], need_dx=needs[src])
                self._accum_param(node.name, dw, db)
                self._push(grads, src, dx)
            elif node.op == "pool":
                if self.nodes[src].op == "conv" and consumers[src] == 1:
                    grads[src] = PooledGrad(g, caches[nid])
                else:
                    self._push(grads, src, pool_backward(g, caches[nid]))
            elif node.op == "relu":
                self._push(grads, src, relu_backward(g, caches[nid]))
            elif node.op == "flatten":
                shp = caches[nid]
                if len(shp) == 4:
                    c, n, h, w = shp
                    g = np.ascontiguousarray(g.reshape(n, c, h, w).transpose(1, 0, 2, 3))
                else:
                    g = g.reshape(shp)
                self._push(grads, src, g)
            elif node.op == "concat":
                start = 0
                for i, wdt in zip(node.inputs, node.attrs["widths"]):
                    self._push(grads, i, g[:, start:start + wdt])
                    start += wdt
        self._caches = None
        self._values = None

    def _needs_input_grad(self) -> list[bool]:
        # only nodes with a trainable ancestor need an input gradient
        needs = [False] * len(self.nodes)
        has_param = [False] * len(self.nodes)
        for nid, node in enumerate(self.nodes):
            own = node.op in ("conv", "fc")
            has_param[nid] = own or any(has_param[i] for i in node.inputs)
        for nid in range(len(self.nodes)):
            needs[nid] = has_param[nid]
        return needs

    @staticmethod
    def _push(grads: list, nid: int, g) -> None:
        if g is None:
            return
        grads[nid] = g if grads[nid] is None else grads[nid] + g

    def _accum_param(self, name: str, dw: np.ndarray, db: np.ndarray) -> None:
        for key, val in ((name + ".W", dw), (name + ".b", db)):
            if key in self.frozen:
                continue
            self.grads[key] += val

    # -- parameters --------------------------------------------------------

    def freeze(self, *names: str) -> None:
        for n in names:
            if n not in self.params:
                raise KeyError(n)
            self.frozen.add(n)
            self.grads[n].fill(0.0)

    def astype(self, dtype) -> "Graph":
        self.dtype = np.dtype(dtype)
        for d in (self.params, self.grads, self.velocity):
            for k in d:
                d[k] = d[k].astype(self.dtype)
        return self

    def weight_penalty(self) -> float:
        return 0.5 * sum(float(np.sum(v * v)) for k, v in self.params.items() if self.decay[k])


# ---------------------------------------------------------------------------
# Optimisation
# ---------------------------------------------------------------------------


@dataclass
class OptimConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.001
    batch_size: int = 128
    epochs: int = 100
    huber_delta: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if self.huber_delta <= 0:
            raise ValueError("huber_delta must be > 0")


@numba.njit(cache=True)
def _sgd_kernel(w, g, v, lr, mom, wd):
    for i in range(w.size):
        v[i] = mom * v[i] - lr * (g[i] + wd * w[i])
        w[i] += v[i]


def sgd_step(graph: Graph, cfg: OptimConfig) -> None:
    """Heavy-ball SGD: ``v <- m v - lr (g + wd w)``, ``w <- w + v``.

    Weight decay applies to weights only, never to biases.
    """
    lr, mom, wd = cfg.learning_rate, cfg.momentum, cfg.weight_decay
    for name, w in graph.params.items():
        if name in graph.frozen:
            continue
        _sgd_kernel(w.reshape(-1), graph.grads[name].reshape(-1), graph.velocity[name].reshape(-1),
                    lr, mom, wd if graph.decay[name] else 0.0)


@dataclass
class Dataset:
    """In-memory training set: one batched array per graph input plus targets."""

    inputs: list[np.ndarray]
    targets: np.ndarray

    def __len__(self) -> int:
        return len(self.targets)

    def take(self, idx: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        return [x[idx] for x in self.inputs], self.targets[idx]


def train_epochs(graph: Graph, dataset: Dataset, cfg: OptimConfig,
                 on_epoch: Callable[[int, float], None] | None = None) -> list[float]:
    """Mini-batch training; returns the mean Huber loss of every epoch.

    Shuffling is drawn from ``cfg.seed`` only, so equal seeds give equal
    traces.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(cfg.seed)
    trace = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xs, y = dataset.take(idx)
            pred = graph.forward(xs)
            loss, grad = huber_loss(pred, y.astype(graph.dtype, copy=False), cfg.huber_delta)
            graph.zero_grad()
            graph.backward(grad)
            sgd_step(graph, cfg)
            total += loss * len(idx)
        trace.append(total / n)
        logger.debug("epoch %d loss %.6g", epoch, trace[-1])
        if on_epoch is not None:
            on_epoch(epoch, trace[-1])
    return trace


def predict_batched(graph: Graph, inputs: Sequence[np.ndarray], batch_size: int = 256) -> np.ndarray:
    n = len(inputs[0])
    outs = [graph.forward([x[s:s + batch_size] for x in inputs], keep=False)
            for s in range(0, n, batch_size)]
    if not outs:
        return np.zeros((0, graph.output_width), dtype=graph.dtype)
    return np.concatenate(outs, axis=0)
