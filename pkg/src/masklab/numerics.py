"""Dense float64 tensors with reverse-mode autodiff, losses, Adam, and weights I/O.

The graph is define-by-run: every op records a backward closure on its output
node, and ``backward`` on a scalar loss walks the graph in reverse topological
order. Everything is 64-bit; at desk scale this keeps finite-difference
gradient checks tight. Inference wraps forwards in ``no_grad()`` so no graph
is retained.
"""

from __future__ import annotations

import hashlib
import math
import struct
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

LAYER_NORM_EPS = 1e-6


class ShapeError(ValueError):
    """Raised when op inputs have incompatible shapes."""


_grad_enabled = [True]


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    _grad_enabled.append(False)
    try:
        yield
    finally:
        _grad_enabled.pop()


class Tensor:
    """A float64 array plus the graph edge that produced it."""

    __slots__ = ("data", "parents", "_backward", "grad")

    def __init__(
        self,
        data,
        parents: tuple["Tensor", ...] = (),
        backward: Callable[[np.ndarray], None] | None = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents = parents
        self._backward = backward
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape})"


class Parameter(Tensor):
    """A named leaf tensor updated by the optimizer."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(data)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name}, shape={self.data.shape})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    if _grad_enabled[-1]:
        return Tensor(data, parents, backward)
    return Tensor(data)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g over axes that were broadcast up from ``shape``."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Forward ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: inputs must be >=2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} vs {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        _accum(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        _accum(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _node(out, (a, b), bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _node(out, (a, b), bw)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"multiply: shapes {a.shape} and {b.shape} do not broadcast") from None

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _node(out, (a, b), bw)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("embedding_lookup: ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding_lookup: id out of range for table with {table.shape[0]} rows"
        )
    out = table.data[ids]

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        _accum(table, gt)

    return _node(out, (table,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis; eps is added to the variance, so constant rows
    map to zero before the affine part."""
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(
            f"layer_norm: gain/bias {gain.shape}/{bias.shape} must match last dim of {x.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = xhat * gain.data + bias.data

    def bw(g):
        d = x.shape[-1]
        gxhat = g * gain.data
        # dx = inv_std * (gxhat - mean(gxhat) - xhat * mean(gxhat * xhat))
        gx = inv_std * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True) / d
        )
        _accum(x, gx)
        axes = tuple(range(g.ndim - 1))
        _accum(gain, (g * xhat).sum(axis=axes))
        _accum(bias, g.sum(axis=axes))

    return _node(out, (x, gain, bias), bw)


def softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        _accum(x, s * (g - (g * s).sum(axis=-1, keepdims=True)))

    return _node(s, (x,), bw)


def gelu(x: Tensor) -> Tensor:
    """Exact erf form: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * cdf

    def bw(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        _accum(x, g * (cdf + x.data * pdf))

    return _node(out, (x,), bw)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return add(matmul(x, w), b)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat: shapes {[t.shape for t in tensors]} do not align off axis {axis}"
        ) from None
    sizes = [t.shape[axis] for t in tensors]

    def bw(g):
        offset = 0
        for t, size in zip(tensors, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offset, offset + size)
            _accum(t, g[tuple(idx)])
            offset += size

    return _node(out, tuple(tensors), bw)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = x.data[idx]

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        _accum(x, gx)

    return _node(out, (x,), bw)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = x.data.reshape(shape)

    def bw(g):
        _accum(x, g.reshape(x.shape))

    return _node(out, (x,), bw)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = np.argsort(axes)
    out = x.data.transpose(axes)

    def bw(g):
        _accum(x, g.transpose(inv))

    return _node(out, (x,), bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or rate is 0."""
    if not training or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return multiply(x, Tensor(mask))


_OPS: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "multiply": multiply,
    "embedding_lookup": embedding_lookup,
    "layer_norm": layer_norm,
    "softmax": softmax,
    "gelu": gelu,
    "linear": linear,
    "concat": concat,
    "slice": slice_axis,
    "reshape": reshape,
    "transpose": transpose,
}


def forward_op(op_kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch to a registered op by name."""
    if op_kind not in _OPS:
        raise ValueError(f"unknown op kind {op_kind!r}; known: {sorted(_OPS)}")
    return _OPS[op_kind](*inputs, **kwargs)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def loss_cross_entropy(logits: Tensor, targets: np.ndarray, weights: np.ndarray) -> Tensor:
    """Weighted mean negative log-softmax probability of the targets.

    logits (..., K); targets and weights share the leading shape. Positions
    with weight 0 contribute nothing and their targets are not validated
    beyond range checks on the weighted ones.
    """
    targets = np.asarray(targets)
    weights = np.asarray(weights, dtype=np.float64)
    k = logits.shape[-1]
    if targets.shape != logits.shape[:-1] or weights.shape != targets.shape:
        raise ShapeError(
            f"cross_entropy: logits {logits.shape}, targets {targets.shape}, "
            f"weights {weights.shape} are inconsistent"
        )
    total = weights.sum()
    if total <= 0.0:
        raise ValueError("cross_entropy: no supervised positions (all weights zero)")
    active = targets[weights > 0]
    if active.size and (active.min() < 0 or active.max() >= k):
        raise ValueError(f"cross_entropy: weighted target outside [0, {k})")

    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    safe_targets = np.where(weights > 0, targets, 0)
    picked = np.take_along_axis(logp, safe_targets[..., None], axis=-1)[..., 0]
    loss = -(weights * picked).sum() / total

    def bw(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe_targets[..., None], 1.0, axis=-1)
        _accum(logits, g * (weights[..., None] / total) * (p - onehot))

    return _node(np.float64(loss), (logits,), bw)


def loss_bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy in the stable log-sum-exp form."""
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != logits.shape:
        raise ShapeError(f"bce: logits {logits.shape} vs targets {targets.shape}")
    x = logits.data
    per = np.maximum(x, 0.0) - x * targets + np.log1p(np.exp(-np.abs(x)))
    n = max(x.size, 1)
    loss = per.sum() / n

    def bw(g):
        sig = 1.0 / (1.0 + np.exp(-x))
        _accum(logits, g * (sig - targets) / n)

    return _node(np.float64(loss), (logits,), bw)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate .grad on every tensor reachable from ``loss``."""
    if loss.ndim != 0:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones((), dtype=np.float64)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimizerConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.96
    epsilon: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 < self.beta1 < 1.0 or not 0.0 < self.beta2 < 1.0:
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")


class Adam:
    """Adam with bias correction and decoupled weight decay."""

    def __init__(self, params: Sequence[Parameter], config: OptimizerConfig):
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")
        self.params = list(params)
        self.config = config
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in params]
        self._v = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        """One Adam update over all parameters; gradients are cleared after."""
        cfg = self.config
        self.t += 1
        bc1 = 1.0 - cfg.beta1**self.t
        bc2 = 1.0 - cfg.beta2**self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {p.name!r}")
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + cfg.epsilon)
            if cfg.weight_decay:
                update = update + cfg.weight_decay * p.data
            p.data -= cfg.learning_rate * update
            p.grad = None


def clear_gradients(params: Sequence[Parameter]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def truncated_normal(
    rng: np.random.Generator, shape: Sequence[int], std: float = 0.02, bound: float = 2.0
) -> np.ndarray:
    """Normal(0, std) with redraws outside +-bound standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


# ---------------------------------------------------------------------------
# Weights file format
# ---------------------------------------------------------------------------

WEIGHTS_MAGIC = b"TCLW"
WEIGHTS_VERSION = 1


def save_weights(path, params: Sequence[Parameter]) -> None:
    """Binary little-endian weights file; bit-exact round-trip."""
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        f.write(struct.pack("<II", WEIGHTS_VERSION, len(params)))
        for p in params:
            name = p.name.encode("utf-8")
            f.write(struct.pack("<I", len(name)))
            f.write(name)
            f.write(struct.pack("<I", p.data.ndim))
            f.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
            f.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_weights(path) -> dict[str, np.ndarray]:
    """Read a weights file back into an ordered name -> array mapping."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != WEIGHTS_MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:4]!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != WEIGHTS_VERSION:
        raise ValueError(f"{path}: unsupported weights version {version}")
    offset = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        dims = struct.unpack_from(f"<{rank}I", blob, offset)
        offset += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).reshape(dims)
        offset += 8 * n
        out[name] = arr.astype(np.float64)
    if offset != len(blob):
        raise ValueError(f"{path}: trailing bytes after last parameter")
    return out


def checksum_parameters(params: Sequence[Parameter]) -> str:
    """SHA-256 over names and raw bytes; used to assert weights were untouched."""
    h = hashlib.sha256()
    for p in params:
        h.update(p.name.encode("utf-8"))
        h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return h.hexdigest()
