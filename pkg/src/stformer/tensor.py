"""Dense tensors with reverse-mode automatic differentiation.

Values are row-major numpy arrays (float32 by default, float64 for
gradient checking). Every op records its inputs and a backward closure on
the result node; ``backward`` on a scalar walks the recorded graph once in
reverse topological order and accumulates gradients into every leaf that
has ``requires_grad`` set. Inside a ``no_grad()`` block the closures are
not recorded, which makes repeated value-only evaluation (finite
differences) cheap.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_inputs", "_bwd", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._inputs = ()
        self._bwd = None
        self._op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op})"

    def grad_or_zeros(self) -> np.ndarray:
        """Gradient after backward; zeros for leaves no path reached."""
        if self.grad is None:
            return np.zeros_like(self.data)
        return self.grad

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into .grad of every reachable node.

        ``self`` must hold a single scalar.
        """
        if self.data.size != 1:
            raise ShapeError(
                f"backward requires a scalar, got shape {self.data.shape}"
            )
        order = topo_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._bwd is not None:
                node._bwd(node.grad)


def topo_order(root: Tensor) -> list[Tensor]:
    """Inputs-before-outputs ordering of the graph below ``root``.

    Iterative DFS; each node appears exactly once.
    """
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for inp in node._inputs:
            if id(inp) not in seen:
                stack.append((inp, False))
    return order


def _result(data: np.ndarray, inputs: tuple, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._bwd = None
    out._op = op
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._inputs = inputs
    else:
        out.requires_grad = False
        out._inputs = ()
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    out = _result(a.data + b.data, (a, b), "add")
    if out.requires_grad:
        def bwd(g):
            _accum(a, _unbroadcast(g, a.data.shape))
            _accum(b, _unbroadcast(g, b.data.shape))
        out._bwd = bwd
    return out


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    out = _result(a.data - b.data, (a, b), "sub")
    if out.requires_grad:
        def bwd(g):
            _accum(a, _unbroadcast(g, a.data.shape))
            _accum(b, -_unbroadcast(g, b.data.shape))
        out._bwd = bwd
    return out


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    out = _result(a.data * b.data, (a, b), "mul")
    if out.requires_grad:
        def bwd(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(g * a.data, b.data.shape))
        out._bwd = bwd
    return out


def scale(a: Tensor, s: float) -> Tensor:
    out = _result(a.data * s, (a,), "scale")
    if out.requires_grad:
        out._bwd = lambda g: _accum(a, g * s)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with broadcasting over leading axes."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(
            f"matmul needs rank >= 2 operands, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul inner extents disagree: {a.data.shape} x {b.data.shape}"
        )
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(
            f"matmul batch extents disagree: {a.data.shape} x {b.data.shape}"
        ) from exc
    out = _result(data, (a, b), "matmul")
    if out.requires_grad:
        def bwd(g):
            if a.requires_grad:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
                _accum(a, _unbroadcast(ga, a.data.shape))
            if b.requires_grad:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                _accum(b, _unbroadcast(gb, b.data.shape))
        out._bwd = bwd
    return out


def transpose(a: Tensor, axes: tuple) -> Tensor:
    out = _result(np.transpose(a.data, axes), (a,), "transpose")
    if out.requires_grad:
        inverse = tuple(np.argsort(axes))
        out._bwd = lambda g: _accum(a, np.transpose(g, inverse))
    return out


def reshape(a: Tensor, shape: tuple) -> Tensor:
    out = _result(a.data.reshape(shape), (a,), "reshape")
    if out.requires_grad:
        out._bwd = lambda g: _accum(a, g.reshape(a.data.shape))
    return out


def broadcast_to(a: Tensor, shape: tuple) -> Tensor:
    out = _result(np.broadcast_to(a.data, shape).copy(), (a,), "broadcast")
    if out.requires_grad:
        out._bwd = lambda g: _accum(a, _unbroadcast(g, a.data.shape))
    return out


def concat(tensors: list[Tensor], axis: int) -> Tensor:
    data = np.concatenate([t.data for t in tensors], axis=axis)
    out = _result(data, tuple(tensors), "concat")
    if out.requires_grad:
        sizes = [t.data.shape[axis] for t in tensors]
        def bwd(g):
            offset = 0
            for t, n in zip(tensors, sizes):
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(offset, offset + n)
                _accum(t, g[tuple(idx)])
                offset += n
        out._bwd = bwd
    return out


def split(a: Tensor, sizes: list[int], axis: int) -> list[Tensor]:
    """Partition along ``axis``; sizes must sum to the extent."""
    extent = a.data.shape[axis]
    if sum(sizes) != extent:
        raise ShapeError(
            f"split sizes {sizes} do not sum to extent {extent} of {a.data.shape}"
        )
    outs = []
    offset = 0
    for n in sizes:
        idx = [slice(None)] * a.data.ndim
        idx[axis] = slice(offset, offset + n)
        piece = _result(np.ascontiguousarray(a.data[tuple(idx)]), (a,), "split")
        if piece.requires_grad:
            def bwd(g, _lo=offset, _n=n):
                full = np.zeros_like(a.data)
                fidx = [slice(None)] * full.ndim
                fidx[axis] = slice(_lo, _lo + _n)
                full[tuple(fidx)] = g
                _accum(a, full)
            piece._bwd = bwd
        outs.append(piece)
        offset += n
    return outs


def softmax_lastdim(a: Tensor) -> Tensor:
    if a.data.size == 0 or a.data.shape[-1] < 1:
        raise ShapeError(f"softmax on empty tensor of shape {a.data.shape}")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = _result(y, (a,), "softmax")
    if out.requires_grad:
        def bwd(g):
            dot = (g * y).sum(axis=-1, keepdims=True)
            _accum(a, y * (g - dot))
        out._bwd = bwd
    return out


def layer_norm_lastdim(x: Tensor, gamma: Tensor, beta: Tensor,
                       eps: float = 1e-5) -> Tensor:
    """Normalise each last-dim slice to zero mean / unit variance, then
    apply the per-channel affine. Population (1/C) moments."""
    c = x.data.shape[-1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(
            f"layer_norm affine shapes {gamma.data.shape}/{beta.data.shape} "
            f"do not match channels {c}"
        )
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = _result(xhat * gamma.data + beta.data, (x, gamma, beta), "layer_norm")
    if out.requires_grad:
        def bwd(g):
            if gamma.requires_grad:
                _accum(gamma, (g * xhat).reshape(-1, c).sum(axis=0))
            if beta.requires_grad:
                _accum(beta, g.reshape(-1, c).sum(axis=0))
            if x.requires_grad:
                gx = g * gamma.data
                m1 = gx.mean(axis=-1, keepdims=True)
                m2 = (gx * xhat).mean(axis=-1, keepdims=True)
                _accum(x, (gx - m1 - xhat * m2) * inv_std)
        out._bwd = bwd
    return out


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian-CDF form x * Phi(x)."""
    x = a.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = _result(x * phi, (a,), "gelu")
    if out.requires_grad:
        def bwd(g):
            pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
            _accum(a, g * (phi + x * pdf))
        out._bwd = bwd
    return out


def sum_all(a: Tensor) -> Tensor:
    out = _result(a.data.sum(keepdims=False).reshape(()), (a,), "sum")
    if out.requires_grad:
        out._bwd = lambda g: _accum(a, np.full_like(a.data, g))
    return out


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = _result(a.data.mean().reshape(()), (a,), "mean")
    if out.requires_grad:
        out._bwd = lambda g: _accum(a, np.full_like(a.data, g / n))
    return out


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None,
            training: bool) -> Tensor:
    """Inverted dropout: survivors scaled by 1/(1-rate); identity in eval."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return a
    if rng is None:
        raise ValueError("training-mode dropout needs an rng stream")
    keep = (rng.random(a.data.shape) >= rate).astype(a.data.dtype)
    keep /= (1.0 - rate)
    return mul(a, Tensor(keep))
