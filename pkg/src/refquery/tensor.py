"""Dense tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active are recorded in order;
``Tape.backward`` replays their adjoints in reverse. Outside a tape, ops run
as plain numpy computations and nothing is retained.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

_STATE = {"dtype": np.float32, "tape": None}
# op names whose adjoints are deliberately scaled; negative-control hook for selfcheck
_CORRUPTED: dict[str, float] = {}


def get_dtype():
    return _STATE["dtype"]


@contextlib.contextmanager
def using_dtype(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    prev = _STATE["dtype"]
    _STATE["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _STATE["dtype"] = prev


@contextlib.contextmanager
def corrupt_adjoint(op_name: str, factor: float = 1.5):
    """Scale the adjoint of ``op_name`` by ``factor`` (test hook)."""
    _CORRUPTED[op_name] = factor
    try:
        yield
    finally:
        _CORRUPTED.pop(op_name, None)


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype != _STATE["dtype"]:
            arr = arr.astype(_STATE["dtype"])
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


class _Node:
    __slots__ = ("op", "out", "parents", "backward")

    def __init__(self, op, out, parents, backward):
        self.op = op
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of executed differentiable operations.

    Use as a context manager; ops executed inside are recorded. Call
    :meth:`backward` on a scalar result, then :meth:`clear` (or leave the
    ``with`` block) before the next optimization step.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._prev = None

    def __enter__(self):
        self._prev = _STATE["tape"]
        _STATE["tape"] = self
        return self

    def __exit__(self, *exc):
        _STATE["tape"] = self._prev
        self._prev = None
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, op, out, parents, backward):
        self.nodes.append(_Node(op, out, parents, backward))

    def backward(self, loss: Tensor, grad=None):
        if grad is None:
            if loss.size != 1:
                raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
            grad = np.ones_like(loss.data)
        loss.grad = grad
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            grads = node.backward(g)
            factor = _CORRUPTED.get(node.op)
            for p, pg in zip(node.parents, grads):
                if pg is None or not isinstance(p, Tensor) or not p.requires_grad:
                    continue
                if factor is not None:
                    pg = pg * factor
                if pg.shape != p.data.shape:
                    pg = np.broadcast_to(pg, p.data.shape)
                p.grad = pg if p.grad is None else p.grad + pg

    def clear(self):
        self.nodes.clear()


def current_tape() -> Tape | None:
    return _STATE["tape"]


def tensor(data, requires_grad=False, name=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else _STATE["dtype"]
    t = Tensor.__new__(Tensor)
    t.data = np.asarray(x, dtype=dtype)
    t.grad = None
    t.requires_grad = False
    t.name = None
    return t


def _make(op: str, data: np.ndarray, parents: Sequence, backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    tape = _STATE["tape"]
    needs = tape is not None and any(isinstance(p, Tensor) and p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        tape.record(op, out, tuple(parents), backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.reshape((-1,) + g.shape[extra:]).sum(axis=0)
    keep = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    return g


# ----------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make("div", out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * out / bd, bd.shape)))


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return _make("power", ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make("log", np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)) in overflow-free form."""
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    def back(g):
        e = np.exp(-np.abs(x))
        s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return (g * s,)
    return _make("softplus", out.astype(x.dtype), (a,), back)


def relu(a: Tensor) -> Tensor:
    x = a.data
    return _make("relu", np.maximum(x, 0), (a,), lambda g: (g * (x > 0),))


_GELU_K = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh approximation of GELU; smooth everywhere."""
    x = a.data
    x2 = x * x
    th = np.tanh(x * (_GELU_K + _GELU_K * 0.044715 * x2))
    out = 0.5 * x * (1.0 + th)
    def back(g):
        dinner = _GELU_K + (3 * _GELU_K * 0.044715) * x2
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)
    return _make("gelu", out, (a,), back)


# ------------------------------------------------------------------ reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)
    return _make("sum", np.asarray(out), (a,), back)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return tsum(a, axes, keepdims) * (1.0 / max(n, 1))


# -------------------------------------------------------------------- shaping


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def getitem(a: Tensor, idx) -> Tensor:
    shape, dtype = a.shape, a.data.dtype
    def back(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)
    return _make("getitem", np.asarray(a.data[idx]), (a,), back)


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis`` with integer indices (repeats allowed)."""
    indices = np.asarray(indices, dtype=np.intp)
    axis = axis % a.ndim
    shape, dtype = a.shape, a.data.dtype
    def back(g):
        full = np.zeros(shape, dtype=dtype)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (full,)
    return _make("take", np.take(a.data, indices, axis=axis), (a,), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _make("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    axis = axis % (tensors[0].ndim + 1)
    n = len(tensors)
    return _make("stack", np.stack([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


# -------------------------------------------------------------------- algebra


def matmul(a, b) -> Tensor:
    """Matrix product with numpy broadcasting over leading dimensions."""
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    def back(g):
        if bd.ndim == 2:
            # shared weight: fold batch dims into rows
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return _unbroadcast(ga, ad.shape), gb
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)
    return _make("matmul", ad @ bd, (a, b), back)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)
    return _make("softmax", y, (x,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply ``gain`` and ``bias``."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data
    n = xd.shape[-1]
    def back(g):
        gx = g * gd
        dx = inv / n * (n * gx - gx.sum(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).sum(axis=-1, keepdims=True))
        ggain = (g * xhat).reshape(-1, n).sum(axis=0)
        gbias = g.reshape(-1, n).sum(axis=0)
        return dx, ggain, gbias
    return _make("layer_norm", out, (x, gain, bias), back)


def bilinear_sample(values: Tensor, shapes: Sequence[tuple[int, int]], locations: Tensor,
                    level_of_point: np.ndarray) -> Tensor:
    """Sample flattened multi-level feature maps at fractional positions.

    ``values``: (B, S, D), the concatenation over levels of row-major H_l*W_l maps.
    ``locations``: (B, Q, P, 2) normalized (x, y) in [0, 1] for each sample point.
    ``level_of_point``: (P,) level index of each of the P sample points.
    Returns (B, Q, P, D). Positions are clamped to the map border, so a
    constant map samples to that constant everywhere.
    """
    from scipy import sparse

    vd, loc = values.data, locations.data
    B, S, D = vd.shape
    _, Q, P, _ = loc.shape
    hs = np.array([h for h, _ in shapes])[level_of_point]
    ws = np.array([w for _, w in shapes])[level_of_point]
    starts = np.concatenate([[0], np.cumsum([h * w for h, w in shapes])[:-1]])[level_of_point]

    bad = ~np.isfinite(loc).all(axis=-1)
    if bad.any():
        loc = np.where(bad[..., None], 0.0, loc)   # keep indices valid; rows become NaN below
    px = loc[..., 0] * ws - 0.5
    py = loc[..., 1] * hs - 0.5
    cx = np.clip(px, 0, ws - 1)
    cy = np.clip(py, 0, hs - 1)
    inx = (px > 0) & (px < ws - 1)
    iny = (py > 0) & (py < hs - 1)
    x0 = np.minimum(np.floor(cx).astype(np.intp), ws - 2 + (ws == 1))
    y0 = np.minimum(np.floor(cy).astype(np.intp), hs - 2 + (hs == 1))
    x0 = np.maximum(x0, 0)
    y0 = np.maximum(y0, 0)
    x1 = np.minimum(x0 + 1, ws - 1)
    y1 = np.minimum(y0 + 1, hs - 1)
    fx = (cx - x0).astype(vd.dtype)
    fy = (cy - y0).astype(vd.dtype)

    base = (np.arange(B) * S)[:, None, None] + starts
    idx = np.stack([base + y0 * ws + x0, base + y0 * ws + x1,
                    base + y1 * ws + x0, base + y1 * ws + x1], axis=-1).reshape(-1, 4)
    fx = (cx - x0).astype(vd.dtype).reshape(-1, 1)
    fy = (cy - y0).astype(vd.dtype).reshape(-1, 1)
    gx_, gy_ = 1 - fx, 1 - fy
    R = B * Q * P
    indptr = np.arange(0, 4 * R + 1, 4)
    cols = idx.ravel()

    def csr(weights):
        # four entries per row; duplicate columns (clamped corners) are summed
        return sparse.csr_matrix((weights.ravel(), cols, indptr), shape=(R, B * S))

    mat = csr(np.concatenate([gx_ * gy_, fx * gy_, gx_ * fy, fx * fy], axis=1))
    flat = vd.reshape(B * S, D)
    out = np.asarray(mat @ flat).reshape(B, Q, P, D).astype(vd.dtype)
    if bad.any():
        out[bad] = np.nan

    def back(g):
        gflat = g.reshape(R, D)
        gv = np.asarray(mat.T @ gflat).reshape(B, S, D).astype(vd.dtype)
        ddx = csr(np.concatenate([-gy_, gy_, -fy, fy], axis=1)) @ flat
        ddy = csr(np.concatenate([-gx_, -fx, gx_, fx], axis=1)) @ flat
        gx = (gflat * ddx).sum(axis=1).reshape(B, Q, P) * ws * inx
        gy = (gflat * ddy).sum(axis=1).reshape(B, Q, P) * hs * iny
        return gv, np.stack([gx, gy], axis=-1).astype(loc.dtype)

    return _make("bilinear_sample", out, (values, locations), back)


def detach(a: Tensor) -> Tensor:
    return _as_tensor(a.data.copy())


def parameters_grad_zero(params: Iterable[Tensor]):
    for p in params:
        p.grad = None
