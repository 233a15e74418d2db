"""Dense tensors with tape-based reverse-mode differentiation.

Operations record themselves on the active :class:`GradientRecorder` when at
least one input requires a gradient. Without an active recorder every
operation is a pure forward computation, which is what evaluation uses.

All ops accept an optional leading batch axis, so the same code path serves
single images (``C×H×W``) and batches (``N×C×H×W``).
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DTYPE = np.float32
BCE_EPS = 1e-7

_local = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """Row-major numeric array; float32 unless a dtype is given explicitly."""

    __array_priority__ = 100

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=dtype or DTYPE, order="C")
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"expected a scalar, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"

    def __len__(self) -> int:
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)


class Parameter(Tensor):
    """A trainable tensor carrying its gradient and momentum buffer."""

    def __init__(self, value, name: str, dtype=None):
        super().__init__(value, dtype=dtype, requires_grad=True)
        self.data = self.data.copy()  # never alias the caller's array
        self.name = name
        self.grad = np.zeros_like(self.data)
        self.velocity = np.zeros_like(self.data)

    def astype(self, dtype) -> None:
        """Recast value and buffers in place (used by float64 gradient checks)."""
        self.data = self.data.astype(dtype)
        self.grad = self.grad.astype(dtype)
        self.velocity = self.velocity.astype(dtype)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


class GradientRecorder:
    """Ordered tape of executed differentiable operations.

    Use as a context manager; entries are appended in execution order and
    :meth:`backward` replays them in exact reverse.
    """

    def __init__(self):
        self.ops: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "GradientRecorder":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.ops)

    def record(self, out: Tensor, inputs: tuple, backward_fn: Callable) -> None:
        self.ops.append((out, inputs, backward_fn))

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def _stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_recorder() -> Optional[GradientRecorder]:
    stack = _stack()
    return stack[-1] if stack else None


def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Promote plain numbers to constants matching the other operand's dtype."""
    if not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.data.dtype)
    if not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.data.dtype)
    return a, b


def _result(data: np.ndarray, inputs: tuple, backward_fn: Callable) -> Tensor:
    """Wrap ``data``; record the op if a recorder is active and any input needs grad.

    ``backward_fn(g)`` returns one gradient (or ``None``) per input.
    """
    out = Tensor(data, dtype=data.dtype)
    rec = active_recorder()
    if rec is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        rec.record(out, inputs, backward_fn)
    return out


def backward(loss: Tensor, recorder: GradientRecorder) -> None:
    """Propagate d(loss) back through ``recorder``, accumulating into Parameter.grad.

    Gradients add when a tensor feeds several consumers, which is how the
    shared-weight branches combine.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, inputs, fn in reversed(recorder.ops):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for inp, gi in zip(inputs, fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            if isinstance(inp, Parameter):
                inp.grad += gi.reshape(inp.shape)
            else:
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
    # A loss that is itself a parameter never appears as an op output.
    if isinstance(loss, Parameter) and id(loss) in grads:
        loss.grad += grads[id(loss)]
    recorder.ops.clear()


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.grad.fill(0)


def sgd_step(params: Iterable[Parameter], lr: float, momentum: float) -> None:
    """SGD with momentum: ``v = m*v + g; value -= lr*v``; grads are zeroed after."""
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for p in params:
        p.velocity *= momentum
        p.velocity += p.grad
        p.data -= lr * p.velocity
        p.grad.fill(0)


# ---------------------------------------------------------------- elementwise


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data + b.data
    return _result(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data - b.data
    return _result(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data * b.data
    return _result(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # Split by sign so exp never overflows.
    d = x.data
    e = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)
    return _result(s, (x,), lambda g: (g * s * (1 - s),))


def mean(x: Tensor) -> Tensor:
    n = x.size
    out = np.asarray(x.data.mean(), dtype=x.data.dtype)
    return _result(out, (x,), lambda g: (np.full(x.shape, g / n, dtype=x.data.dtype),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)
    return _result(out, (x,), lambda g: (g.reshape(x.shape),))


def flatten(x: Tensor) -> Tensor:
    """Flatten everything but a leading batch axis (``C×H×W`` -> ``CHW``)."""
    shape = (-1,) if x.data.ndim == 3 else (x.shape[0], -1)
    return reshape(x, shape)


# ---------------------------------------------------------------- layers


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """``n×c×h×w`` -> ``(c·kh·kw)×(n·h'·w')`` column matrix."""
    n, c, h, w = x.shape
    ho, wo = h - kh + 1, w - kw + 1
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    xt = x.transpose(1, 0, 2, 3)
    # One strided copy per kernel offset beats a generic 6-D transpose.
    for a in range(kh):
        for b in range(kw):
            cols[:, a, b] = xt[:, :, a : a + ho, b : b + wo]
    return cols.reshape(c * kh * kw, n * ho * wo)


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Valid, stride-1 cross-correlation.

    ``out[o,i,j] = bias[o] + sum_{c,a,b} x[c,i+a,j+b] * kernels[o,c,a,b]``
    """
    single = x.data.ndim == 3
    xd = x.data[None] if single else x.data
    w, bd = kernels.data, bias.data
    if xd.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: input {x.shape} and kernels {kernels.shape} must be 3-D/4-D")
    n, c, h, wd = xd.shape
    o, kc, kh, kw = w.shape
    if kc != c or kh > h or kw > wd or bd.shape != (o,):
        raise ShapeError(
            f"conv2d: input {x.shape} incompatible with kernels {kernels.shape} / bias {bias.shape}"
        )
    ho, wo = h - kh + 1, wd - kw + 1
    cols = _im2col(xd, kh, kw)
    w2 = w.reshape(o, -1)
    # The transposed product hits a much faster BLAS path for few output channels.
    out = (cols.T @ w2.T + bd).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out, dtype=xd.dtype)
    if single:
        out = out[0]

    def back(g):
        g4 = g[None] if single else g
        g2 = np.ascontiguousarray(g4.transpose(1, 0, 2, 3)).reshape(o, -1)
        gw = (g2 @ cols.T).reshape(w.shape) if kernels.requires_grad else None
        gb = g2.sum(axis=1) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            # col2im: scatter-add each kernel offset's slab back onto the input grid.
            gcols = (w2.T @ g2).reshape(c, kh, kw, n, ho, wo)
            gx = np.zeros((c, n, h, wd), dtype=g.dtype)
            for a in range(kh):
                for b in range(kw):
                    gx[:, :, a : a + ho, b : b + wo] += gcols[:, a, b]
            gx = gx.transpose(1, 0, 2, 3)
            gx = gx[0] if single else gx
        return gx, gw, gb

    return _result(out, (x, kernels, bias), back)


def maxpool2(x: Tensor) -> Tensor:
    """Non-overlapping 2×2 max pool; ties send the gradient to the first cell in scan order."""
    *lead, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial size, got {x.shape}")
    win = x.data.reshape(*lead, h // 2, 2, w // 2, 2)
    k = len(lead)
    win = np.moveaxis(win, k + 1, k + 2).reshape(*lead, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def back(g):
        gw = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gw = gw.reshape(*lead, h // 2, w // 2, 2, 2)
        gw = np.moveaxis(gw, k + 2, k + 1).reshape(x.shape)
        return (gw,)

    return _result(np.ascontiguousarray(out), (x,), back)


def linear(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """``out = weights @ x + bias`` for a vector or each row of a batch."""
    m, n = weights.shape if weights.data.ndim == 2 else (None, None)
    if m is None or x.shape[-1] != n or x.data.ndim > 2 or bias.shape != (m,):
        raise ShapeError(
            f"linear: input {x.shape}, weights {weights.shape}, bias {bias.shape} do not agree"
        )
    out = x.data @ weights.data.T + bias.data

    def back(g):
        gx = g @ weights.data if x.requires_grad else None
        gw = np.outer(g, x.data) if g.ndim == 1 else g.T @ x.data
        gb = g if g.ndim == 1 else g.sum(axis=0)
        return gx, gw, gb

    return _result(out, (x, weights, bias), back)


# ---------------------------------------------------------------- distances / losses


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def l2_distance_sq(a: Tensor, b: Tensor) -> Tensor:
    """Squared Euclidean distance over the last axis."""
    _check_same(a, b, "l2_distance_sq")
    diff = a.data - b.data
    out = np.asarray((diff * diff).sum(axis=-1))

    def back(g):
        gd = 2 * diff * np.asarray(g)[..., None]
        return gd, -gd

    return _result(out, (a, b), back)


def l2_distance(a: Tensor, b: Tensor) -> Tensor:
    """Euclidean distance over the last axis; the gradient at zero distance is taken as 0."""
    _check_same(a, b, "l2_distance")
    diff = a.data - b.data
    d = np.sqrt((diff * diff).sum(axis=-1))
    out = np.asarray(d)

    def back(g):
        safe = np.where(d > 0, d, 1)
        scale = np.where(d > 0, np.asarray(g) / safe, 0)[..., None]
        gd = diff * scale
        return gd, -gd

    return _result(out, (a, b), back)


def l2_normalize(x: Tensor) -> Tensor:
    """Scale each vector (last axis) to unit Euclidean length."""
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    norm = np.maximum(norm, np.finfo(x.data.dtype).tiny)
    y = x.data / norm

    def back(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return _result(y, (x,), back)


def bce_loss(prediction: Tensor, target) -> Tensor:
    """Elementwise binary cross-entropy with the prediction clamped to [eps, 1-eps]."""
    t = np.asarray(target, dtype=prediction.data.dtype)
    if not np.all((t == 0) | (t == 1)):
        raise ValueError(f"bce targets must be 0 or 1, got {target!r}")
    if t.shape != prediction.shape:
        t = np.broadcast_to(t, prediction.shape)
    p = prediction.data
    inside = (p > BCE_EPS) & (p < 1 - BCE_EPS)
    pc = np.clip(p, BCE_EPS, 1 - BCE_EPS)
    out = -(t * np.log(pc) + (1 - t) * np.log(1 - pc))

    def back(g):
        return (g * (pc - t) / (pc * (1 - pc)) * inside,)

    return _result(np.asarray(out), (prediction,), back)
