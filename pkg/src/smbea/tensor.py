"""Dense float64 tensors with tape-based reverse-mode differentiation.

Image-like tensors use ``(N, C, H, W)`` layout inside the graph. Public
helpers that take a single image accept ``(C, H, W)`` and promote it.
"""

from __future__ import annotations

import logging
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

DTYPE = np.float64


class GraphError(RuntimeError):
    """Raised when the recorded graph cannot be differentiated."""


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value, dtype=DTYPE)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A node of the compute graph.

    ``data`` is never mutated by an op after the tensor is produced. The
    backward closure maps the output adjoint to one adjoint per parent.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple["Tensor", ...] = (), _backward: Callable | None = None):
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self.name = name

    # -- metadata ---------------------------------------------------------
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

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph ------------------------------------------------------------
    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate gradients into ``.grad`` of every leaf requiring them."""
        backward(self, grad=grad, accumulate=True)

    # -- operators --------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=requires_grad)


def lift(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, parents: Sequence[Tensor], fn: Callable) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=fn)


# -- reverse pass --------------------------------------------------------------

def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, inputs: Iterable[Tensor] | None = None,
             grad: np.ndarray | None = None, accumulate: bool = False) -> list[np.ndarray]:
    """Reverse-mode sweep from ``loss``.

    Returns one gradient array per entry of ``inputs`` (zeros for inputs the
    loss does not depend on). With ``accumulate`` the leaf ``.grad`` fields
    are updated as well.
    """
    if not isinstance(loss, Tensor):
        raise GraphError("backward() needs a Tensor produced by a forward pass")
    if grad is None:
        if loss.size != 1:
            raise GraphError(f"loss must be scalar, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    inputs = list(inputs) if inputs is not None else []
    if not loss.requires_grad:
        if not inputs:
            raise GraphError("backward() called on a tensor with no recorded graph")
        return [np.zeros_like(t.data) for t in inputs]

    adjoints: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=DTYPE)}
    for node in reversed(_topological(loss)):
        g = adjoints.get(id(node))
        if g is None or node._backward is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in adjoints:
                adjoints[key] = adjoints[key] + pg
            else:
                adjoints[key] = pg

    if accumulate:
        for node in _topological(loss):
            if node.is_leaf and id(node) in adjoints:
                node.grad = adjoints[id(node)] if node.grad is None else node.grad + adjoints[id(node)]
    out = []
    for t in inputs:
        g = adjoints.get(id(t))
        out.append(np.zeros_like(t.data) if g is None else np.broadcast_to(g, t.shape).copy())
    return out


def grad(fn: Callable[..., Tensor], *args: np.ndarray) -> list[np.ndarray]:
    """Gradient of scalar ``fn`` with respect to every positional array."""
    leaves = [Tensor(np.array(a, dtype=DTYPE), requires_grad=True) for a in args]
    return backward(fn(*leaves), leaves)


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference estimate of the gradient of scalar ``f`` at ``x``."""
    if h <= 0:
        raise ValueError("step size must be positive")
    x = np.array(x, dtype=DTYPE)
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return out


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = lift(a), lift(b)
    out = a.data + b.data

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _make(out, (a, b), fn)


def sub(a, b) -> Tensor:
    a, b = lift(a), lift(b)
    out = a.data - b.data

    def fn(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)
    return _make(out, (a, b), fn)


def mul(a, b) -> Tensor:
    a, b = lift(a), lift(b)
    out = a.data * b.data

    def fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return _make(out, (a, b), fn)


def div(a, b) -> Tensor:
    a, b = lift(a), lift(b)
    out = a.data / b.data

    def fn(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)
    return _make(out, (a, b), fn)


def scale(a: Tensor, c: float) -> Tensor:
    out = a.data * c
    return _make(out, (a,), lambda g: (g * c,))


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent
    return _make(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,))


def tabs(a: Tensor) -> Tensor:
    out = np.abs(a.data)
    return _make(out, (a,), lambda g: (g * np.sign(a.data),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = np.where(mask, a.data, 0.0)
    return _make(out, (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign to avoid exp overflow
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def clip01(a: Tensor) -> Tensor:
    """Clip to [0, 1] with a pass-through gradient inside the box."""
    inside = (a.data >= 0.0) & (a.data <= 1.0)
    out = np.clip(a.data, 0.0, 1.0)
    return _make(out, (a,), lambda g: (g * inside,))


# -- reductions and shape --------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    axes = _norm_axes(axis, a.ndim)

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)
    return _make(np.asarray(out), (a,), fn)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def index_channels(a: Tensor, channels: Sequence[int]) -> Tensor:
    """Select channels along axis 1."""
    idx = np.asarray(channels, dtype=int)
    out = a.data[:, idx]

    def fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (slice(None), idx), g)
        return (full,)
    return _make(out, (a,), fn)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [lift(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))
    return _make(out, tuple(tensors), fn)


# -- image ops -------------------------------------------------------------------

def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ValueError(f"expected (C,H,W) or (N,C,H,W) tensor, got shape {x.shape}")
    return x, False


def conv_output_size(size: int, kernel: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    """Columns laid out as ``(n, c*kh*kw, ho*wo)`` so convolutions become batched matmuls."""
    n, c = xp.shape[:2]
    span_h = dilation * (kh - 1) + 1
    span_w = dilation * (kw - 1) + 1
    win = sliding_window_view(xp, (span_h, span_w), axis=(2, 3))
    win = win[:, :, ::stride, ::stride, ::dilation, ::dilation][:, :, :ho, :wo]
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * kh * kw, ho * wo)


def _col2im(g_cols: np.ndarray, shape, kh: int, kw: int, stride: int, dilation: int,
            ho: int, wo: int) -> np.ndarray:
    n, c = shape[:2]
    g_cols = g_cols.reshape(n, c, kh, kw, ho, wo)
    out = np.zeros(shape, dtype=g_cols.dtype)
    for i in range(kh):
        hi = i * dilation
        for j in range(kw):
            wj = j * dilation
            out[:, :, hi:hi + stride * (ho - 1) + 1:stride, wj:wj + stride * (wo - 1) + 1:stride] += g_cols[:, :, i, j]
    return out


def _pad_or_crop(a: np.ndarray, before: int, after: int, axis: int) -> np.ndarray:
    if before < 0:
        a = np.take(a, range(-before, a.shape[axis]), axis=axis)
        before = 0
    if after < 0:
        a = np.take(a, range(0, a.shape[axis] + after), axis=axis)
        after = 0
    width = [(0, 0)] * a.ndim
    width[axis] = (before, after)
    return np.pad(a, width)


def _conv_input_grad(g: np.ndarray, kernel: np.ndarray, h: int, w: int, stride: int,
                     padding: int, dilation: int) -> np.ndarray:
    """Gradient w.r.t. the conv input: a stride-1 correlation of the zero-interleaved
    output gradient with the spatially flipped, channel-transposed kernel."""
    n, o, ho, wo = g.shape
    _, c, kh, kw = kernel.shape
    if stride > 1:
        up = np.zeros((n, o, (ho - 1) * stride + 1, (wo - 1) * stride + 1), dtype=g.dtype)
        up[:, :, ::stride, ::stride] = g
        g = up
    gp = g
    for axis, size, k in ((2, h, kh), (3, w, kw)):
        before = dilation * (k - 1) - padding
        after = size + dilation * (k - 1) - before - gp.shape[axis]
        gp = _pad_or_crop(gp, before, after, axis)
    flipped = kernel[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
    cols = _im2col(gp, kh, kw, 1, dilation, h, w)
    return np.matmul(flipped, cols).reshape(n, c, h, w)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, dilation: int = 1) -> Tensor:
    """2D cross-correlation; ``kernel`` is ``(out, in, k, k)``."""
    x = lift(x)
    kernel = lift(kernel)
    xb, squeeze = _batched(x)
    if kernel.ndim != 4:
        raise ValueError(f"kernel must be 4-D (out, in, kh, kw), got shape {kernel.shape}")
    n, c, h, w = xb.shape
    o, kc, kh, kw = kernel.shape
    if kc != c:
        raise ValueError(f"input channels mismatch: input has {c}, kernel expects {kc}")
    if dilation < 1 or stride < 1 or padding < 0:
        raise ValueError("stride and dilation must be >= 1 and padding >= 0")
    ho = conv_output_size(h, kh, stride, padding, dilation)
    wo = conv_output_size(w, kw, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ValueError(f"height/width too small for kernel: output would be {ho}x{wo}")
    if bias is not None:
        bias = lift(bias)
        if bias.shape != (o,):
            raise ValueError(f"bias must have shape ({o},), got {bias.shape}")

    xp = np.pad(xb.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, kh, kw, stride, dilation, ho, wo)
    kmat = kernel.data.reshape(o, -1)
    out = np.matmul(kmat, cols).reshape(n, o, ho, wo)
    if bias is not None:
        out += bias.data[None, :, None, None]
    # im2col columns are only needed for the kernel gradient
    if not kernel.requires_grad:
        cols = None

    def fn(g):
        g = np.ascontiguousarray(g).reshape(n, o, ho * wo)
        g_kernel = None
        if cols is not None:
            g_kernel = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
        g_x = None
        if x.requires_grad:
            # scatter the input columns back when they are the smaller of the two layouts,
            # otherwise run the transposed correlation
            if c * ho * wo <= o * h * w:
                g_x = _col2im(np.matmul(kmat.T, g), xp.shape, kh, kw, stride, dilation, ho, wo)
                g_x = g_x[:, :, padding:padding + h, padding:padding + w]
            else:
                g_x = _conv_input_grad(g.reshape(n, o, ho, wo), kernel.data, h, w, stride, padding, dilation)
            if squeeze:
                g_x = g_x[0]
        if bias is None:
            return g_x, g_kernel
        return g_x, g_kernel, g.sum(axis=(0, 2))

    result = out[0] if squeeze else out
    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(result, parents, fn)


def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    mat = np.zeros((n_out, n_in), dtype=DTYPE)
    if n_in == 1 or n_out == 1:
        mat[:, 0] = 1.0
        return mat
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    rows = np.arange(n_out)
    mat[rows, lo] = 1.0 - frac
    mat[rows, lo + 1] += frac
    return mat


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Align-corners bilinear resize of every channel independently."""
    x = lift(x)
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target extents must be positive, got {out_h}x{out_w}")
    if x.ndim < 3 or x.shape[-3] < 1:
        raise ValueError("input needs at least one channel")
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return x
    ry = _resize_matrix(h, out_h)
    rx = _resize_matrix(w, out_w)
    out = np.matmul(np.matmul(ry, x.data), rx.T)
    return _make(out, (x,), lambda g: (np.matmul(np.matmul(ry.T, g), rx),))


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    x = lift(x)
    out = x.data.repeat(factor, axis=-2).repeat(factor, axis=-1)

    def fn(g):
        *lead, hh, ww = g.shape
        g = g.reshape(*lead, hh // factor, factor, ww // factor, factor)
        return (g.sum(axis=(-3, -1)),)
    return _make(out, (x,), fn)


def softmax2d(x: Tensor) -> Tensor:
    """Softmax over the flattened spatial positions of each map."""
    x = lift(x)
    if x.ndim < 2:
        raise ValueError("softmax2d needs a stack of 2D maps")
    shifted = x.data - x.data.max(axis=(-2, -1), keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=(-2, -1), keepdims=True)

    def fn(g):
        dot = (g * out).sum(axis=(-2, -1), keepdims=True)
        return (out * (g - dot),)
    return _make(out, (x,), fn)


def channel_avg_pool(x: Tensor, groups: int) -> Tensor:
    """Average contiguous channel blocks into ``groups`` maps."""
    x = lift(x)
    xb, squeeze = _batched(x)
    n, c, h, w = xb.shape
    if groups < 1 or c % groups:
        raise ValueError(f"channel count {c} is not divisible by groups={groups}")
    size = c // groups
    out = xb.data.reshape(n, groups, size, h, w).mean(axis=2)

    def fn(g):
        g = g.reshape(n, groups, 1, h, w) if not squeeze else g.reshape(1, groups, 1, h, w)
        full = np.broadcast_to(g / size, (n, groups, size, h, w)).reshape(n, c, h, w)
        return (full[0] if squeeze else full,)
    return _make(out[0] if squeeze else out, (x,), fn)


def channel_affine(x: Tensor, gain: Tensor, bias: Tensor, mean: np.ndarray | None = None,
                   var: np.ndarray | None = None, eps: float = 1e-5) -> Tensor:
    """Per-channel ``gain * (x - mean) / sqrt(var + eps) + bias`` with frozen statistics."""
    c = gain.shape[0]
    shape = (1, c, 1, 1) if x.ndim == 4 else (c, 1, 1)
    if mean is None:
        mean = np.zeros(c)
    if var is None:
        var = np.ones(c)
    inv = 1.0 / np.sqrt(np.asarray(var, dtype=DTYPE) + eps)
    centred = x - np.asarray(mean, dtype=DTYPE).reshape(shape)
    return centred * reshape(gain * inv, shape) + reshape(bias, shape)
