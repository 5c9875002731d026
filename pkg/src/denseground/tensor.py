"""Dense tensors with reverse-mode differentiation.

Every op is a pure function of its inputs. When any input requires a
gradient (and recording is enabled), the output keeps a reference to its
parents plus a vector-Jacobian closure, and :func:`backward` replays those
closures in reverse topological order.

Layout is numpy's row-major; binary ops broadcast on trailing dimensions.
"""

import contextlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import EmptyReduction, NonScalarRoot, ShapeMismatch

_recording = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _recording
    previous = _recording
    _recording = False
    try:
        yield
    finally:
        _recording = previous


def is_recording():
    return _recording


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype != np.float32 and arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axes=None):
        return reduce("sum", self, axes)[0]

    def mean(self, axes=None):
        return reduce("mean", self, axes)[0]

    def max(self, axes=None):
        return reduce("max", self, axes)[0]

    def backward(self):
        backward(self)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        return Tensor(x)
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data, parents, vjp, op):
    out = Tensor(data)
    if _recording and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
        out.op = op
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _coerce_pair(a, b):
    # Python scalars adopt the dtype of the tensor operand.
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    elif not isinstance(a, Tensor):
        a, b = Tensor(a), Tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"cannot broadcast {a.shape} with {b.shape}") from None
    return a, b


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = _coerce_pair(a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), vjp, "add")


def sub(a, b):
    a, b = _coerce_pair(a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), vjp, "sub")


def mul(a, b):
    a, b = _coerce_pair(a, b)

    def vjp(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), vjp, "mul")


def div(a, b):
    a, b = _coerce_pair(a, b)
    out = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), vjp, "div")


def _unary(x, value, derivative, op):
    x = as_tensor(x)

    def vjp(g):
        return (g * derivative(),)

    return _result(value, (x,), vjp, op)


def neg(x):
    x = as_tensor(x)
    return _result(-x.data, (x,), lambda g: (-g,), "neg")


def abs(x):
    x = as_tensor(x)
    return _unary(x, np.abs(x.data), lambda: np.sign(x.data), "abs")


def square(x):
    x = as_tensor(x)
    return _unary(x, x.data * x.data, lambda: 2 * x.data, "square")


def relu(x):
    x = as_tensor(x)
    return _unary(x, np.maximum(x.data, 0), lambda: (x.data > 0).astype(x.dtype), "relu")


max_with_zero = relu


def min_with_zero(x):
    x = as_tensor(x)
    return _unary(x, np.minimum(x.data, 0), lambda: (x.data < 0).astype(x.dtype), "min_with_zero")


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)
    return _unary(x, out, lambda: out, "exp")


def log(x):
    x = as_tensor(x)
    return _unary(x, np.log(x.data), lambda: 1 / x.data, "log")


_BINARY = {"add": add, "sub": sub, "mul": mul}
_UNARY = {
    "abs": abs,
    "square": square,
    "relu": relu,
    "min_with_zero": min_with_zero,
    "max_with_zero": max_with_zero,
}


def elementwise(op, a, b=None):
    """Dispatch one of the named elementwise primitives."""
    if op in _BINARY:
        if b is None:
            raise ValueError(f"{op} needs two operands")
        return _BINARY[op](a, b)
    if op in _UNARY:
        return _UNARY[op](a)
    raise ValueError(f"unknown elementwise op {op!r}")


# -------------------------------------------------------------- shape moves


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"cannot reshape {old} to {shape}") from None
    return _result(out, (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes=None):
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),), "transpose")


def _is_basic_index(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, np.integer)) or i is Ellipsis or i is None for i in items)


def getitem(x, index):
    x = as_tensor(x)
    if isinstance(index, Tensor):
        index = index.data
    out = x.data[index]
    basic = _is_basic_index(index)

    def vjp(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(np.array(out, copy=True), (x,), vjp, "getitem")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(out, tensors, vjp, "concat")


def pad(x, widths):
    """Zero-pad; ``widths`` as in :func:`numpy.pad`."""
    x = as_tensor(x)
    out = np.pad(x.data, widths)
    crop = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, x.shape))
    return _result(out, (x,), lambda g: (g[crop],), "pad")


# ------------------------------------------------------------------- matmul


def matmul(a, b):
    """Matrix product; leading dimensions broadcast as batch dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch("matmul operands need at least two dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeMismatch(f"batch dimensions differ: {a.shape} @ {b.shape}") from None

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _result(out, (a, b), vjp, "matmul")


# --------------------------------------------------------------------- conv


def _conv_geometry(n, k, stride, padding):
    if padding == "same":
        if k % 2 == 0:
            raise ShapeMismatch("same padding needs odd kernel sizes")
        return k // 2, -(-n // stride)
    if padding == "valid":
        if n < k:
            raise ShapeMismatch(f"kernel {k} longer than input {n}")
        return 0, (n - k) // stride + 1
    raise ValueError(f"unknown padding {padding!r}")


def _conv2d_forward(x, w, stride, padding):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ph, ho = _conv_geometry(h, kh, stride, padding)
    pw, wo = _conv_geometry(wd, kw, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    out = cols @ w.reshape(o, -1).T
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), cols, xp.shape, (ph, pw, ho, wo)


def _conv2d_backward(g, x_shape, w, cols, xp_shape, geom, stride):
    n, c, h, wd = x_shape
    o, _, kh, kw = w.shape
    ph, pw, ho, wo = geom
    gf = g.transpose(0, 2, 3, 1).reshape(-1, o)
    gw = (gf.T @ cols).reshape(w.shape)
    dcols = (gf @ w.reshape(o, -1)).reshape(n, ho, wo, c, kh, kw)
    dxp = np.zeros(xp_shape, dtype=g.dtype)
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + hs:stride, j:j + ws:stride] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    gx = dxp[:, :, ph:ph + h, pw:pw + wd]
    return gx, gw


def conv(x, kernel, spatial_rank=2, padding="same", stride=1):
    """Cross-correlation of ``x`` with ``kernel`` (no flip, no bias).

    ``x`` is ``(C_in, *spatial)`` or ``(N, C_in, *spatial)``; ``kernel`` is
    ``(C_out, C_in, *k)``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if spatial_rank not in (1, 2):
        raise ValueError("spatial_rank must be 1 or 2")
    if kernel.ndim != spatial_rank + 2:
        raise ShapeMismatch(f"kernel must have rank {spatial_rank + 2}, got {kernel.shape}")
    batched = x.ndim == spatial_rank + 2
    if not batched and x.ndim != spatial_rank + 1:
        raise ShapeMismatch(f"input rank {x.ndim} does not fit spatial rank {spatial_rank}")
    if x.shape[-spatial_rank - 1] != kernel.shape[1]:
        raise ShapeMismatch(f"channel mismatch: input {x.shape}, kernel {kernel.shape}")

    xd = x.data if batched else x.data[None]
    wd = kernel.data
    if spatial_rank == 1:
        xd = xd[:, :, None, :]
        wd = wd[:, :, None, :]
    out, cols, xp_shape, geom = _conv2d_forward(xd, wd, stride, padding)
    x4_shape = xd.shape
    if spatial_rank == 1:
        out = out[:, :, 0, :]
    if not batched:
        out = out[0]

    def vjp(g):
        g4 = g if batched else g[None]
        if spatial_rank == 1:
            g4 = g4[:, :, None, :]
        gx, gw = _conv2d_backward(g4, x4_shape, wd, cols, xp_shape, geom, stride)
        if spatial_rank == 1:
            gx, gw = gx[:, :, 0, :], gw[:, :, 0, :]
        if not batched:
            gx = gx[0]
        return gx, gw

    return _result(out, (x, kernel), vjp, "conv")


# --------------------------------------------------------------- layer norm


def layer_norm_channel(x, gain, bias, eps=1e-5, axis=0):
    """Normalize over the channel ``axis`` independently at each position."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    axis = axis % x.ndim
    c = x.shape[axis]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeMismatch(f"gain/bias must have shape ({c},)")
    bshape = [1] * x.ndim
    bshape[axis] = c
    g_b = gain.data.reshape(bshape)
    mu = x.data.mean(axis=axis, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * g_b + bias.data.reshape(bshape)
    others = tuple(i for i in range(x.ndim) if i != axis)

    def vjp(g):
        dxhat = g * g_b
        gx = inv * (
            dxhat
            - dxhat.mean(axis=axis, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=axis, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=others), g.sum(axis=others)

    return _result(out, (x, gain, bias), vjp, "layer_norm")


# --------------------------------------------------------------- reductions


def _norm_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, (int, np.integer)):
        axes = (axes,)
    norm = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise ValueError(f"axis {a} out of range for rank {ndim}")
        norm.append(a % ndim)
    if len(set(norm)) != len(norm):
        raise ValueError(f"repeated axes in {axes}")
    return tuple(sorted(norm))


def reduce(op, x, axes=None):
    """Reduce over ``axes`` with ``op`` in {sum, mean, max}.

    Returns ``(result, argmax)``; ``argmax`` holds the flat index of the
    winner within the reduced axes (row-major over the reduced axes in
    ascending order) for ``max`` and is None otherwise. The max gradient
    goes to the lowest such index on exact ties.
    """
    x = as_tensor(x)
    axes = _norm_axes(axes, x.ndim)
    if any(x.shape[a] == 0 for a in axes):
        raise EmptyReduction(f"axis of size 0 among {axes} for shape {x.shape}")
    in_shape = x.shape
    keep = tuple(n for i, n in enumerate(in_shape) if i not in axes)
    kd_shape = tuple(1 if i in axes else n for i, n in enumerate(in_shape))

    if op == "sum":
        out = x.data.sum(axis=axes)
        return _result(out, (x,), lambda g: (np.broadcast_to(np.reshape(g, kd_shape), in_shape),), "sum"), None
    if op == "mean":
        count = int(np.prod([in_shape[a] for a in axes]))
        out = x.data.mean(axis=axes)

        def vjp_mean(g):
            return (np.broadcast_to(np.reshape(g, kd_shape) / count, in_shape),)

        return _result(out, (x,), vjp_mean, "mean"), None
    if op != "max":
        raise ValueError(f"unknown reduction {op!r}")

    kept_axes = tuple(i for i in range(x.ndim) if i not in axes)
    perm = kept_axes + axes
    moved = x.data.transpose(perm)
    flat = moved.reshape(keep + (-1,))
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    inverse = tuple(np.argsort(perm))

    def vjp_max(g):
        gflat = np.zeros(flat.shape, dtype=x.dtype)
        np.put_along_axis(gflat, idx[..., None], np.asarray(g, dtype=x.dtype)[..., None], axis=-1)
        return (gflat.reshape(moved.shape).transpose(inverse),)

    return _result(out, (x,), vjp_max, "max"), idx


def logsumexp(x, axis):
    """Stable ``log(sum(exp(x)))`` over a single axis."""
    x = as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (m + np.log(s)).squeeze(axis)
    soft = e / s

    def vjp(g):
        return (np.expand_dims(g, axis) * soft,)

    return _result(out, (x,), vjp, "logsumexp")


# ----------------------------------------------------------------- backward


def _topological(root):
    order, seen = [], set()
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root):
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if root.size != 1:
        raise NonScalarRoot(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = _topological(root)
    for node in order:
        if node._vjp is not None:
            node.grad = None
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._vjp is None or node.grad is None:
            continue
        grads = node._vjp(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            g = np.asarray(g, dtype=parent.dtype)
            parent.grad = g if parent.grad is None else parent.grad + g
        if node._parents:
            node.grad = None


def grad_or_zeros(t):
    return np.zeros_like(t.data) if t.grad is None else t.grad


def grad_check(f, x, h=1e-5, coords=None):
    """Max relative error between the tape gradient and central differences.

    ``f`` maps a Tensor to a scalar Tensor. ``coords`` optionally restricts
    the comparison to a subset of flat indices.
    """
    x = np.array(x, dtype=np.float64)
    leaf = Tensor(x, requires_grad=True)
    y = f(leaf)
    backward(y)
    analytic = grad_or_zeros(leaf).ravel()
    idx = range(x.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        xp = x.copy().ravel()
        xm = x.copy().ravel()
        xp[i] += h
        xm[i] -= h
        with no_grad():
            fp = float(f(Tensor(xp.reshape(x.shape))).data)
            fm = float(f(Tensor(xm.reshape(x.shape))).data)
        cd = (fp - fm) / (2 * h)
        an = float(analytic[i])
        err = np.abs(an - cd) / max(np.abs(an), np.abs(cd), 1e-8)
        worst = max(worst, err)
    return worst
