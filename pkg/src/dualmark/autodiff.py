"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Design notes:
- Define-by-run: every op records its parents and a vector-Jacobian-product
  closure on the output tensor. ``backward(loss)`` walks the recorded graph
  in reverse topological order (a fixed, deterministic order, so gradient
  accumulation is reproducible bit for bit).
- Everything is float64. Forward and backward passes raise NonFiniteError as
  soon as a NaN/Inf appears (toggle with ``check_finite``).
- RngStream is a counter-based generator (SplitMix64 stream + Box-Muller),
  so identical (seed, counter) pairs give identical draws on any platform,
  independent of numpy's own generators.

The layer/optimizer surface here (conv2d, Adam, ...) is deliberately small:
just what the trained components of this package need.
"""

from __future__ import annotations

import numpy as np

from .errors import NonFiniteError, RejectedInput, ShapeError, StateError

# ---------------------------------------------------------------------------
# Global toggles
# ---------------------------------------------------------------------------

_GRAD_ENABLED = True
_CHECK_FINITE = True


class no_grad:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def check_finite(enabled: bool) -> None:
    """Enable/disable NaN/Inf checks after each op (on by default)."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------


class Tensor:
    """N-d float64 array with an optional gradient slot.

    ``data`` is always a float64 ndarray. ``grad`` is filled by backward()
    and has the same shape. Tensors produced by ops keep references to their
    parents plus a VJP closure; leaves have neither.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=np.float64)
        if _CHECK_FINITE and not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in tensor {name or '<data>'}")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._vjp = None
        self._op = None

    # -- construction of op outputs ------------------------------------
    @staticmethod
    def _from_op(data, parents, vjp, op):
        if _CHECK_FINITE and not np.all(np.isfinite(data)):
            raise NonFiniteError(f"non-finite values produced by op '{op}'")
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.name = None
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._vjp = vjp
            out._op = op
        else:
            out.requires_grad = False
            out._parents = ()
            out._vjp = None
            out._op = None
        return out

    # -- basic introspection --------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" op={self._op}" if self._op else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{tag})"

    # -- operator sugar ---------------------------------------------------
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return powf(self, p)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    """Wrap scalars/arrays as constant tensors; pass tensors through."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# Graph record + backward
# ---------------------------------------------------------------------------


class Graph:
    """Topologically ordered record of the ops reachable from an output.

    Built lazily from a tensor; mostly useful for inspection and as the
    backward driver. Node records are (op, parent ids, output id).
    """

    def __init__(self, nodes, order):
        self.nodes = nodes
        self.order = order

    @staticmethod
    def from_output(out: Tensor) -> "Graph":
        order = _toposort(out)
        nodes = [
            {"op": t._op, "inputs": [id(p) for p in t._parents], "output": id(t)}
            for t in order
            if t._op is not None
        ]
        return Graph(nodes, order)


def _toposort(root: Tensor):
    """Deterministic post-order DFS over parents (creation order)."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` of every requires_grad tensor reachable from loss.

    Accumulation is additive across uses and across repeated backward calls.
    Raises StateError if loss is not a scalar or records no graph.
    """
    if not isinstance(loss, Tensor):
        raise StateError("backward expects a Tensor")
    if loss.data.size != 1:
        raise StateError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise StateError("backward called on a tensor with no recorded graph "
                         "(forward with requires_grad inputs must run first)")
    order = _toposort(loss)
    flowing = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
        if node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if _CHECK_FINITE and not np.all(np.isfinite(pg)):
                raise NonFiniteError(f"non-finite gradient out of op '{node._op}'")
            acc = flowing.get(id(parent))
            if acc is None:
                flowing[id(parent)] = pg.copy() if pg.base is not None or pg is g else pg
            else:
                acc += pg


# ---------------------------------------------------------------------------
# Elementwise / broadcasting ops
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum grad g down to the given (broadcast-source) shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} do not broadcast")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return Tensor._from_op(a.data + b.data, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return Tensor._from_op(a.data - b.data, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    """Elementwise product; also serves as scalar scale when b is a scalar."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def vjp(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return Tensor._from_op(a.data * b.data, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")

    def vjp(g):
        return (_unbroadcast(g / b.data, a.data.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return Tensor._from_op(a.data / b.data, (a, b), vjp, "div")


def scale(a, s: float) -> Tensor:
    """Scalar scale s*a (sugar over mul with a constant)."""
    return mul(a, float(s))


def powf(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    out = a.data ** p

    def vjp(g):
        return (g * p * a.data ** (p - 1.0),)

    return Tensor._from_op(out, (a,), vjp, "powf")


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)

    def vjp(g):
        return (g * (a.data > 0.0),)

    return Tensor._from_op(out, (a,), vjp, "relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return Tensor._from_op(out, (a,), vjp, "sigmoid")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Stable piecewise evaluation; never exponentiates a large positive value.
    pos = x >= 0
    out = np.empty_like(x)
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return Tensor._from_op(out, (a,), vjp, "tanh")


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clamp with pass-through gradient strictly inside [lo, hi]."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)

    def vjp(g):
        return (g * inside,)

    return Tensor._from_op(out, (a,), vjp, "clamp")


# ---------------------------------------------------------------------------
# Reductions and losses
# ---------------------------------------------------------------------------


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return Tensor._from_op(np.asarray(out, dtype=np.float64), (a,), vjp, "sum")


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.data.shape).copy(),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        return (np.broadcast_to(gg / n, a.data.shape).copy(),)

    return Tensor._from_op(np.asarray(out, dtype=np.float64), (a,), vjp, "mean")


def mse(a, b) -> Tensor:
    """Squared-error reduction: mean over all elements of (a-b)^2."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mse: shapes {a.data.shape} and {b.data.shape} differ")
    diff = a.data - b.data
    n = diff.size
    out = np.asarray((diff * diff).mean(), dtype=np.float64)

    def vjp(g):
        base = (2.0 / n) * diff * g
        return base, -base

    return Tensor._from_op(out, (a, b), vjp, "mse")


def bce_with_logits(logits, targets) -> Tensor:
    """Elementwise binary cross-entropy on logits, numerically stable.

    L = max(x,0) - x*t + log(1 + exp(-|x|));  dL/dx = sigmoid(x) - t.
    Targets are treated as constants.
    """
    logits = as_tensor(logits)
    targets = as_tensor(targets)
    if targets.requires_grad:
        raise RejectedInput("bce_with_logits does not differentiate through targets")
    x, t = logits.data, targets.data
    if x.shape != t.shape:
        raise ShapeError(f"bce_with_logits: shapes {x.shape} and {t.shape} differ")
    out = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))

    def vjp(g):
        return (g * (_sigmoid(x) - t), None)

    return Tensor._from_op(out, (logits, targets), vjp, "bce_with_logits")


# ---------------------------------------------------------------------------
# Shape ops
# ---------------------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    src_shape = a.data.shape

    def vjp(g):
        return (g.reshape(src_shape),)

    return Tensor._from_op(out, (a,), vjp, "reshape")


def concat(tensors, axis=0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._from_op(out, tuple(ts), vjp, "concat")


def crop2d(a, top: int, left: int, height: int, width: int) -> Tensor:
    """Spatial crop of an NCHW tensor; backward zero-embeds."""
    a = as_tensor(a)
    B, C, H, W = a.data.shape
    if top < 0 or left < 0 or top + height > H or left + width > W:
        raise ShapeError(f"crop2d: window {(top, left, height, width)} exceeds {(H, W)}")
    out = a.data[:, :, top:top + height, left:left + width].copy()

    def vjp(g):
        full = np.zeros_like(a.data)
        full[:, :, top:top + height, left:left + width] = g
        return (full,)

    return Tensor._from_op(out, (a,), vjp, "crop2d")


def select_row(a, i: int) -> Tensor:
    """Pick row i of a 2-d tensor; backward scatters into that row."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"select_row: expected 2-d tensor, got {a.data.shape}")
    i = int(i)
    out = a.data[i].copy()

    def vjp(g):
        full = np.zeros_like(a.data)
        full[i] = g
        return (full,)

    return Tensor._from_op(out, (a,), vjp, "select_row")


def flip2d(a, axis: int) -> Tensor:
    """Flip an NCHW tensor along a spatial axis (2=vertical, 3=horizontal)."""
    a = as_tensor(a)
    out = np.flip(a.data, axis=axis).copy()

    def vjp(g):
        return (np.flip(g, axis=axis).copy(),)

    return Tensor._from_op(out, (a,), vjp, "flip2d")


# ---------------------------------------------------------------------------
# Matmul / convolutions / resampling
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor._from_op(out, (a, b), vjp, "matmul")


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    B, C, H, W = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Hp, Wp = x.shape[2], x.shape[3]
    oh = (Hp - kh) // stride + 1
    ow = (Wp - kw) // stride + 1
    s0, s1, s2, s3 = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x, (B, C, oh, ow, kh, kw), (s0, s1, s2 * stride, s3 * stride, s2, s3))
    cols = windows.transpose(0, 1, 4, 5, 2, 3).reshape(B, C * kh * kw, oh * ow)
    return np.ascontiguousarray(cols), oh, ow


def _col2im(dcols: np.ndarray, xshape, kh: int, kw: int, stride: int, pad: int):
    B, C, H, W = xshape
    Hp, Wp = H + 2 * pad, W + 2 * pad
    oh = (Hp - kh) // stride + 1
    ow = (Wp - kw) // stride + 1
    dpad = np.zeros((B, C, Hp, Wp), dtype=np.float64)
    dwin = dcols.reshape(B, C, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            dpad[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += dwin[:, :, i, j]
    if pad:
        return dpad[:, :, pad:Hp - pad, pad:Wp - pad]
    return dpad


def conv2d(x, w, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation) over NCHW with zero padding.

    x: (B, Cin, H, W); w: (Cout, Cin, kh, kw); bias: (Cout,) optional.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input/weight, got {x.data.shape}, {w.data.shape}")
    B, Cin, H, W = x.data.shape
    Cout, Cw, kh, kw = w.data.shape
    if Cin != Cw:
        raise ShapeError(f"conv2d: input channels {Cin} != weight channels {Cw}")
    cols, oh, ow = _im2col(x.data, kh, kw, stride, padding)
    wmat = w.data.reshape(Cout, Cin * kh * kw)
    out = np.matmul(wmat, cols).reshape(B, Cout, oh, ow)
    parents = [x, w]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.data.shape != (Cout,):
            raise ShapeError(f"conv2d: bias shape {bias.data.shape} != ({Cout},)")
        out = out + bias.data[None, :, None, None]
        parents.append(bias)

    def vjp(g):
        gmat = g.reshape(B, Cout, oh * ow)
        dw = np.matmul(gmat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.data.shape)
        dcols = np.matmul(wmat.T[None], gmat)
        dx = _col2im(dcols, x.data.shape, kh, kw, stride, padding)
        if bias is not None:
            return dx, dw, g.sum(axis=(0, 2, 3))
        return dx, dw

    return Tensor._from_op(out, tuple(parents), vjp, "conv2d")


def conv2d_transpose(x, w, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed 2-D convolution (adjoint of conv2d over the same geometry).

    x: (B, Cin, H, W); w: (Cin, Cout, kh, kw); output spatial size is
    (H-1)*stride - 2*padding + kh.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d_transpose: expected 4-d input/weight, got "
                         f"{x.data.shape}, {w.data.shape}")
    B, Cin, H, W = x.data.shape
    Cw, Cout, kh, kw = w.data.shape
    if Cin != Cw:
        raise ShapeError(f"conv2d_transpose: input channels {Cin} != weight channels {Cw}")
    oh = (H - 1) * stride - 2 * padding + kh
    ow = (W - 1) * stride - 2 * padding + kw
    wmat = w.data.reshape(Cin, Cout * kh * kw)
    cols = np.matmul(wmat.T[None], x.data.reshape(B, Cin, H * W))
    out = _col2im(cols, (B, Cout, oh, ow), kh, kw, stride, padding)
    parents = [x, w]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.data.shape != (Cout,):
            raise ShapeError(f"conv2d_transpose: bias shape {bias.data.shape} != ({Cout},)")
        out = out + bias.data[None, :, None, None]
        parents.append(bias)

    def vjp(g):
        gcols, _, _ = _im2col(g, kh, kw, stride, padding)
        dx = np.matmul(wmat[None], gcols).reshape(x.data.shape)
        dw = np.matmul(x.data.reshape(B, Cin, H * W),
                       gcols.transpose(0, 2, 1)).sum(axis=0).reshape(w.data.shape)
        if bias is not None:
            return dx, dw, g.sum(axis=(0, 2, 3))
        return dx, dw

    return Tensor._from_op(out, tuple(parents), vjp, "conv2d_transpose")


def _resize_axis_weights(n_in: int, n_out: int):
    # Pixel-center mapping: src = (i + 0.5) * n_in/n_out - 0.5, clipped.
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def bilinear_resize(x, out_h: int, out_w: int) -> Tensor:
    """Bilinear resampling of an NCHW tensor to (out_h, out_w)."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"bilinear_resize: expected 4-d input, got {x.data.shape}")
    B, C, H, W = x.data.shape
    ylo, yhi, fy = _resize_axis_weights(H, out_h)
    xlo, xhi, fx = _resize_axis_weights(W, out_w)
    fy = fy[:, None]
    fx = fx[None, :]
    w00 = (1 - fy) * (1 - fx)
    w01 = (1 - fy) * fx
    w10 = fy * (1 - fx)
    w11 = fy * fx
    d = x.data
    out = (d[:, :, ylo[:, None], xlo[None, :]] * w00
           + d[:, :, ylo[:, None], xhi[None, :]] * w01
           + d[:, :, yhi[:, None], xlo[None, :]] * w10
           + d[:, :, yhi[:, None], xhi[None, :]] * w11)

    def vjp(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, (slice(None), slice(None), ylo[:, None], xlo[None, :]), g * w00)
        np.add.at(dx, (slice(None), slice(None), ylo[:, None], xhi[None, :]), g * w01)
        np.add.at(dx, (slice(None), slice(None), yhi[:, None], xlo[None, :]), g * w10)
        np.add.at(dx, (slice(None), slice(None), yhi[:, None], xhi[None, :]), g * w11)
        return (dx,)

    return Tensor._from_op(out, (x,), vjp, "bilinear_resize")


def make_op(data, parents, vjp, op_name: str) -> Tensor:
    """Extension point: register a custom differentiable op."""
    return Tensor._from_op(np.asarray(data, dtype=np.float64), tuple(parents), vjp, op_name)


# ---------------------------------------------------------------------------
# Counter-based RNG
# ---------------------------------------------------------------------------

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _splitmix_finalize(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def _fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & _MASK64
    return h


class RngStream:
    """Deterministic counter-based random stream (SplitMix64).

    The i-th raw draw of stream s is splitmix_finalize(s + (i+1)*GOLDEN)
    mod 2^64, so any (seed, counter) state reproduces exactly on every
    platform. Gaussians use the Box-Muller transform over consecutive
    counter values. ``split(label)`` derives an independent child stream
    from a textual label; distinct labels give distinct streams.
    """

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _MASK64
        self.counter = int(counter)

    def split(self, label: str) -> "RngStream":
        mixed = _splitmix_finalize(
            np.array([(self.seed ^ _fnv1a64(label) ^ 0xA5A5A5A5DEADBEEF) & _MASK64],
                     dtype=np.uint64))[0]
        return RngStream(int(mixed))

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        return _splitmix_finalize(np.uint64(self.seed) + idx * np.uint64(_GOLDEN))

    def uniform(self, shape=()) -> np.ndarray:
        """i.i.d. uniforms in [0, 1) at 53-bit resolution."""
        n = int(np.prod(shape)) if shape else 1
        vals = (self._raw(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        return vals.reshape(shape) if shape else vals[0]

    def gaussian(self, shape=()) -> np.ndarray:
        """i.i.d. standard normals via Box-Muller over the counter stream."""
        n = int(np.prod(shape)) if shape else 1
        m = ((n + 1) // 2) * 2
        raw = self._raw(m)
        half = m // 2
        # u1 in (0, 1] so log() is finite; u2 in [0, 1).
        u1 = ((raw[:half] >> np.uint64(11)).astype(np.float64) + 1.0) * (2.0 ** -53)
        u2 = (raw[half:] >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        vals = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return vals.reshape(shape) if shape else vals[0]

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Uniform integers in [low, high); modulo method (bias < 2^-53)."""
        if high <= low:
            raise RejectedInput(f"integers: empty range [{low}, {high})")
        n = int(np.prod(shape)) if shape else 1
        span = np.uint64(high - low)
        vals = (self._raw(n) % span).astype(np.int64) + low
        return vals.reshape(shape) if shape else int(vals[0])

    def state(self):
        return (self.seed, self.counter)


def gaussian(rng: RngStream, shape) -> Tensor:
    """Standard-normal tensor drawn from the given stream (no gradient)."""
    return Tensor(rng.gaussian(tuple(shape)))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


class Adam:
    """Adam with bias correction; state per parameter, deterministic.

    Defaults: lr 1e-3, beta1 0.9, beta2 0.999, eps 1e-8.
    """

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        for p in self.params:
            if not isinstance(p, Tensor) or not p.requires_grad:
                raise RejectedInput("Adam expects requires_grad tensors")
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ShapeError(f"adam_step: grad shape {g.shape} != param {p.data.shape}")
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            mhat = self.m[i] / bc1
            vhat = self.v[i] / bc2
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
