"""Minimal reverse-mode automatic differentiation on numpy arrays.

Implements exactly the operator set the reconstruction/segmentation
network needs: dense matmul, 2D/3D cross-correlation, transposed 3D
convolution, instance normalization, channel softmax, and elementwise
glue (arithmetic, exp/log, clamp, leaky relu, sigmoid, reductions,
reshape, concat, channel slicing, depth replication).

Tensors carry float32 or float64 data; every operator preserves the
input dtype, so a recorded graph can be replayed at 64-bit precision
for finite-difference checks. Gradients accumulate across backward
calls until explicitly zeroed.
"""

from __future__ import annotations

import contextlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_FLOAT_DTYPES = (np.float32, np.float64)

# Above this im2col buffer size the convolution helpers switch to a
# per-tap accumulation that never materializes the full column matrix.
_IM2COL_LIMIT_BYTES = 256 * 2**20

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the context (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-dimensional array with optional reverse-mode gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._grad_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype):
        t = Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)
        return t

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # arithmetic sugar
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


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is not None and arr.dtype != dtype:
        arr = arr.astype(dtype)
    return Tensor(arr)


def _node(data, parents, grad_fn):
    """Wrap an op result, recording the tape edge when grads are live."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    return out


def backward(loss):
    """Populate gradients of every reachable requires_grad leaf.

    Gradients accumulate into ``leaf.grad``; call ``zero_grad`` before a
    fresh pass. Repeated backward calls without reset therefore sum.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return

    # iterative post-order over the recorded graph
    topo = []
    state = {}  # id -> 0 new, 1 open, 2 done
    stack = [loss]
    while stack:
        node = stack[-1]
        st = state.get(id(node), 0)
        if st == 0:
            state[id(node)] = 1
            for p in node._parents:
                if p.requires_grad and state.get(id(p), 0) == 0:
                    stack.append(p)
        else:
            stack.pop()
            if st == 1:
                state[id(node)] = 2
                topo.append(node)

    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._grad_fn is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def _unbroadcast(g, shape):
    """Sum a broadcasted gradient back down to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _pair(a, b):
    """Wrap operands, casting bare scalars to the tensor side's dtype."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.data.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(np.asarray(a, dtype=b.data.dtype)), b
    return as_tensor(a), as_tensor(b)


def add(a, b):
    a, b = _pair(a, b)
    out = a.data + b.data

    def grad_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _node(out, (a, b), grad_fn)


def sub(a, b):
    a, b = _pair(a, b)
    out = a.data - b.data

    def grad_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _node(out, (a, b), grad_fn)


def mul(a, b):
    a, b = _pair(a, b)
    out = a.data * b.data

    def grad_fn(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _node(out, (a, b), grad_fn)


def div(a, b):
    a, b = _pair(a, b)
    out = a.data / b.data

    def grad_fn(g):
        ga = _unbroadcast(g / b.data, a.data.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        return ga, gb

    return _node(out, (a, b), grad_fn)


def neg(a):
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def expm1(a):
    a = as_tensor(a)
    out = np.expm1(a.data)
    return _node(out, (a,), lambda g: (g * (out + 1.0),))


def log(a):
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def sigmoid(a):
    a = as_tensor(a)
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = out.astype(x.dtype)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def leaky_relu(a, slope=0.2):
    a = as_tensor(a)
    x = a.data
    out = np.where(x > 0, x, x * x.dtype.type(slope))

    def grad_fn(g):
        return (np.where(x > 0, g, g * x.dtype.type(slope)),)

    return _node(out, (a,), grad_fn)


def clamp(a, lo, hi):
    """Clip to [lo, hi]; gradient passes only inside the interval."""
    a = as_tensor(a)
    x = a.data
    out = np.clip(x, lo, hi)

    def grad_fn(g):
        mask = ((x >= lo) & (x <= hi)).astype(x.dtype)
        return (g * mask,)

    return _node(out, (a,), grad_fn)


def maximum(a, b):
    """Elementwise max; on ties the gradient routes to the first input."""
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data >= b.data
    out = np.where(take_a, a.data, b.data)

    def grad_fn(g):
        ga = _unbroadcast(np.where(take_a, g, 0.0), a.data.shape)
        gb = _unbroadcast(np.where(take_a, 0.0, g), b.data.shape)
        return ga, gb

    return _node(out, (a, b), grad_fn)


def minimum(a, b):
    a, b = _pair(a, b)
    take_a = a.data <= b.data
    out = np.where(take_a, a.data, b.data)

    def grad_fn(g):
        ga = _unbroadcast(np.where(take_a, g, 0.0), a.data.shape)
        gb = _unbroadcast(np.where(take_a, 0.0, g), b.data.shape)
        return ga, gb

    return _node(out, (a, b), grad_fn)


def tensor_sum(a):
    a = as_tensor(a)
    out = np.asarray(a.data.sum(dtype=a.data.dtype))

    def grad_fn(g):
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _node(out, (a,), grad_fn)


def mean(a):
    a = as_tensor(a)
    n = a.data.size
    out = np.asarray(a.data.sum(dtype=a.data.dtype) / a.data.dtype.type(n))

    def grad_fn(g):
        return (np.broadcast_to(g / a.data.dtype.type(n), a.data.shape).copy(),)

    return _node(out, (a,), grad_fn)


def reshape(a, shape):
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return _node(out, (a,), lambda g: (g.reshape(a.data.shape),))


def transpose2d(a):
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ValueError(f"transpose2d expects a matrix, got shape {a.data.shape}")
    return _node(a.data.T.copy(), (a,), lambda g: (g.T.copy(),))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _node(out, tuple(tensors), grad_fn)


def slice_channels(a, start, stop):
    """Slice [start:stop] along axis 0; gradient zero-fills the rest."""
    a = as_tensor(a)
    out = a.data[start:stop].copy()

    def grad_fn(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return (full,)

    return _node(out, (a,), grad_fn)


def repeat_depth(a, depth):
    """Stack a [C,H,W] map into [C,depth,H,W] by replication."""
    a = as_tensor(a)
    if a.data.ndim != 3:
        raise ValueError(f"repeat_depth expects [C,H,W], got shape {a.data.shape}")
    out = np.broadcast_to(a.data[:, None], (a.data.shape[0], depth) + a.data.shape[1:]).copy()

    def grad_fn(g):
        return (g.sum(axis=1),)

    return _node(out, (a,), grad_fn)


# ---------------------------------------------------------------------------
# matmul / softmax / instance norm
# ---------------------------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects matrices, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul inner dims disagree: {a.data.shape} vs {b.data.shape}")
    out = a.data @ b.data

    def grad_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _node(out, (a, b), grad_fn)


def softmax_channel(a):
    """Softmax over axis 0 (channels) with max-subtraction for stability."""
    a = as_tensor(a)
    x = a.data
    if x.ndim < 1 or x.shape[0] < 1:
        raise ValueError(f"softmax_channel needs a channel axis, got shape {x.shape}")
    shifted = x - x.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=0, keepdims=True)

    def grad_fn(g):
        dot = (g * out).sum(axis=0, keepdims=True)
        return (out * (g - dot),)

    return _node(out, (a,), grad_fn)


def instance_norm(a, weight, bias, eps=1e-5):
    """Per-channel standardization over all spatial dims, then scale/shift.

    `a` is [C, *spatial]; `weight` and `bias` are length-C vectors.
    """
    a, weight, bias = as_tensor(a), as_tensor(weight), as_tensor(bias)
    x = a.data
    if x.ndim < 2:
        raise ValueError(f"instance_norm expects [C, spatial...], got shape {x.shape}")
    c = x.shape[0]
    if weight.data.shape != (c,) or bias.data.shape != (c,):
        raise ValueError(
            f"instance_norm scale/shift must have shape ({c},), got "
            f"{weight.data.shape} and {bias.data.shape}")
    spatial_axes = tuple(range(1, x.ndim))
    n = int(np.prod(x.shape[1:]))
    if n < 2:
        raise ValueError(f"instance_norm needs >= 2 spatial elements per channel, got {n}")

    mu = x.mean(axis=spatial_axes, keepdims=True)
    var = x.var(axis=spatial_axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = (x - mu) * inv
    wshape = (c,) + (1,) * (x.ndim - 1)
    out = weight.data.reshape(wshape) * xhat + bias.data.reshape(wshape)

    def grad_fn(g):
        gw = (g * xhat).sum(axis=spatial_axes)
        gb = g.sum(axis=spatial_axes)
        dxhat = g * weight.data.reshape(wshape)
        m1 = dxhat.mean(axis=spatial_axes, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=spatial_axes, keepdims=True)
        gx = inv * (dxhat - m1 - xhat * m2)
        return gx.astype(x.dtype, copy=False), gw, gb

    return _node(out, (a, weight, bias), grad_fn)


# ---------------------------------------------------------------------------
# convolution machinery (shared by 2D and 3D, forward/adjoint/kernel-grad)
# ---------------------------------------------------------------------------

def _pad_spatial(x, padding):
    if padding == 0:
        return x
    nd = x.ndim - 1
    return np.pad(x, ((0, 0),) + ((padding, padding),) * nd)


def _conv_raw(x, w, stride, padding):
    """Cross-correlation: x [B, *in], w [A, B, *k] -> [A, *out]."""
    nd = x.ndim - 1
    k = w.shape[2:]
    out_sp = tuple((x.shape[1 + i] + 2 * padding - k[i]) // stride + 1 for i in range(nd))
    xp = _pad_spatial(x, padding)
    n_out = int(np.prod(out_sp))
    col_bytes = w.shape[1] * int(np.prod(k)) * n_out * x.dtype.itemsize
    if col_bytes <= _IM2COL_LIMIT_BYTES:
        win = sliding_window_view(xp, k, axis=tuple(range(1, nd + 1)))
        sl = (slice(None),) + tuple(slice(0, (o - 1) * stride + 1, stride) for o in out_sp)
        win = win[sl]
        # contract w over (B, *k) against win axes (0, nd+1..2nd)
        y = np.tensordot(w, win, axes=(list(range(1, nd + 2)),
                                       [0] + list(range(nd + 1, 2 * nd + 1))))
        return np.ascontiguousarray(y)
    y = np.zeros((w.shape[0],) + out_sp, dtype=x.dtype)
    y2 = y.reshape(w.shape[0], -1)
    for tap in np.ndindex(*k):
        sl = tuple(slice(tap[i], tap[i] + (out_sp[i] - 1) * stride + 1, stride)
                   for i in range(nd))
        xs = xp[(slice(None),) + sl].reshape(w.shape[1], -1)
        y2 += w[(slice(None), slice(None)) + tap] @ xs
    return y


def _conv_adjoint_raw(y, w, stride, padding, out_sp):
    """Adjoint of _conv_raw: y [A, *], w [A, B, *k] -> [B, *out_sp]."""
    nd = y.ndim - 1
    k = w.shape[2:]
    a, b = w.shape[0], w.shape[1]
    n_taps = int(np.prod(k))
    n_pos = int(np.prod(y.shape[1:]))
    yf = y.reshape(a, -1)
    xp = np.zeros((b,) + tuple(o + 2 * padding for o in out_sp), dtype=y.dtype)

    def tap_slices(tap):
        return tuple(slice(tap[i], tap[i] + (y.shape[1 + i] - 1) * stride + 1, stride)
                     for i in range(nd))

    if b * n_taps * n_pos * y.dtype.itemsize <= _IM2COL_LIMIT_BYTES:
        # one BLAS product, then strided scatter-adds of contiguous views
        m = (w.reshape(a, b * n_taps).T @ yf).reshape((b,) + tuple(k) + y.shape[1:])
        for tap in np.ndindex(*k):
            xp[(slice(None),) + tap_slices(tap)] += m[(slice(None),) + tap]
    else:
        for tap in np.ndindex(*k):
            contrib = (w[(slice(None), slice(None)) + tap].T @ yf).reshape(
                (b,) + y.shape[1:])
            xp[(slice(None),) + tap_slices(tap)] += contrib
    if padding:
        crop = (slice(None),) + tuple(slice(padding, padding + o) for o in out_sp)
        return np.ascontiguousarray(xp[crop])
    return xp


def _conv_kernel_grad_raw(gy, x, stride, padding, k):
    """Kernel gradient of _conv_raw: gy [A, *], x [B, *] -> [A, B, *k]."""
    nd = x.ndim - 1
    xp = _pad_spatial(x, padding)
    out_sp = gy.shape[1:]
    n_out = int(np.prod(out_sp))
    col_bytes = x.shape[0] * int(np.prod(k)) * n_out * x.dtype.itemsize
    if col_bytes <= _IM2COL_LIMIT_BYTES:
        win = sliding_window_view(xp, k, axis=tuple(range(1, nd + 1)))
        sl = (slice(None),) + tuple(slice(0, (o - 1) * stride + 1, stride) for o in out_sp)
        win = win[sl]
        gw = np.tensordot(gy, win, axes=(list(range(1, nd + 1)),
                                         list(range(1, nd + 1))))
        return np.ascontiguousarray(gw)
    gw = np.empty((gy.shape[0], x.shape[0]) + tuple(k), dtype=x.dtype)
    gyf = gy.reshape(gy.shape[0], -1)
    for tap in np.ndindex(*k):
        sl = tuple(slice(tap[i], tap[i] + (out_sp[i] - 1) * stride + 1, stride)
                   for i in range(nd))
        xs = xp[(slice(None),) + sl].reshape(x.shape[0], -1)
        gw[(slice(None), slice(None)) + tap] = gyf @ xs.T
    return gw


def _check_conv_args(x, w, nd, stride, padding, name):
    if x.data.ndim != nd + 1:
        raise ValueError(f"{name} expects a [C, {'x'.join(['S'] * nd)}] input, got shape {x.data.shape}")
    if w.data.ndim != nd + 2:
        raise ValueError(f"{name} kernel must have rank {nd + 2}, got shape {w.data.shape}")
    k = w.data.shape[2:]
    if len(set(k)) != 1:
        raise ValueError(f"{name} kernel must be square/cubic, got taps {k}")
    if stride < 1 or padding < 0:
        raise ValueError(f"{name}: stride must be >= 1 and padding >= 0")


def conv2d(x, w, stride=1, padding=0):
    """Cross-correlate [C_in,H,W] with [C_out,C_in,k,k] (k odd)."""
    x, w = as_tensor(x), as_tensor(w)
    _check_conv_args(x, w, 2, stride, padding, "conv2d")
    if w.data.shape[2] % 2 != 1:
        raise ValueError(f"conv2d kernel size must be odd, got {w.data.shape[2]}")
    if x.data.shape[0] != w.data.shape[1]:
        raise ValueError(
            f"conv2d channel mismatch: input shape {x.data.shape} has {x.data.shape[0]} "
            f"channels but kernel shape {w.data.shape} expects {w.data.shape[1]}")
    k = w.data.shape[2]
    out_sp = tuple((s + 2 * padding - k) // stride + 1 for s in x.data.shape[1:])
    if min(out_sp) < 1:
        raise ValueError(f"conv2d output would be empty for input {x.data.shape}, "
                         f"kernel {w.data.shape}, stride {stride}, padding {padding}")
    y = _conv_raw(x.data, w.data, stride, padding)

    def grad_fn(g):
        gx = (_conv_adjoint_raw(g, w.data, stride, padding, x.data.shape[1:])
              if x.requires_grad else None)
        gw = (_conv_kernel_grad_raw(g, x.data, stride, padding, w.data.shape[2:])
              if w.requires_grad else None)
        return gx, gw

    return _node(y, (x, w), grad_fn)


def conv3d(x, w, stride=1, padding=0):
    """Cross-correlate [C_in,D,H,W] with [C_out,C_in,k,k,k] (k odd)."""
    x, w = as_tensor(x), as_tensor(w)
    _check_conv_args(x, w, 3, stride, padding, "conv3d")
    if w.data.shape[2] % 2 != 1:
        raise ValueError(f"conv3d kernel size must be odd, got {w.data.shape[2]}")
    if x.data.shape[0] != w.data.shape[1]:
        raise ValueError(
            f"conv3d channel mismatch: input shape {x.data.shape} has {x.data.shape[0]} "
            f"channels but kernel shape {w.data.shape} expects {w.data.shape[1]}")
    k = w.data.shape[2]
    out_sp = tuple((s + 2 * padding - k) // stride + 1 for s in x.data.shape[1:])
    if min(out_sp) < 1:
        raise ValueError(f"conv3d output would be empty for input {x.data.shape}, "
                         f"kernel {w.data.shape}, stride {stride}, padding {padding}")
    y = _conv_raw(x.data, w.data, stride, padding)

    def grad_fn(g):
        gx = (_conv_adjoint_raw(g, w.data, stride, padding, x.data.shape[1:])
              if x.requires_grad else None)
        gw = (_conv_kernel_grad_raw(g, x.data, stride, padding, w.data.shape[2:])
              if w.requires_grad else None)
        return gx, gw

    return _node(y, (x, w), grad_fn)


def conv_transpose3d(x, w, stride=1, padding=0, output_padding=0):
    """Transposed 3D convolution: adjoint of conv3d with the same kernel.

    `x` is [C_in,D,H,W], `w` is [C_in,C_out,k,k,k]. Each spatial extent
    maps to (D-1)*stride + k - 2*padding + output_padding.
    """
    x, w = as_tensor(x), as_tensor(w)
    _check_conv_args(x, w, 3, stride, padding, "conv_transpose3d")
    if x.data.shape[0] != w.data.shape[0]:
        raise ValueError(
            f"conv_transpose3d channel mismatch: input shape {x.data.shape} has "
            f"{x.data.shape[0]} channels but kernel shape {w.data.shape} expects {w.data.shape[0]}")
    if not (0 <= output_padding < stride):
        raise ValueError(
            f"conv_transpose3d: inconsistent output_padding {output_padding}; "
            f"must satisfy 0 <= output_padding < stride ({stride})")
    k = w.data.shape[2]
    out_sp = tuple((s - 1) * stride + k - 2 * padding + output_padding
                   for s in x.data.shape[1:])
    if min(out_sp) < 1:
        raise ValueError(f"conv_transpose3d output would be empty for input {x.data.shape}")
    y = _conv_adjoint_raw(x.data, w.data, stride, padding, out_sp)

    def grad_fn(g):
        gx = (_conv_raw(g, w.data, stride, padding)
              if x.requires_grad else None)
        gw = (_conv_kernel_grad_raw(x.data, g, stride, padding, w.data.shape[2:])
              if w.requires_grad else None)
        return gx, gw

    return _node(y, (x, w), grad_fn)
