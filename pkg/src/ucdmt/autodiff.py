"""Minimal reverse-mode autodiff over numpy arrays.

Just enough machinery for the networks and losses in this package: a Tensor
wrapping an ndarray, op functions that record a backward closure, and a
topological-sort backward pass. Convolutions route through ucdmt.kernels;
everything else is vectorized numpy. All ops preserve the input dtype, so
the same graph code runs in float32 for training and float64 for
finite-difference gradient checks.
"""

import threading

import numpy as np
from scipy.special import expit

from ucdmt import kernels
from ucdmt.errors import ShapeMismatch

_mode = threading.local()


def _grad_on():
    return getattr(_mode, "enabled", True)


class no_grad:
    """Context manager: ops executed inside build no graph (per thread)."""

    def __enter__(self):
        self._prev = _grad_on()
        _mode.enabled = False

    def __exit__(self, *exc):
        _mode.enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() expects a scalar loss")
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __add__(self, other):
        if not isinstance(other, Tensor):
            other = Tensor(np.asarray(other, dtype=self.data.dtype))
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, c):
        return scale(self, c)

    def __rmul__(self, c):
        return scale(self, c)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.copy()  # own the buffer; g may alias another tensor's grad
    else:
        t.grad += g


def _accum_owned(t, g):
    """Like _accum for gradients freshly allocated by the caller."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
    else:
        t.grad += g


def _make(data, parents, backward):
    if not _grad_on() or not any(p.requires_grad for p in parents):
        return Tensor(data)
    out = Tensor(data, requires_grad=True)
    out._parents = tuple(parents)
    out._backward = backward
    return out


# ---------------------------------------------------------------------------
# convolution ops

def _cols_bytes(x_shape, w_shape, stride, pad):
    n, _, h, w_in = x_shape
    co, ci, kh, kw = w_shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w_in + 2 * pad - kw) // stride + 1
    return n * ho * wo * ci * kh * kw * np.dtype(np.float32).itemsize


def conv2d(x, w, b=None, stride=1, pad=0):
    if x.data.ndim != 4 or x.data.shape[1] != w.data.shape[1]:
        raise ShapeMismatch(
            f"conv2d input {x.data.shape} incompatible with weight {w.data.shape}")
    grad_on = _grad_on() and (x.requires_grad or w.requires_grad)
    # reusing the forward patch matrix in the weight gradient only pays off
    # while it stays cache-friendly; large ones get repacked on demand
    keep_cols = (grad_on and w.requires_grad
                 and _cols_bytes(x.data.shape, w.data.shape, stride, pad) <= 20_000_000)
    if keep_cols:
        y, cols = kernels.conv2d_fwd(x.data, w.data, stride, pad, return_cols=True)
    else:
        y, cols = kernels.conv2d_fwd(x.data, w.data, stride, pad), None
    if b is not None:
        y += b.data.reshape(1, -1, 1, 1)
    h, w_in = x.data.shape[2], x.data.shape[3]
    kh, kw = w.data.shape[2], w.data.shape[3]
    parents = (x, w) if b is None else (x, w, b)

    def backward(dy):
        if x.requires_grad:
            _accum_owned(x, kernels.conv2d_dgrad(dy, w.data, stride, pad, h, w_in))
        if w.requires_grad:
            _accum_owned(w, kernels.conv2d_wgrad(dy, x.data, kh, kw, stride, pad,
                                                 cols=cols))
        if b is not None and b.requires_grad:
            _accum_owned(b, dy.sum(axis=(0, 2, 3)))

    return _make(y, parents, backward)


def conv_transpose2d(x, w, b=None, stride=1, pad=0):
    """Transposed conv; w has layout (Cin, Cout, kh, kw)."""
    if x.data.ndim != 4 or x.data.shape[1] != w.data.shape[0]:
        raise ShapeMismatch(
            f"conv_transpose2d input {x.data.shape} incompatible with weight {w.data.shape}")
    kh, kw = w.data.shape[2], w.data.shape[3]
    h_out = (x.data.shape[2] - 1) * stride - 2 * pad + kh
    w_out = (x.data.shape[3] - 1) * stride - 2 * pad + kw
    # transposed conv == the input-gradient of a forward conv with the same w
    y = kernels.conv2d_dgrad(x.data, w.data, stride, pad, h_out, w_out)
    if b is not None:
        y += b.data.reshape(1, -1, 1, 1)
    parents = (x, w) if b is None else (x, w, b)

    def backward(dy):
        if x.requires_grad:
            _accum_owned(x, kernels.conv2d_fwd(dy, w.data, stride, pad))
        if w.requires_grad:
            _accum_owned(w, kernels.conv2d_wgrad(x.data, dy, kh, kw, stride, pad))
        if b is not None and b.requires_grad:
            _accum_owned(b, dy.sum(axis=(0, 2, 3)))

    return _make(y, parents, backward)


# ---------------------------------------------------------------------------
# normalization / activations

def instance_norm2d(x, gamma, beta, eps=1e-5):
    """Per-sample, per-channel normalization over the spatial axes."""
    y, xhat, istd = kernels.instance_norm_fwd(x.data, gamma.data, beta.data, eps)

    def backward(dy):
        dx, dgamma, dbeta = kernels.instance_norm_bwd(dy, xhat, istd, gamma.data)
        if gamma.requires_grad:
            _accum_owned(gamma, dgamma)
        if beta.requires_grad:
            _accum_owned(beta, dbeta)
        if x.requires_grad:
            _accum_owned(x, dx)

    return _make(y, (x, gamma, beta), backward)


def relu(x):
    y = np.maximum(x.data, 0)

    def backward(dy):
        _accum_owned(x, dy * (x.data > 0))

    return _make(y, (x,), backward)


def leaky_relu(x, slope=0.2):
    y = np.where(x.data > 0, x.data, slope * x.data)

    def backward(dy):
        _accum_owned(x, dy * np.where(x.data > 0, 1.0, slope).astype(x.data.dtype))

    return _make(y, (x,), backward)


def tanh(x):
    y = np.tanh(x.data)

    def backward(dy):
        _accum_owned(x, dy * (1.0 - y * y))

    return _make(y, (x,), backward)


# ---------------------------------------------------------------------------
# structure ops

def add(a, b):
    if a.data.shape != b.data.shape:
        raise ShapeMismatch(f"add: {a.data.shape} vs {b.data.shape}")
    y = a.data + b.data

    def backward(dy):
        _accum(a, dy)
        _accum(b, dy)

    return _make(y, (a, b), backward)


def scale(x, c):
    c = float(c)
    y = x.data * c

    def backward(dy):
        _accum_owned(x, dy * c)

    return _make(y, (x,), backward)


def reshape(x, shape):
    y = x.data.reshape(shape)

    def backward(dy):
        _accum(x, dy.reshape(x.data.shape))

    return _make(y, (x,), backward)


def concat_channels(x, planes):
    """Append constant planes (numpy, (N, K, H, W)) after x's channels."""
    if planes.shape[0] != x.data.shape[0] or planes.shape[2:] != x.data.shape[2:]:
        raise ShapeMismatch(f"concat: {x.data.shape} vs planes {planes.shape}")
    cz = x.data.shape[1]
    y = np.concatenate([x.data, planes.astype(x.data.dtype)], axis=1)

    def backward(dy):
        _accum_owned(x, np.ascontiguousarray(dy[:, :cz]))

    return _make(y, (x,), backward)


def global_avg_pool2d(x):
    y = x.data.mean(axis=(2, 3))
    npix = x.data.shape[2] * x.data.shape[3]

    def backward(dy):
        _accum_owned(x, np.broadcast_to(dy[:, :, None, None] / npix, x.data.shape).copy())

    return _make(y, (x,), backward)


def linear(x, w, b):
    """x (N, C) @ w.T + b with w (Out, C)."""
    y = x.data @ w.data.T + b.data

    def backward(dy):
        if x.requires_grad:
            _accum_owned(x, dy @ w.data)
        if w.requires_grad:
            _accum_owned(w, dy.T @ x.data)
        if b.requires_grad:
            _accum_owned(b, dy.sum(axis=0))

    return _make(y, (x, w, b), backward)


# ---------------------------------------------------------------------------
# scalar reductions (loss heads)

def mean_abs_diff(a, b):
    if a.data.shape != b.data.shape:
        raise ShapeMismatch(f"mean_abs_diff: {a.data.shape} vs {b.data.shape}")
    diff = a.data - b.data
    y = np.abs(diff).mean(dtype=a.data.dtype)
    size = diff.size

    def backward(dy):
        g = np.sign(diff) * (dy / size)
        _accum_owned(a, g.astype(a.data.dtype))
        _accum_owned(b, (-g).astype(b.data.dtype))

    return _make(y, (a, b), backward)


def mean_softplus(x):
    """mean(log(1 + exp(x))), computed stably; softplus(x) = -log sigmoid(-x)."""
    y = np.logaddexp(0.0, x.data).mean(dtype=x.data.dtype)
    size = x.data.size

    def backward(dy):
        _accum_owned(x, (expit(x.data) * (dy / size)).astype(x.data.dtype))

    return _make(y, (x,), backward)


def neg(x):
    def backward(dy):
        _accum_owned(x, -dy)

    return _make(-x.data, (x,), backward)


def softmax_cross_entropy(logits, targets):
    """Mean cross-entropy of logits (N, M) against integer targets (N,)."""
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    probs = ez / ez.sum(axis=1, keepdims=True)
    n = z.shape[0]
    lse = zmax[:, 0] + np.log(ez.sum(axis=1))
    y = np.asarray((lse - z[np.arange(n), targets]).mean(), dtype=z.dtype)

    def backward(dy):
        g = probs.copy()
        g[np.arange(n), targets] -= 1.0
        _accum_owned(logits, (g * (dy / n)).astype(z.dtype))

    return _make(y, (logits,), backward)
