"""Finite-difference gradient checks for every autodiff op."""

import numpy as np
import pytest

from ucdmt import autodiff as ad
from ucdmt.errors import ShapeMismatch


def fd_gradcheck(fn, tensors, rtol=1e-4, h=1e-6):
    """Compare analytic grads of scalar fn(*tensors) to central differences."""
    out = fn(*tensors)
    out.backward()
    for t in tensors:
        if not t.requires_grad:
            continue
        analytic = t.grad.copy()
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = fn(*tensors).item()
            flat[i] = orig - h
            lo = fn(*tensors).item()
            flat[i] = orig
            num_flat[i] = (hi - lo) / (2 * h)
        denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
        err = np.linalg.norm(analytic - numeric) / denom
        assert err < rtol, f"grad mismatch {err:.2e} on tensor of shape {t.shape}"
        t.grad = None


def _t(rng, shape, scale=1.0):
    return ad.Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def test_conv2d_grads():
    rng = np.random.default_rng(0)
    x = _t(rng, (2, 3, 6, 6))
    w = _t(rng, (4, 3, 3, 3), 0.5)
    b = _t(rng, (4,))
    tgt = ad.Tensor(rng.standard_normal((2, 4, 3, 3)))
    fd_gradcheck(lambda x_, w_, b_: ad.mean_abs_diff(
        ad.conv2d(x_, w_, b_, stride=2, pad=1), tgt), [x, w, b])


def test_conv_transpose2d_grads():
    rng = np.random.default_rng(1)
    x = _t(rng, (2, 4, 3, 3))
    w = _t(rng, (4, 3, 4, 4), 0.5)
    b = _t(rng, (3,))
    tgt = ad.Tensor(rng.standard_normal((2, 3, 6, 6)))
    fd_gradcheck(lambda x_, w_, b_: ad.mean_abs_diff(
        ad.conv_transpose2d(x_, w_, b_, stride=2, pad=1), tgt), [x, w, b])


def test_instance_norm_grads():
    rng = np.random.default_rng(2)
    x = _t(rng, (2, 3, 4, 4))
    g = _t(rng, (3,))
    b = _t(rng, (3,))
    tgt = ad.Tensor(rng.standard_normal((2, 3, 4, 4)))
    fd_gradcheck(lambda x_, g_, b_: ad.mean_abs_diff(
        ad.instance_norm2d(x_, g_, b_), tgt), [x, g, b], rtol=2e-4)


@pytest.mark.parametrize("op", [ad.relu, ad.tanh,
                                lambda x: ad.leaky_relu(x, 0.2), ad.neg])
def test_elementwise_grads(op):
    rng = np.random.default_rng(3)
    x = _t(rng, (3, 5))
    # keep activations away from their kinks so FD is well defined
    x.data[np.abs(x.data) < 0.05] += 0.1
    tgt = ad.Tensor(rng.standard_normal((3, 5)))
    fd_gradcheck(lambda x_: ad.mean_abs_diff(op(x_), tgt), [x])


def test_structure_op_grads():
    rng = np.random.default_rng(4)
    a = _t(rng, (2, 3, 4, 4))
    b = _t(rng, (2, 3, 4, 4))
    tgt = ad.Tensor(rng.standard_normal((2, 3, 4, 4)))
    fd_gradcheck(lambda a_, b_: ad.mean_abs_diff(ad.add(a_, b_), tgt), [a, b])
    planes = np.ones((2, 2, 4, 4))
    tgt2 = ad.Tensor(rng.standard_normal((2, 5, 4, 4)))
    fd_gradcheck(lambda a_: ad.mean_abs_diff(
        ad.concat_channels(a_, planes), tgt2), [a])
    x = _t(rng, (3, 6))
    w = _t(rng, (4, 6), 0.5)
    bias = _t(rng, (4,))
    tgt3 = ad.Tensor(rng.standard_normal((3, 4)))
    fd_gradcheck(lambda x_, w_, b_: ad.mean_abs_diff(
        ad.linear(x_, w_, b_), tgt3), [x, w, bias])
    z = _t(rng, (2, 3, 4, 4))
    tgt4 = ad.Tensor(rng.standard_normal((2, 3)))
    fd_gradcheck(lambda z_: ad.mean_abs_diff(
        ad.global_avg_pool2d(z_), tgt4), [z])


def test_scalar_reduction_grads():
    rng = np.random.default_rng(5)
    s = _t(rng, (3, 4))
    fd_gradcheck(lambda s_: ad.mean_softplus(s_), [s])
    logits = _t(rng, (4, 3))
    targets = np.array([0, 2, 1, 1])
    fd_gradcheck(lambda l_: ad.softmax_cross_entropy(l_, targets), [logits])
    a = _t(rng, (4, 4))
    b = ad.Tensor(a.data + rng.uniform(0.5, 1.0, (4, 4)) * np.sign(rng.standard_normal((4, 4))),
                  requires_grad=True)
    fd_gradcheck(lambda a_, b_: ad.mean_abs_diff(a_, b_), [a, b])


def test_grad_accumulates_when_tensor_reused():
    x = ad.Tensor(np.array([1.0, -2.0]), requires_grad=True)
    y = ad.add(x, x)
    loss = ad.mean_abs_diff(y, ad.Tensor(np.array([10.0, 10.0])))
    loss.backward()
    # d|2x - 10|/dx = 2 * sign * 1/2 per element
    assert np.allclose(x.grad, [-1.0, -1.0])


def test_no_grad_builds_no_graph():
    x = ad.Tensor(np.ones((2, 2)), requires_grad=True)
    with ad.no_grad():
        y = ad.relu(x)
    assert not y.requires_grad and y._parents == ()


def test_detach_blocks_gradient():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    y = ad.relu(x).detach()
    assert not y.requires_grad


def test_shape_mismatch_raises():
    a = ad.Tensor(np.ones((2, 3)))
    b = ad.Tensor(np.ones((3, 2)))
    with pytest.raises(ShapeMismatch):
        ad.add(a, b)
    with pytest.raises(ShapeMismatch):
        ad.mean_abs_diff(a, b)


def test_dtype_preserved_in_float32_graph():
    rng = np.random.default_rng(6)
    x = ad.Tensor(rng.standard_normal((2, 1, 8, 8)).astype(np.float32),
                  requires_grad=True)
    w = ad.Tensor(rng.standard_normal((2, 1, 3, 3)).astype(np.float32) * 0.1,
                  requires_grad=True)
    y = ad.tanh(ad.conv2d(x, w, stride=1, pad=1))
    loss = ad.mean_softplus(y)
    assert y.dtype == np.float32 and loss.dtype == np.float32
    loss.backward()
    assert x.grad.dtype == np.float32 and w.grad.dtype == np.float32
