"""Pure-numpy convolution kernels (im2col + BLAS matmul).

Fallback path for machines without a working numba; selected with
UCDMT_KERNELS=numpy. Shares the exact kernel API of the numba backend:

    conv2d_fwd(x, w, stride, pad)              -> y
    conv2d_dgrad(dy, w, stride, pad, h, w_in)  -> dx
    conv2d_wgrad(dy, x, kh, kw, stride, pad)   -> dw

x, dx: (N, Ci, H, W); w, dw: (Co, Ci, kh, kw); y, dy: (N, Co, Ho, Wo).
All three are plain correlations (no kernel flip), matching the usual
deep-learning convention.
"""

import numpy as np

NAME = "numpy"


def _out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def _im2col(x, kh, kw, stride, pad):
    """Return (N*Ho*Wo, Ci*kh*kw) patch matrix and the output grid size."""
    n, ci, h, w = x.shape
    ho = _out_size(h, kh, stride, pad)
    wo = _out_size(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (N, Ci, Ho, Wo, kh, kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    return cols.reshape(n * ho * wo, ci * kh * kw), ho, wo


def conv2d_fwd(x, w, stride, pad, return_cols=False):
    n = x.shape[0]
    co, ci, kh, kw = w.shape
    cols, ho, wo = _im2col(x, kh, kw, stride, pad)
    out = cols @ w.reshape(co, ci * kh * kw).T
    y = np.ascontiguousarray(out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2))
    return (y, cols) if return_cols else y


def conv2d_dgrad(dy, w, stride, pad, h, w_in):
    n, co, ho, wo = dy.shape
    _, ci, kh, kw = w.shape
    dy_mat = np.ascontiguousarray(dy.transpose(0, 2, 3, 1)).reshape(n * ho * wo, co)
    dcols = dy_mat @ w.reshape(co, ci * kh * kw)
    dcols = dcols.reshape(n, ho, wo, ci, kh, kw)
    dxp = np.zeros((n, ci, h + 2 * pad, w_in + 2 * pad), dtype=dy.dtype)
    for i in range(kh):
        for j in range(kw):
            # every (ho, wo) lands on a distinct padded pixel for fixed (i, j)
            dxp[:, :, i : i + stride * (ho - 1) + 1 : stride,
                j : j + stride * (wo - 1) + 1 : stride] += \
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if pad:
        return np.ascontiguousarray(dxp[:, :, pad:-pad, pad:-pad])
    return dxp


def conv2d_wgrad(dy, x, kh, kw, stride, pad, cols=None):
    n, co, ho, wo = dy.shape
    ci = x.shape[1]
    if cols is None:
        cols, _, _ = _im2col(x, kh, kw, stride, pad)
    dy_mat = np.ascontiguousarray(dy.transpose(0, 2, 3, 1)).reshape(n * ho * wo, co)
    dw = dy_mat.T @ cols
    return dw.reshape(co, ci, kh, kw)


def instance_norm_fwd(x, gamma, beta, eps):
    """Returns (y, xhat, istd) with per-(sample, channel) spatial stats."""
    mu = x.mean(axis=(2, 3), keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    istd = 1.0 / np.sqrt(var + eps)
    xhat = xc * istd
    y = xhat * gamma.reshape(1, -1, 1, 1) + beta.reshape(1, -1, 1, 1)
    return y, xhat, istd[:, :, 0, 0]


def instance_norm_bwd(dy, xhat, istd, gamma):
    """Returns (dx, dgamma, dbeta)."""
    npix = dy.shape[2] * dy.shape[3]
    g = gamma.reshape(1, -1, 1, 1)
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    dxhat = dy * g
    s1 = dxhat.sum(axis=(2, 3), keepdims=True)
    s2 = (dxhat * xhat).sum(axis=(2, 3), keepdims=True)
    dxhat -= s1 / npix
    dxhat -= xhat * (s2 / npix)
    dxhat *= istd[:, :, None, None]
    return dxhat, dgamma, dbeta
