"""Numba-jitted convolution kernels: per-image patch packing + BLAS dot.

Packing the receptive fields with compiled loops avoids the large
strided-view copies the pure-numpy backend pays for; the contraction still
goes through BLAS (np.dot works inside njit). prange parallelism is over
the batch axis and every output element is written by exactly one thread,
so results are bit-deterministic for any thread count.

Two algebraic special cases keep wide-but-shallow layers off the im2col
path, whose patch matrix would dwarf the actual arithmetic there:
 - forward with very few output channels runs as a per-tap channel
   contraction (no patch matrix at all);
 - the stride-1 input gradient with fewer output than input channels runs
   as a forward conv against the flipped, transposed kernel.

Selected with UCDMT_KERNELS=numba (the default when numba is importable).
First call per dtype compiles the kernels; compiled code is disk-cached.
"""

import threading

import numpy as np
from numba import config as _numba_config
from numba import njit, prange

# workqueue is always available and keeps import quiet on hosts whose
# TBB/OpenMP layers are missing or too old; it is NOT safe for concurrent
# entry from several python threads, so the wrappers below serialize access
_numba_config.THREADING_LAYER = "workqueue"

NAME = "numba"

_entry_lock = threading.Lock()


@njit(cache=True)
def _pack_image(xn, kh, kw, stride, pad, ho, wo, cols):
    """im2col for one image xn (Ci, H, W) into cols (ho*wo, Ci*kh*kw)."""
    ci, h, w = xn.shape
    for r in range(ho * wo):
        oy = r // wo
        ox = r % wo
        t = 0
        for c in range(ci):
            plane = xn[c]
            for i in range(kh):
                hi = oy * stride - pad + i
                if 0 <= hi < h:
                    row = plane[hi]
                    base = ox * stride - pad
                    for j in range(kw):
                        wi = base + j
                        cols[r, t] = row[wi] if 0 <= wi < w else 0.0
                        t += 1
                else:
                    for j in range(kw):
                        cols[r, t] = 0.0
                        t += 1


@njit(parallel=True, cache=True)
def _fwd(x, w2t, kh, kw, stride, pad, ho, wo):
    n, ci = x.shape[0], x.shape[1]
    co = w2t.shape[1]
    span = ho * wo
    y = np.empty((n, co, ho, wo), dtype=x.dtype)
    for b in prange(n):
        cols = np.empty((span, ci * kh * kw), dtype=x.dtype)
        _pack_image(x[b], kh, kw, stride, pad, ho, wo, cols)
        out = np.dot(cols, w2t)  # (span, co)
        for c in range(co):
            for r in range(span):
                y[b, c, r // wo, r % wo] = out[r, c]
    return y


@njit(parallel=True, cache=True)
def _fwd_keep(x, w2t, kh, kw, stride, pad, ho, wo):
    """_fwd that also returns the packed patch matrix for gradient reuse."""
    n, ci = x.shape[0], x.shape[1]
    co = w2t.shape[1]
    span = ho * wo
    y = np.empty((n, co, ho, wo), dtype=x.dtype)
    cols = np.empty((n * span, ci * kh * kw), dtype=x.dtype)
    for b in prange(n):
        sub = cols[b * span:(b + 1) * span]
        _pack_image(x[b], kh, kw, stride, pad, ho, wo, sub)
        out = np.dot(sub, w2t)
        for c in range(co):
            for r in range(span):
                y[b, c, r // wo, r % wo] = out[r, c]
    return y, cols


@njit(parallel=True, cache=True)
def _dgrad(dy, w2, ci, kh, kw, stride, pad, h, w_in):
    n, co, ho, wo = dy.shape
    span = ho * wo
    dx = np.zeros((n, ci, h, w_in), dtype=dy.dtype)
    for b in prange(n):
        dyn = np.empty((span, co), dtype=dy.dtype)
        for c in range(co):
            for r in range(span):
                dyn[r, c] = dy[b, c, r // wo, r % wo]
        dcols = np.dot(dyn, w2)  # (span, ci*kh*kw)
        for r in range(span):
            oy = r // wo
            ox = r % wo
            t = 0
            for c in range(ci):
                for i in range(kh):
                    hi = oy * stride - pad + i
                    if 0 <= hi < h:
                        base = ox * stride - pad
                        for j in range(kw):
                            wi = base + j
                            if 0 <= wi < w_in:
                                dx[b, c, hi, wi] += dcols[r, t]
                            t += 1
                    else:
                        t += kw
    return dx


@njit(parallel=True, cache=True)
def _wgrad(dy, x, kh, kw, stride, pad):
    n, co, ho, wo = dy.shape
    ci = x.shape[1]
    span = ho * wo
    partial = np.empty((n, co, ci * kh * kw), dtype=dy.dtype)
    for b in prange(n):
        cols = np.empty((span, ci * kh * kw), dtype=x.dtype)
        _pack_image(x[b], kh, kw, stride, pad, ho, wo, cols)
        dyn = np.empty((co, span), dtype=dy.dtype)
        for c in range(co):
            for r in range(span):
                dyn[c, r] = dy[b, c, r // wo, r % wo]
        partial[b] = np.dot(dyn, cols)
    return partial


@njit(parallel=True, cache=True)
def _wgrad_cols(dy, cols, width):
    """Weight gradient reusing the forward patch matrix."""
    n, co, ho, wo = dy.shape
    span = ho * wo
    partial = np.empty((n, co, width), dtype=dy.dtype)
    for b in prange(n):
        dyn = np.empty((co, span), dtype=dy.dtype)
        for c in range(co):
            for r in range(span):
                dyn[c, r] = dy[b, c, r // wo, r % wo]
        partial[b] = np.dot(dyn, cols[b * span:(b + 1) * span])
    return partial


@njit(parallel=True, cache=True)
def _in_fwd(x, gamma, beta, eps):
    n, c, h, w = x.shape
    span = h * w
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    istd = np.empty((n, c), dtype=x.dtype)
    for nc in prange(n * c):
        b = nc // c
        ch = nc % c
        plane = x[b, ch]
        s = 0.0
        s2 = 0.0
        for i in range(h):
            for j in range(w):
                v = plane[i, j]
                s += v
                s2 += v * v
        mu = s / span
        inv = 1.0 / np.sqrt(s2 / span - mu * mu + eps)
        g = gamma[ch]
        bb = beta[ch]
        for i in range(h):
            for j in range(w):
                xh = (plane[i, j] - mu) * inv
                xhat[b, ch, i, j] = xh
                y[b, ch, i, j] = xh * g + bb
        istd[b, ch] = inv
    return y, xhat, istd


@njit(parallel=True, cache=True)
def _in_bwd(dy, xhat, istd, gamma):
    n, c, h, w = dy.shape
    span = h * w
    dx = np.empty_like(dy)
    dg_part = np.empty((n, c), dtype=dy.dtype)
    db_part = np.empty((n, c), dtype=dy.dtype)
    for nc in prange(n * c):
        b = nc // c
        ch = nc % c
        g = gamma[ch]
        s1 = 0.0
        s2 = 0.0
        sb = 0.0
        for i in range(h):
            for j in range(w):
                d = dy[b, ch, i, j]
                xh = xhat[b, ch, i, j]
                sb += d
                s2 += d * xh
        s1 = sb * g
        sxh = s2 * g
        inv = istd[b, ch]
        for i in range(h):
            for j in range(w):
                dxh = dy[b, ch, i, j] * g
                dx[b, ch, i, j] = inv * (dxh - s1 / span - xhat[b, ch, i, j] * (sxh / span))
        dg_part[b, ch] = s2
        db_part[b, ch] = sb
    return dx, dg_part, db_part


def instance_norm_fwd(x, gamma, beta, eps):
    """Returns (y, xhat, istd) with per-(sample, channel) spatial stats."""
    with _entry_lock:
        return _in_fwd(np.ascontiguousarray(x), gamma, beta, eps)


def instance_norm_bwd(dy, xhat, istd, gamma):
    """Returns (dx, dgamma, dbeta)."""
    with _entry_lock:
        dx, dg_part, db_part = _in_bwd(np.ascontiguousarray(dy), xhat, istd, gamma)
    return dx, dg_part.sum(axis=0), db_part.sum(axis=0)


def _out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def _fwd_taploop(x, w, pad, ho, wo):
    """Per-tap channel contraction; efficient when Co is tiny (stride 1)."""
    n, ci = x.shape[0], x.shape[1]
    co, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    y = np.zeros((n, co, ho, wo), dtype=x.dtype)
    yf = y.reshape(n, co, ho * wo)
    for i in range(kh):
        for j in range(kw):
            block = np.ascontiguousarray(xp[:, :, i:i + ho, j:j + wo]).reshape(n, ci, -1)
            yf += np.matmul(w[None, :, :, i, j], block)
    return y


def conv2d_fwd(x, w, stride, pad, return_cols=False):
    co, ci, kh, kw = w.shape
    ho = _out_size(x.shape[2], kh, stride, pad)
    wo = _out_size(x.shape[3], kw, stride, pad)
    x = np.ascontiguousarray(x)
    if not return_cols and stride == 1 and co <= 4 and kh * kw >= 9 and ci > co:
        return _fwd_taploop(x, np.ascontiguousarray(w), pad, ho, wo)
    w2t = np.ascontiguousarray(w.reshape(co, ci * kh * kw).T)
    with _entry_lock:
        if return_cols:
            return _fwd_keep(x, w2t, kh, kw, stride, pad, ho, wo)
        return _fwd(x, w2t, kh, kw, stride, pad, ho, wo)


def conv2d_dgrad(dy, w, stride, pad, h, w_in):
    co, ci, kh, kw = w.shape
    dy = np.ascontiguousarray(dy)
    if stride == 1 and co < ci and kh == kw:
        # gather form: forward conv with the flipped, channel-swapped kernel
        wt = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        return conv2d_fwd(dy, wt, 1, kh - 1 - pad)
    w2 = np.ascontiguousarray(w.reshape(co, ci * kh * kw))
    with _entry_lock:
        return _dgrad(dy, w2, ci, kh, kw, stride, pad, h, w_in)


def conv2d_wgrad(dy, x, kh, kw, stride, pad, cols=None):
    n, co = dy.shape[0], dy.shape[1]
    ci = x.shape[1]
    dy = np.ascontiguousarray(dy)
    with _entry_lock:
        if cols is not None:
            partial = _wgrad_cols(dy, cols, ci * kh * kw)
        else:
            partial = _wgrad(dy, np.ascontiguousarray(x), kh, kw, stride, pad)
    return partial.sum(axis=0).reshape(co, ci, kh, kw)
