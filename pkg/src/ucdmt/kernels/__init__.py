"""Backend dispatch for the convolution hot kernels.

The active backend is chosen once, at first use, from the UCDMT_KERNELS
environment variable:

    UCDMT_KERNELS=numba   jitted kernels (default when numba imports)
    UCDMT_KERNELS=numpy   pure-numpy im2col fallback

``python -m ucdmt.bench`` times both backends side by side.
"""

import os

from ucdmt.kernels import numpy_backend

_active = None


def _resolve(name):
    if name == "numpy":
        return numpy_backend
    if name == "numba":
        from ucdmt.kernels import numba_backend
        return numba_backend
    raise ValueError(f"unknown kernel backend {name!r} (expected numba or numpy)")


def get_backend():
    """Return the active kernel module, resolving UCDMT_KERNELS on first call."""
    global _active
    if _active is None:
        requested = os.environ.get("UCDMT_KERNELS", "auto").lower()
        if requested == "auto":
            try:
                _active = _resolve("numba")
            except ImportError:
                _active = numpy_backend
        else:
            _active = _resolve(requested)
    return _active


def set_backend(name):
    """Force a backend (tests and the benchmark use this)."""
    global _active
    _active = _resolve(name)
    return _active


def conv2d_fwd(x, w, stride, pad, return_cols=False):
    return get_backend().conv2d_fwd(x, w, stride, pad, return_cols=return_cols)


def conv2d_dgrad(dy, w, stride, pad, h, w_in):
    return get_backend().conv2d_dgrad(dy, w, stride, pad, h, w_in)


def conv2d_wgrad(dy, x, kh, kw, stride, pad, cols=None):
    return get_backend().conv2d_wgrad(dy, x, kh, kw, stride, pad, cols=cols)


def instance_norm_fwd(x, gamma, beta, eps):
    return get_backend().instance_norm_fwd(x, gamma, beta, eps)


def instance_norm_bwd(dy, xhat, istd, gamma):
    return get_backend().instance_norm_bwd(dy, xhat, istd, gamma)
