"""Backend selection for the hot loops.

The compiled extension is used when it imports; otherwise, or when the
environment variable ``MSFUSION_PURE_PYTHON`` is set to a non-empty value
other than ``0``, the numpy fallback is used. ``BACKEND`` names the active one.
"""
import os

import numpy as np

from . import _fallback

_force_pure = os.environ.get("MSFUSION_PURE_PYTHON", "") not in ("", "0")

try:
    from . import _kernels as _compiled
except ImportError:
    _compiled = None

if _compiled is None or _force_pure:
    _impl = _fallback
    BACKEND = "python"
else:
    _impl = _compiled
    BACKEND = "compiled"


def smo_solve(K, y, C, tol=1e-3, max_iter=1_000_000, backend=None):
    impl = _select(backend)
    K = np.ascontiguousarray(K, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    return impl.smo_solve(K, y, float(C), float(tol), int(max_iter))


def hinge_sgd(X, y, order, lr, l2, backend=None):
    impl = _select(backend)
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    order = np.ascontiguousarray(order, dtype=np.int64)
    return impl.hinge_sgd(X, y, order, float(lr), float(l2))


def bicubic_resize(M, out_rows, out_cols, backend=None):
    impl = _select(backend)
    M = np.ascontiguousarray(M, dtype=np.float64)
    return impl.bicubic_resize(M, int(out_rows), int(out_cols))


def im2col(xp, k, stride, oh, ow, backend=None):
    """Patches of ``xp`` (N, C, Hp, Wp) as rows of an (N*oh*ow, C*k*k) matrix."""
    impl = _select(backend)
    xp = np.ascontiguousarray(xp)
    n, c = xp.shape[:2]
    out = np.empty((n * oh * ow, c * k * k), dtype=xp.dtype)
    if xp.dtype not in (np.float32, np.float64):
        return _fallback.im2col(xp, out, int(k), int(stride), int(oh), int(ow))
    impl.im2col(xp, out, int(k), int(stride), int(oh), int(ow))
    return out


def col2im(cols, shape, stride, backend=None):
    """Adjoint of im2col: cols (N, oh, ow, C, k, k) summed into a zero array of ``shape``."""
    impl = _select(backend)
    cols = np.ascontiguousarray(cols)
    out = np.zeros(shape, dtype=cols.dtype)
    if cols.dtype not in (np.float32, np.float64):
        return _fallback.col2im(cols, out, int(stride))
    impl.col2im(cols, out, int(stride))
    return out


def _select(backend):
    if backend is None:
        return _impl
    if backend == "python":
        return _fallback
    if backend == "compiled":
        if _compiled is None:
            raise ImportError("compiled kernels are not built")
        return _compiled
    raise ValueError(f"unknown backend {backend!r}")
