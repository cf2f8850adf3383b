# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops: SMO dual solver, hinge-loss SGD, bicubic resize and
the col2im scatter-add behind convolution gradients.

Every routine here has a numpy twin in ``_fallback`` that performs the same
arithmetic in the same order; ``msfusion.kernels`` picks one at import.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, floor

cnp.import_array()

ctypedef cnp.float64_t f64


def smo_solve(const f64[:, ::1] K, const f64[::1] y, double C, double tol,
              long max_iter):
    """Solve the C-SVM dual with second-order working-set selection.

    Returns ``(alpha, b, n_iter)``.
    """
    cdef Py_ssize_t n = y.shape[0]
    cdef cnp.ndarray[f64, ndim=1] alpha_arr = np.zeros(n)
    cdef cnp.ndarray[f64, ndim=1] grad_arr = -np.ones(n)
    cdef f64[::1] alpha = alpha_arr
    cdef f64[::1] G = grad_arr
    cdef Py_ssize_t t, i, j
    cdef double g_max, g_min, v, obj_min, a, b_, tau = 1e-12
    cdef double Ki_i, Kj_j, Ki_j, old_ai, old_aj, delta, diff, total
    cdef double d_ai, d_aj, quad, yi, yj
    cdef long it = 0

    while it < max_iter:
        # i: maximal violator in I_up
        g_max = -1e300
        i = -1
        for t in range(n):
            if (y[t] > 0 and alpha[t] < C) or (y[t] < 0 and alpha[t] > 0):
                v = -y[t] * G[t]
                if v > g_max:
                    g_max = v
                    i = t
        # j: second-order choice in I_low
        g_min = 1e300
        obj_min = 1e300
        j = -1
        for t in range(n):
            if (y[t] > 0 and alpha[t] > 0) or (y[t] < 0 and alpha[t] < C):
                v = -y[t] * G[t]
                if v < g_min:
                    g_min = v
                b_ = g_max - v
                if i >= 0 and b_ > 0:
                    a = K[i, i] + K[t, t] - 2.0 * K[i, t]
                    if a <= 0:
                        a = tau
                    if -(b_ * b_) / a < obj_min:
                        obj_min = -(b_ * b_) / a
                        j = t
        if i < 0 or j < 0 or g_max - g_min < tol:
            break
        it += 1

        yi = y[i]
        yj = y[j]
        Ki_i = K[i, i]
        Kj_j = K[j, j]
        Ki_j = K[i, j]
        old_ai = alpha[i]
        old_aj = alpha[j]
        if yi != yj:
            quad = Ki_i + Kj_j - 2.0 * Ki_j
            if quad <= 0:
                quad = tau
            delta = (-G[i] - G[j]) / quad
            diff = alpha[i] - alpha[j]
            alpha[i] += delta
            alpha[j] += delta
            if diff > 0:
                if alpha[j] < 0:
                    alpha[j] = 0
                    alpha[i] = diff
            else:
                if alpha[i] < 0:
                    alpha[i] = 0
                    alpha[j] = -diff
            if diff > 0:
                if alpha[i] > C:
                    alpha[i] = C
                    alpha[j] = C - diff
            else:
                if alpha[j] > C:
                    alpha[j] = C
                    alpha[i] = C + diff
        else:
            quad = Ki_i + Kj_j - 2.0 * Ki_j
            if quad <= 0:
                quad = tau
            delta = (G[i] - G[j]) / quad
            total = alpha[i] + alpha[j]
            alpha[i] -= delta
            alpha[j] += delta
            if total > C:
                if alpha[i] > C:
                    alpha[i] = C
                    alpha[j] = total - C
            else:
                if alpha[j] < 0:
                    alpha[j] = 0
                    alpha[i] = total
            if total > C:
                if alpha[j] > C:
                    alpha[j] = C
                    alpha[i] = total - C
            else:
                if alpha[i] < 0:
                    alpha[i] = 0
                    alpha[j] = total

        d_ai = alpha[i] - old_ai
        d_aj = alpha[j] - old_aj
        for t in range(n):
            G[t] += y[t] * (yi * K[t, i] * d_ai + yj * K[t, j] * d_aj)

    return alpha_arr, _bias(alpha, G, y, C), it


cdef double _bias(f64[::1] alpha, f64[::1] G, const f64[::1] y, double C):
    cdef Py_ssize_t t, n = y.shape[0]
    cdef double ub = 1e300, lb = -1e300, s = 0.0, yg
    cdef long n_free = 0
    for t in range(n):
        yg = y[t] * G[t]
        if alpha[t] > 0 and alpha[t] < C:
            n_free += 1
            s += yg
        elif (alpha[t] >= C and y[t] < 0) or (alpha[t] <= 0 and y[t] > 0):
            if yg < ub:
                ub = yg
        else:
            if yg > lb:
                lb = yg
    if n_free > 0:
        return -s / n_free
    return -(ub + lb) / 2.0


def hinge_sgd(const f64[:, ::1] X, const f64[::1] y, const cnp.int64_t[:, ::1] order,
              double lr, double l2):
    """Plain SGD on ``max(0, 1 - y (w.x + b)) + l2/2 |w|^2``.

    ``order`` holds one visiting permutation per epoch.
    """
    cdef Py_ssize_t n_epochs = order.shape[0], n = X.shape[0], d = X.shape[1]
    cdef cnp.ndarray[f64, ndim=1] w_arr = np.zeros(d)
    cdef f64[::1] w = w_arr
    cdef double b = 0.0, margin
    cdef Py_ssize_t e, s, k, idx
    for e in range(n_epochs):
        for s in range(n):
            idx = order[e, s]
            margin = b
            for k in range(d):
                margin += w[k] * X[idx, k]
            margin *= y[idx]
            for k in range(d):
                w[k] -= lr * l2 * w[k]
            if margin < 1.0:
                for k in range(d):
                    w[k] += lr * y[idx] * X[idx, k]
                b += lr * y[idx]
    return w_arr, b


cdef inline double _keys(double x):
    # a = -0.5
    x = fabs(x)
    if x <= 1.0:
        return (1.5 * x - 2.5) * x * x + 1.0
    if x < 2.0:
        return ((-0.5 * x + 2.5) * x - 4.0) * x + 2.0
    return 0.0


cdef inline double _tap(const f64[:, ::1] M, Py_ssize_t r, Py_ssize_t c):
    # Columns outside the grid are cubic-extrapolated from the three nearest
    # interior ones, which keeps quadratics exact up to the border.
    cdef Py_ssize_t n = M.shape[1]
    if c < 0:
        if n > 2:
            return 3.0 * M[r, 0] - 3.0 * M[r, 1] + M[r, 2]
        return 2.0 * M[r, 0] - M[r, 1]
    if c >= n:
        if n > 2:
            return 3.0 * M[r, n - 1] - 3.0 * M[r, n - 2] + M[r, n - 3]
        return 2.0 * M[r, n - 1] - M[r, n - 2]
    return M[r, c]


def _resize_axis1(const f64[:, ::1] M, Py_ssize_t out_cols):
    cdef Py_ssize_t rows = M.shape[0], cols = M.shape[1]
    cdef cnp.ndarray[f64, ndim=2] out_arr = np.empty((rows, out_cols))
    cdef f64[:, ::1] out = out_arr
    cdef Py_ssize_t r, c, base, m
    cdef double scale = (cols - 1.0) / (out_cols - 1.0) if out_cols > 1 else 0.0
    cdef double src, frac, acc
    for c in range(out_cols):
        src = c * scale
        base = <Py_ssize_t>floor(src)
        if base > cols - 2:
            base = cols - 2
        frac = src - base
        for r in range(rows):
            acc = 0.0
            for m in range(-1, 3):
                acc += _keys(frac - m) * _tap(M, r, base + m)
            out[r, c] = acc
    return out_arr


def bicubic_resize(const f64[:, ::1] M, Py_ssize_t out_rows, Py_ssize_t out_cols):
    """Separable Keys-cubic resize with corner-aligned sampling."""
    cdef cnp.ndarray[f64, ndim=2] tmp = _resize_axis1(M, out_cols)
    return np.ascontiguousarray(_resize_axis1(np.ascontiguousarray(tmp.T), out_rows).T)


ctypedef fused real:
    cnp.float32_t
    cnp.float64_t


def col2im(const real[:, :, :, :, :, ::1] cols, real[:, :, :, ::1] out,
           Py_ssize_t stride):
    """Scatter-add ``cols`` (N, oh, ow, C, k, k) into ``out`` (N, C, H, W)."""
    cdef Py_ssize_t N = cols.shape[0], oh = cols.shape[1], ow = cols.shape[2]
    cdef Py_ssize_t C = cols.shape[3], k = cols.shape[4]
    cdef Py_ssize_t n, y, x, c, i, j, r0, c0
    with nogil:
        for n in range(N):
            for c in range(C):
                for y in range(oh):
                    r0 = y * stride
                    for x in range(ow):
                        c0 = x * stride
                        for i in range(k):
                            for j in range(k):
                                out[n, c, r0 + i, c0 + j] += cols[n, y, x, c, i, j]
    return out


def im2col(const real[:, :, :, ::1] xp, real[:, ::1] out, Py_ssize_t k,
           Py_ssize_t stride, Py_ssize_t oh, Py_ssize_t ow):
    """Gather (N, C, Hp, Wp) patches into ``out`` (N*oh*ow, C*k*k)."""
    cdef Py_ssize_t N = xp.shape[0], C = xp.shape[1]
    cdef Py_ssize_t n, y, x, c, i, j, row, col, r0, c0
    with nogil:
        for n in range(N):
            for y in range(oh):
                r0 = y * stride
                for x in range(ow):
                    c0 = x * stride
                    row = (n * oh + y) * ow + x
                    col = 0
                    for c in range(C):
                        for i in range(k):
                            for j in range(k):
                                out[row, col] = xp[n, c, r0 + i, c0 + j]
                                col += 1
    return out
