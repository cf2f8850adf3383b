"""Pure Python / numpy versions of the compiled kernels in ``_kernels.pyx``.

The SMO and SGD loops follow the compiled code statement for statement so the
two backends agree to the last bit on identical input.
"""
import math

import numpy as np


def smo_solve(K, y, C, tol, max_iter):
    K = np.ascontiguousarray(K, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    n = y.shape[0]
    alpha = np.zeros(n)
    G = -np.ones(n)
    diag = K.diagonal().copy()
    pos = y > 0
    tau = 1e-12
    it = 0
    while it < max_iter:
        up = (pos & (alpha < C)) | (~pos & (alpha > 0))
        low = (pos & (alpha > 0)) | (~pos & (alpha < C))
        score = -y * G
        if not up.any() or not low.any():
            break
        up_idx = np.flatnonzero(up)
        i = int(up_idx[np.argmax(score[up_idx])])
        g_max = score[i]
        low_idx = np.flatnonzero(low)
        g_min = score[low_idx].min()
        b = g_max - score[low_idx]
        cand = b > 0
        if g_max - g_min < tol or not cand.any():
            break
        cidx = low_idx[cand]
        a = K[i, i] + diag[cidx] - 2.0 * K[i, cidx]
        a = np.where(a <= 0, tau, a)
        obj = -(b[cand] * b[cand]) / a
        j = int(cidx[np.argmin(obj)])
        it += 1

        yi, yj = y[i], y[j]
        old_ai, old_aj = alpha[i], alpha[j]
        ai, aj = old_ai, old_aj
        if yi != yj:
            quad = K[i, i] + K[j, j] - 2.0 * K[i, j]
            if quad <= 0:
                quad = tau
            delta = (-G[i] - G[j]) / quad
            diff = ai - aj
            ai += delta
            aj += delta
            if diff > 0:
                if aj < 0:
                    aj, ai = 0.0, diff
            elif ai < 0:
                ai, aj = 0.0, -diff
            if diff > 0:
                if ai > C:
                    ai, aj = C, C - diff
            elif aj > C:
                aj, ai = C, C + diff
        else:
            quad = K[i, i] + K[j, j] - 2.0 * K[i, j]
            if quad <= 0:
                quad = tau
            delta = (G[i] - G[j]) / quad
            total = ai + aj
            ai -= delta
            aj += delta
            if total > C:
                if ai > C:
                    ai, aj = C, total - C
            elif aj < 0:
                aj, ai = 0.0, total
            if total > C:
                if aj > C:
                    aj, ai = C, total - C
            elif ai < 0:
                ai, aj = 0.0, total
        alpha[i], alpha[j] = ai, aj
        d_ai = ai - old_ai
        d_aj = aj - old_aj
        G += y * (yi * K[:, i] * d_ai + yj * K[:, j] * d_aj)
    return alpha, _bias(alpha, G, y, C), it


def _bias(alpha, G, y, C):
    ub, lb, s, n_free = math.inf, -math.inf, 0.0, 0
    for a, g, yt in zip(alpha.tolist(), G.tolist(), y.tolist()):
        yg = yt * g
        if 0 < a < C:
            n_free += 1
            s += yg
        elif (a >= C and yt < 0) or (a <= 0 and yt > 0):
            ub = min(ub, yg)
        else:
            lb = max(lb, yg)
    if n_free:
        return -s / n_free
    return -(ub + lb) / 2.0


def hinge_sgd(X, y, order, lr, l2):
    X = np.asarray(X, dtype=np.float64).tolist()
    y = np.asarray(y, dtype=np.float64).tolist()
    d = len(X[0])
    w = [0.0] * d
    b = 0.0
    for epoch in np.asarray(order).tolist():
        for idx in epoch:
            x, yt = X[idx], y[idx]
            margin = b
            for k in range(d):
                margin += w[k] * x[k]
            margin *= yt
            for k in range(d):
                w[k] -= lr * l2 * w[k]
            if margin < 1.0:
                for k in range(d):
                    w[k] += lr * yt * x[k]
                b += lr * yt
    return np.array(w), b


def keys_kernel(x):
    x = np.abs(x)
    return np.where(
        x <= 1.0,
        (1.5 * x - 2.5) * x * x + 1.0,
        np.where(x < 2.0, ((-0.5 * x + 2.5) * x - 4.0) * x + 2.0, 0.0),
    )


def interp_matrix(n_in, n_out):
    """Linear map taking ``n_in`` samples to ``n_out`` corner-aligned samples."""
    scale = (n_in - 1.0) / (n_out - 1.0) if n_out > 1 else 0.0
    src = np.arange(n_out) * scale
    base = np.minimum(np.floor(src).astype(int), n_in - 2)
    frac = src - base
    W = np.zeros((n_out, n_in))
    # out-of-range taps expressed through the border extrapolation rule
    if n_in > 2:
        left = {0: 3.0, 1: -3.0, 2: 1.0}
        right = {n_in - 1: 3.0, n_in - 2: -3.0, n_in - 3: 1.0}
    else:
        left = {0: 2.0, 1: -1.0}
        right = {n_in - 1: 2.0, n_in - 2: -1.0}
    for r in range(n_out):
        for m in range(-1, 3):
            wgt = float(keys_kernel(frac[r] - m))
            c = base[r] + m
            if c < 0:
                for k, v in left.items():
                    W[r, k] += wgt * v
            elif c >= n_in:
                for k, v in right.items():
                    W[r, k] += wgt * v
            else:
                W[r, c] += wgt
    return W


def bicubic_resize(M, out_rows, out_cols):
    M = np.asarray(M, dtype=np.float64)
    return interp_matrix(M.shape[0], out_rows) @ M @ interp_matrix(M.shape[1], out_cols).T


def col2im(cols, out, stride):
    k = cols.shape[4]
    oh, ow = cols.shape[1], cols.shape[2]
    cols = cols.transpose(0, 3, 4, 5, 1, 2)  # N, C, k, k, oh, ow
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[:, :, i, j]
    return out


def im2col(xp, out, k, stride, oh, ow):
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : stride * (oh - 1) + 1 : stride, : stride * (ow - 1) + 1 : stride]
    out[...] = win.transpose(0, 2, 3, 1, 4, 5).reshape(out.shape)
    return out
