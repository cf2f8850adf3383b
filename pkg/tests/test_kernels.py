"""Compiled and pure-Python kernels must agree."""
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from msfusion import _fallback, kernels
from msfusion.classifiers import gaussian_kernel

compiled = pytest.mark.skipif(kernels._compiled is None, reason="compiled extension not built")


def test_backend_name():
    assert kernels.BACKEND in ("compiled", "python")
    with pytest.raises(ValueError):
        kernels.smo_solve(np.eye(2), np.array([1.0, -1.0]), 1.0, backend="fortran")


@compiled
@given(st.integers(0, 2**31 - 1), st.integers(4, 40), st.sampled_from([0.1, 1.0, 10.0, 1000.0]))
def test_smo_backends_identical(seed, n, C):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, 3))
    y = np.where(rng.random(n) < 0.5, 1.0, -1.0)
    y[:2] = [1.0, -1.0]
    K = gaussian_kernel(X, X, 0.5)
    a1, b1, it1 = kernels.smo_solve(K, y, C, backend="python")
    a2, b2, it2 = kernels.smo_solve(K, y, C, backend="compiled")
    assert it1 == it2
    assert np.array_equal(a1, a2) and b1 == b2


@compiled
def test_hinge_sgd_backends_identical(rng):
    S = rng.standard_normal((50, 3))
    y = np.sign(S[:, 0] + 0.1)
    order = np.stack([rng.permutation(50) for _ in range(10)])
    w1, b1 = kernels.hinge_sgd(S, y, order, 1e-2, 1e-3, backend="python")
    w2, b2 = kernels.hinge_sgd(S, y, order, 1e-2, 1e-3, backend="compiled")
    assert np.allclose(w1, w2, rtol=0, atol=1e-12) and abs(b1 - b2) < 1e-12


@compiled
@given(st.integers(2, 20), st.integers(2, 20), st.integers(1, 40), st.integers(1, 40), st.integers(0, 2**31 - 1))
def test_bicubic_backends_agree(h, w, oh, ow, seed):
    M = np.random.default_rng(seed).standard_normal((h, w))
    a = kernels.bicubic_resize(M, oh, ow, backend="python")
    b = kernels.bicubic_resize(M, oh, ow, backend="compiled")
    assert np.allclose(a, b, rtol=0, atol=1e-12)


def test_keys_kernel_values():
    k = _fallback.keys_kernel
    assert k(0.0) == 1.0
    assert k(1.0) == 0.0 and k(2.0) == 0.0 and k(-1.0) == 0.0
    # partition of unity at any offset
    for t in np.linspace(0, 1, 7):
        assert sum(k(t - m) for m in range(-1, 3)) == pytest.approx(1.0, abs=1e-15)


@compiled
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_im2col_col2im_backends(dtype, rng):
    xp = rng.standard_normal((2, 3, 9, 8)).astype(dtype)
    oh, ow = 4, 3
    a = kernels.im2col(xp, 3, 2, oh, ow, backend="python")
    b = kernels.im2col(xp, 3, 2, oh, ow, backend="compiled")
    assert np.array_equal(a, b)
    cols = rng.standard_normal((2, oh, ow, 3, 3, 3)).astype(dtype)
    c = kernels.col2im(cols, xp.shape, 2, backend="python")
    d = kernels.col2im(cols, xp.shape, 2, backend="compiled")
    tol = 1e-5 if dtype == np.float32 else 1e-12
    assert np.allclose(c, d, rtol=0, atol=tol)


@pytest.mark.parametrize("backend", ["python"] + (["compiled"] if kernels._compiled is not None else []))
def test_col2im_is_adjoint_of_im2col(backend, rng):
    # <im2col(x), c> == <x, col2im(c)>
    x = rng.standard_normal((2, 3, 9, 9))
    oh = ow = 4
    cols = rng.standard_normal((2 * oh * ow, 3 * 9))
    lhs = np.sum(kernels.im2col(x, 3, 2, oh, ow, backend=backend) * cols)
    rhs = np.sum(x * kernels.col2im(cols.reshape(2, oh, ow, 3, 3, 3), x.shape, 2, backend=backend))
    assert lhs == pytest.approx(rhs, rel=1e-12)
