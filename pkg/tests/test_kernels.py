"""Compiled and numpy kernel backends must agree."""
import numpy as np
import pytest

from fact import _pykernels, kernels

BACKENDS = kernels.available_backends()


def test_cython_backend_built():
    # the extension is part of the package build; a missing build is a packaging bug
    assert "cython" in BACKENDS


@pytest.fixture(params=sorted(BACKENDS))
def backend(request):
    return BACKENDS[request.param]


@pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-6), (np.float64, 1e-12)])
def test_elementwise_and_row_kernels_match_reference(backend, dtype, tol):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(7, 9)).astype(dtype)
    g = rng.normal(size=(7, 9)).astype(dtype)
    gamma = rng.normal(size=9).astype(dtype)
    beta = rng.normal(size=9).astype(dtype)
    ref = _pykernels

    np.testing.assert_allclose(backend.gelu_forward(x.ravel()), ref.gelu_forward(x.ravel()),
                               rtol=tol, atol=tol)
    np.testing.assert_allclose(backend.gelu_backward(x.ravel(), g.ravel()),
                               ref.gelu_backward(x.ravel(), g.ravel()), rtol=tol, atol=tol)
    y = backend.softmax_forward(x)
    np.testing.assert_allclose(y, ref.softmax_forward(x), rtol=tol, atol=tol)
    np.testing.assert_allclose(backend.softmax_backward(y, g), ref.softmax_backward(y, g),
                               rtol=10 * tol, atol=10 * tol)
    out, xhat, rstd = backend.layernorm_forward(x, gamma, beta, 1e-6)
    r_out, r_xhat, r_rstd = ref.layernorm_forward(x, gamma, beta, 1e-6)
    np.testing.assert_allclose(out, r_out, rtol=10 * tol, atol=10 * tol)
    got_grads = backend.layernorm_backward(g, xhat, rstd, gamma)
    want_grads = ref.layernorm_backward(g, r_xhat, r_rstd, gamma)
    for got, want in zip(got_grads, want_grads):
        np.testing.assert_allclose(got, want, rtol=100 * tol, atol=100 * tol)
    assert all(a.dtype == dtype for a in (out, xhat, rstd))


def test_adamw_kernel_matches_reference(backend):
    rng = np.random.default_rng(1)
    p0 = rng.normal(size=50).astype(np.float32)
    grads = [rng.normal(size=50).astype(np.float32) for _ in range(5)]
    p, m, v = p0.copy(), np.zeros(50, np.float32), np.zeros(50, np.float32)
    pr, mr, vr = p0.copy(), np.zeros(50, np.float32), np.zeros(50, np.float32)
    for step, g in enumerate(grads, start=1):
        backend.adamw_update(p, g, m, v, 1e-2, 0.9, 0.999, 1e-8, 1e-4, step)
        _pykernels.adamw_update(pr, g, mr, vr, 1e-2, 0.9, 0.999, 1e-8, 1e-4, step)
    np.testing.assert_allclose(p, pr, rtol=1e-5, atol=1e-6)
