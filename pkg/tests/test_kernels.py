import numpy as np
import pytest

from fsail import _kernels_py, kernels

BACKENDS = kernels.backends()
compiled = pytest.mark.skipif("cython" not in BACKENDS, reason="compiled kernels not built")


def inputs(seed, rows=37, cols=23):
    rng = np.random.default_rng(seed)
    return rng.normal(scale=3.0, size=(rows, cols)), rng.normal(size=(rows, cols)), rng.normal(size=cols), rng.normal(size=cols)


def test_backend_flag_matches_dispatch():
    expected = BACKENDS.get("cython", _kernels_py)
    assert kernels.softmax_rows_forward is expected.softmax_rows_forward
    assert kernels.BACKEND == ("cython" if "cython" in BACKENDS else "python")
    assert kernels.gelu_forward is _kernels_py.gelu_forward


@compiled
@pytest.mark.parametrize("seed", range(5))
def test_compiled_matches_numpy(seed):
    c, p = BACKENDS["cython"], _kernels_py
    x, gy, gain, bias = inputs(seed)
    np.testing.assert_allclose(c.softmax_rows_forward(x), p.softmax_rows_forward(x), rtol=0, atol=1e-14)
    y = p.softmax_rows_forward(x)
    np.testing.assert_allclose(c.softmax_rows_backward(y, gy), p.softmax_rows_backward(y, gy), atol=1e-14)
    np.testing.assert_allclose(c.log_softmax_rows(x), p.log_softmax_rows(x), atol=1e-13)
    for a, b in zip(c.layer_norm_forward(x, gain, bias, 1e-5), p.layer_norm_forward(x, gain, bias, 1e-5)):
        np.testing.assert_allclose(a, b, atol=1e-13)
    _, xhat, rstd = p.layer_norm_forward(x, gain, bias, 1e-5)
    for a, b in zip(c.layer_norm_backward(gy, xhat, rstd, gain), p.layer_norm_backward(gy, xhat, rstd, gain)):
        np.testing.assert_allclose(a, b, atol=1e-12)
    # the compiled tanh goes through exp, so it agrees to a few ulps, not one
    np.testing.assert_allclose(c.gelu_forward(x), p.gelu_forward(x), atol=1e-13)
    np.testing.assert_allclose(c.gelu_backward(x, gy), p.gelu_backward(x, gy), atol=1e-13)


@compiled
def test_compiled_is_deterministic():
    c = BACKENDS["cython"]
    x, gy, gain, bias = inputs(9)
    assert c.softmax_rows_forward(x).tobytes() == c.softmax_rows_forward(x).tobytes()
    a = c.layer_norm_backward(gy, *c.layer_norm_forward(x, gain, bias, 1e-5)[1:], gain)
    b = c.layer_norm_backward(gy, *c.layer_norm_forward(x, gain, bias, 1e-5)[1:], gain)
    assert all(u.tobytes() == v.tobytes() for u, v in zip(a, b))


@pytest.mark.parametrize("name", sorted(BACKENDS))
def test_softmax_saturated_rows(name):
    out = BACKENDS[name].softmax_rows_forward(np.array([[1000.0, 1000.0, -1000.0]]))
    np.testing.assert_allclose(out, [[0.5, 0.5, 0.0]], atol=1e-15)


@pytest.mark.parametrize("name", sorted(BACKENDS))
def test_gelu_reference_points(name):
    out = BACKENDS[name].gelu_forward(np.array([[0.0, 1.0, -1.0, 10.0]]))
    np.testing.assert_allclose(out, [[0.0, 0.8411919906082768, -0.15880800939172324, 10.0]], atol=1e-12)
