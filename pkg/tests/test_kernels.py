import os
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hawqkit import _pykernels as py
from hawqkit import kernels

try:
    from hawqkit import _ckernels as cy
except ImportError:  # pragma: no cover - only without a compiler
    cy = None

needs_cython = pytest.mark.skipif(cy is None, reason="compiled kernels not built")

conv_shapes = st.tuples(st.integers(1, 3), st.integers(1, 3), st.integers(3, 7),
                        st.integers(3, 7), st.sampled_from([1, 3]), st.integers(1, 2),
                        st.integers(0, 1))


def test_backend_selected():
    assert kernels.BACKEND in ("cython", "python")
    forced = os.environ.get("HAWQKIT_PURE", "") in ("1", "true", "yes")
    if cy is not None:
        assert kernels.BACKEND == ("python" if forced else "cython")


@needs_cython
@given(conv_shapes, st.integers(0, 2 ** 16))
def test_im2col_col2im_identical_across_backends(shape, seed):
    n, c, h, w, k, stride, pad = shape
    x = np.random.default_rng(seed).standard_normal((n, c, h, w))
    a, b = py.im2col(x, k, k, stride, pad), cy.im2col(x, k, k, stride, pad)
    assert np.array_equal(a, b)
    cols = np.random.default_rng(seed + 1).standard_normal(a.shape)
    assert np.array_equal(py.col2im(cols, x.shape, k, k, stride, pad),
                          cy.col2im(cols, x.shape, k, k, stride, pad))


@needs_cython
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=50), st.integers(2, 8),
       st.floats(0.01, 5))
def test_quantize_identical_across_backends(vals, bits, clip):
    z = np.array(vals)
    levels = 2.0 ** (bits - 1) - 1
    s = clip / levels
    a, b = py.quantize_symmetric(z, s, levels), cy.quantize_symmetric(z, s, levels)
    assert np.array_equal(a, b) and np.array_equal(np.signbit(a), np.signbit(b))
    assert np.array_equal(py.quantize_sign(z, s), cy.quantize_sign(z, s))
    assert np.array_equal(py.clip_mask(z, clip), cy.clip_mask(z, clip))


@given(conv_shapes, st.integers(0, 2 ** 16))
def test_col2im_is_adjoint_of_im2col(shape, seed):
    n, c, h, w, k, stride, pad = shape
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, c, h, w))
    cols = kernels.im2col(x, k, k, stride, pad)
    r = rng.standard_normal(cols.shape)
    lhs = float(np.sum(cols * r))
    rhs = float(np.sum(x * kernels.col2im(r, x.shape, k, k, stride, pad)))
    assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-10)


def test_im2col_matches_direct_convolution():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 5, 5))
    w = rng.standard_normal((4, 3, 3, 3))
    cols = kernels.im2col(x, 3, 3, 1, 1)
    out = (cols @ w.reshape(4, -1).T).reshape(2, 5, 5, 4).transpose(0, 3, 1, 2)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 5, 5))
    for i in range(5):
        for j in range(5):
            ref[:, :, i, j] = np.einsum("nchw,fchw->nf", xp[:, :, i:i + 3, j:j + 3], w)
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_pure_fallback_selected_by_env(monkeypatch):
    import importlib

    monkeypatch.setenv("HAWQKIT_PURE", "1")
    mod = importlib.reload(kernels)
    try:
        assert mod.BACKEND == "python"
    finally:
        monkeypatch.delenv("HAWQKIT_PURE")
        importlib.reload(kernels)
