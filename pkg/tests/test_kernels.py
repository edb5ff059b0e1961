import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from usat import kernels as K


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 24), st.sampled_from([0.5, 1.0, 2.0, 4.0]), st.integers(0, 2**32 - 1))
def test_bilinear_parity(n, k, seed):
    src = np.random.default_rng(seed).standard_normal((n, n))
    out = max(1, int(n / k))
    np.testing.assert_allclose(K.bilinear_jit(src, out, out, k), K.bilinear_numpy(src, out, out, k), atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 1), min_size=1, max_size=60).filter(any))
def test_ap_sorted_parity(labels):
    a = np.array(labels, dtype=np.int8)
    assert K.ap_sorted_jit(a) == pytest.approx(K.ap_sorted_numpy(a), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 400), st.integers(0, 2**32 - 1))
def test_partial_shuffle_parity(n, seed):
    rng = np.random.default_rng(seed)
    draws = rng.integers(0, 2**63, size=int(rng.integers(0, n + 1)), dtype=np.uint64)
    np.testing.assert_array_equal(K.partial_shuffle_jit(n, draws), K.partial_shuffle_numpy(n, draws))


def test_gelu_parity():
    x = np.linspace(-8, 8, 2000).reshape(8, 250)
    np.testing.assert_allclose(K.gelu_jit(x), K.gelu_numpy(x), atol=1e-12)
    np.testing.assert_allclose(K.gelu_grad_jit(x), K.gelu_grad_numpy(x), atol=1e-12)


def test_gelu_float32_keeps_dtype():
    x = np.linspace(-3, 3, 64, dtype=np.float32)
    assert K.gelu(x).dtype == np.float32 and K.gelu_grad(x).dtype == np.float32


@pytest.mark.parametrize("p,b,d", [(4, 1, 3), (8, 2, 5), (20, 5, 2)])
def test_block_mean_parity(p, b, d):
    grid = np.random.default_rng(p).standard_normal((p, p, d))
    np.testing.assert_allclose(K.block_mean_jit(grid, b), K.block_mean_numpy(grid, b), atol=1e-13)


@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-12), (np.float32, 1e-6)])
def test_softmax_parity(dtype, tol):
    rng = np.random.default_rng(0)
    z = (3 * rng.standard_normal((2, 4, 9, 9))).astype(dtype)
    a_j, a_n = K.softmax_jit(z), K.softmax_numpy(z)
    np.testing.assert_allclose(a_j, a_n, atol=tol)
    np.testing.assert_allclose(a_j.sum(-1), 1.0, atol=tol)
    da = rng.standard_normal(z.shape).astype(dtype)
    np.testing.assert_allclose(K.softmax_bwd_jit(a_n, da, 0.5), K.softmax_bwd_numpy(a_n, da, 0.5), atol=tol)


def test_softmax_extreme_logits_stable():
    z = np.array([[1000.0, 0.0, -1000.0]])
    for fn in (K.softmax_jit, K.softmax_numpy):
        np.testing.assert_allclose(fn(z), [[1.0, 0.0, 0.0]], atol=1e-300)


def _bound_names(env_value):
    env = dict(os.environ, USAT_NO_JIT=env_value)
    code = "from usat import kernels as K, _jit; print(_jit.JIT_ENABLED, K.softmax.__name__, K.bilinear.__name__)"
    return subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True).stdout.split()


def test_env_flag_selects_numpy_path():
    assert _bound_names("1") == ["False", "softmax_numpy", "bilinear_numpy"]
    assert _bound_names("0") == ["True", "softmax_jit", "bilinear_jit"]
