import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedtan import kernels
from fedtan.kernels import _bn_py

BACKENDS = kernels.available_backends()


def _inputs(seed, batch, features):
    rng = np.random.default_rng(seed)
    y = rng.normal(size=(batch, features)) * rng.uniform(0.1, 3, features) + rng.normal(size=features)
    gamma, beta = rng.normal(size=features), rng.normal(size=features)
    g = rng.normal(size=(batch, features))
    return y, gamma, beta, g


def _run_all(mod, y, gamma, beta, g, eps=1e-5):
    mean, var = mod.bn_moments(y)
    out, norm = mod.bn_normalize(y, mean, var, gamma, beta, eps)
    d_mean, d_var, d_gamma, d_beta = mod.bn_stat_grads(g, y, norm, mean, var, gamma, eps)
    d_in = mod.bn_input_grad(g, y, mean, var, gamma, eps, d_mean, d_var)
    return [mean, var, mod.column_mean(y), mod.centered_variance(y, mean),
            out, norm, d_mean, d_var, d_gamma, d_beta, d_in]


def test_backend_selected():
    assert kernels.BACKEND in BACKENDS


def test_python_moments_match_numpy():
    y, *_ = _inputs(0, 9, 4)
    mean, var = _bn_py.bn_moments(y)
    np.testing.assert_allclose(mean, y.mean(0), rtol=1e-14)
    np.testing.assert_allclose(var, y.var(0), rtol=1e-13)


@pytest.mark.skipif("cython" not in BACKENDS, reason="extension not built")
@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10 ** 6), batch=st.integers(1, 40), features=st.integers(1, 12))
def test_backends_agree(seed, batch, features):
    args = _inputs(seed, batch, features)
    for a, b in zip(_run_all(_bn_py, *args), _run_all(BACKENDS["cython"], *args)):
        np.testing.assert_allclose(np.asarray(a), np.asarray(b), rtol=1e-12, atol=1e-12)


def test_centered_variance_about_other_center():
    y = np.array([[1.0], [3.0]])
    for mod in BACKENDS.values():
        np.testing.assert_allclose(mod.centered_variance(y, np.array([3.0])), [2.0])
