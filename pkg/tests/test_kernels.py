"""The compiled kernels and their numpy twins must agree."""
import numpy as np
import pytest

from audiomaepp import kernels

pytestmark = pytest.mark.skipif(not kernels.compiled_available(), reason="extension not built")

PY = kernels.backend_module("python")


def _c():
    return kernels.backend_module("compiled")


@pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-5), (np.float64, 1e-12)])
def test_backends_agree(rng, dtype, tol):
    x = rng.standard_normal((5, 7, 12)).astype(dtype)
    g = rng.standard_normal((5, 7, 12)).astype(dtype)
    dy = rng.standard_normal((5, 7, 12)).astype(dtype)
    scale = rng.standard_normal(12).astype(dtype)
    shift = rng.standard_normal(12).astype(dtype)
    pairs = [
        (kernels.gelu(x, impl=PY), kernels.gelu(x, impl=_c())),
        (kernels.gelu_backward(x, dy, impl=PY), kernels.gelu_backward(x, dy, impl=_c())),
        (kernels.swiglu_gate(x, g, impl=PY), kernels.swiglu_gate(x, g, impl=_c())),
        (kernels.softmax(x, impl=PY), kernels.softmax(x, impl=_c())),
    ]
    pairs += list(zip(kernels.swiglu_gate_backward(x, g, dy, impl=PY),
                      kernels.swiglu_gate_backward(x, g, dy, impl=_c())))
    p = kernels.softmax(x, impl=PY)
    pairs.append((kernels.softmax_backward(p, dy, 0.5, impl=PY), kernels.softmax_backward(p, dy, 0.5, impl=_c())))
    ln_py = kernels.layer_norm(x, scale, shift, 1e-6, impl=PY)
    ln_c = kernels.layer_norm(x, scale, shift, 1e-6, impl=_c())
    pairs += list(zip(ln_py, ln_c))
    pairs += list(zip(kernels.layer_norm_backward(dy, ln_py[1], ln_py[2], scale, impl=PY),
                      kernels.layer_norm_backward(dy, ln_c[1], ln_c[2], scale, impl=_c())))
    for a, b in pairs:
        assert a.shape == b.shape and a.dtype == b.dtype
        assert np.allclose(a, b, rtol=tol, atol=tol)


def test_softmax_is_stable_for_large_logits():
    s = np.array([[1000.0, 1000.0, -1000.0]])
    for impl in (PY, _c()):
        assert np.allclose(kernels.softmax(s, impl=impl), [[0.5, 0.5, 0.0]])


def test_backend_override_env(monkeypatch):
    import importlib
    monkeypatch.setenv("AMPP_KERNELS", "python")
    mod = importlib.reload(kernels)
    try:
        assert mod.BACKEND == "python"
    finally:
        monkeypatch.delenv("AMPP_KERNELS")
        importlib.reload(kernels)


def test_default_dispatch_mixes_backends(monkeypatch):
    import importlib
    if not kernels.compiled_available():
        pytest.skip("compiled extension not built")
    monkeypatch.delenv("AMPP_KERNELS", raising=False)
    mod = importlib.reload(kernels)
    try:
        assert mod.BACKEND == "mixed"
        assert mod._impl.softmax_rows is PY.softmax_rows
        assert mod._impl.layer_norm_rows is mod.backend_module("compiled").layer_norm_rows
        monkeypatch.setenv("AMPP_KERNELS", "compiled")
        mod = importlib.reload(kernels)
        assert mod._impl is mod.backend_module("compiled")
    finally:
        monkeypatch.delenv("AMPP_KERNELS", raising=False)
        importlib.reload(kernels)
