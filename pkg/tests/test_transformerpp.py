import math

import numpy as np
import pytest

from audiomaepp import transformerpp as tpp


def _params(d, rng, scale=0.2, pre_ln=True):
    return {k: rng.standard_normal(s) * scale for k, s in tpp.block_param_shapes(d, pre_ln).items()}


@pytest.mark.parametrize("d,h", [(192, 512), (768, 2048), (1024, 2736), (8, 24)])
def test_swiglu_hidden_width(d, h):
    assert tpp.swiglu_hidden(d) == h


def test_gelu_matches_erf_definition(rng):
    x = rng.standard_normal(50) * 3
    ref = np.array([0.5 * v * (1 + math.erf(v / math.sqrt(2))) for v in x])
    assert np.allclose(tpp.gelu(x), ref, atol=1e-12)


def test_swish_grad_matches_finite_difference(rng):
    x = rng.standard_normal(20)
    h = 1e-6
    fd = (tpp.swish(x + h) - tpp.swish(x - h)) / (2 * h)
    assert np.allclose(tpp.swish_grad(x), fd, atol=1e-8)


def test_rope_is_orthogonal_and_inverse_undoes_it(rng):
    table = tpp.rope_table(32, 8)
    x = rng.standard_normal((6, 3, 8))
    pos = rng.integers(0, 32, 6)
    r = tpp.rope_rotate(x, pos, table)
    assert np.allclose(np.linalg.norm(r, axis=-1), np.linalg.norm(x, axis=-1), rtol=0, atol=1e-13)
    assert np.allclose(tpp.rope_rotate(r, pos, table, inverse=True), x, atol=1e-13)


def test_rope_scores_depend_on_relative_position(rng):
    table = tpp.rope_table(100, 8)
    q = rng.standard_normal((1, 1, 8))
    k = rng.standard_normal((1, 1, 8))

    def score(m, n):
        return float((tpp.rope_rotate(q, [m], table) * tpp.rope_rotate(k, [n], table)).sum())

    assert score(3, 10) == pytest.approx(score(33, 40), abs=1e-10)


def test_rope_rejects_odd_head_dim_and_out_of_range(rng):
    with pytest.raises(ValueError):
        tpp.rope_table(8, 7)
    with pytest.raises(ValueError):
        tpp.rope_rotate(rng.standard_normal((2, 1, 4)), [0, 8], tpp.rope_table(8, 4))


def test_attention_rows_are_distributions(rng):
    p = {k.split(".", 1)[1]: v for k, v in _params(16, rng).items() if k.startswith("attn.")}
    probs = tpp.attention_probs(rng.standard_normal((2, 5, 16)), p, heads=4)
    assert probs.shape == (2, 4, 5, 5)
    assert np.allclose(probs.sum(-1), 1.0)


def test_block_output_is_layer_normalised(rng):
    d = 16
    p = _params(d, rng)
    p["ln_out.scale"] = np.ones(d)
    p["ln_out.shift"] = np.zeros(d)
    y, _ = tpp.block_forward(rng.standard_normal((3, 7, d)), p, 2)
    assert np.allclose(y.mean(-1), 0, atol=1e-10)
    assert np.allclose(y.std(-1), 1, atol=1e-4)


def test_block_is_permutation_equivariant_without_rope(rng):
    d = 16
    p = _params(d, rng)
    x = rng.standard_normal((6, d))
    perm = rng.permutation(6)
    y, _ = tpp.block_forward(x, p, 2)
    yp, _ = tpp.block_forward(x[perm], p, 2)
    assert np.allclose(y[perm], yp, atol=1e-12)


@pytest.mark.parametrize("pre_ln", [True, False])
@pytest.mark.parametrize("use_rope", [False, True])
def test_block_backward_matches_finite_differences(rng, pre_ln, use_rope):
    d, L = 8, 4
    p = _params(d, rng, pre_ln=pre_ln)
    x = rng.standard_normal((2, L, d))
    rope = (tpp.rope_table(16, 4), np.broadcast_to(np.arange(1, L + 1), (2, L))) if use_rope else None
    w = rng.standard_normal((2, L, d))

    def f():
        return float((tpp.block_forward(x, p, 2, rope, pre_ln)[0] * w).sum())

    _, cache = tpp.block_forward(x, p, 2, rope, pre_ln)
    dx, grads = tpp.block_backward(w, cache)
    assert set(grads) == set(p)
    h = 1e-6
    for name in ["attn.wq", "mlp.w1", "swiglu.v", "ln_out.scale", "ln2.shift"]:
        flat = p[name].reshape(-1)
        for j in range(0, flat.size, max(1, flat.size // 3)):
            old = flat[j]
            flat[j] = old + h
            fp = f()
            flat[j] = old - h
            fm = f()
            flat[j] = old
            assert grads[name].reshape(-1)[j] == pytest.approx((fp - fm) / (2 * h), rel=1e-5, abs=1e-8)
    flat = x.reshape(-1)
    for j in (0, 13, 40):
        old = flat[j]
        flat[j] = old + h
        fp = f()
        flat[j] = old - h
        fm = f()
        flat[j] = old
        assert dx.reshape(-1)[j] == pytest.approx((fp - fm) / (2 * h), rel=1e-5, abs=1e-8)
