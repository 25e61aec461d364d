import numpy as np
import pytest

from audiomaepp import model as mm
from audiomaepp.masking import MaskSpec, sample_mask


@pytest.mark.parametrize("name", ["tiny", "base", "large"])
def test_param_count_closed_form_matches_allocation(name):
    cfg = mm.PRESETS[name]
    for scope in ("encoder", "full"):
        shapes = mm.param_shapes(cfg, scope)
        assert mm.param_count(cfg, scope) == sum(int(np.prod(s)) for s in shapes.values())


@pytest.mark.parametrize("name", ["tiny", "base", "large"])
def test_param_count_near_reference(name):
    ref = mm.REFERENCE_ENCODER_PARAMS[name]
    assert abs(mm.param_count(mm.PRESETS[name]) - ref) / ref <= 0.015


def test_without_pre_swiglu_norm_removes_two_vectors_per_block():
    a = mm.PRESETS["tiny"]
    b = a.replace(swiglu_pre_ln=False)
    assert mm.param_count(a) - mm.param_count(b) == a.enc_layers * 2 * a.d_model


def test_defaults_do_not_use_rope():
    cfg = mm.ModelConfig()
    assert not cfg.rope_encoder and not cfg.rope_decoder
    for p in mm.PRESETS.values():
        assert not p.rope_encoder and not p.rope_decoder


def test_init_statistics(small_cfg):
    params = mm.build_model(small_cfg, np.random.default_rng(0))
    w = params["enc.0.attn.wq"]
    assert abs(w.std() - 0.02) < 0.004 and np.abs(w).max() <= 0.04 + 1e-7
    assert np.all(params["enc.0.attn.bq"] == 0)
    assert np.all(params["enc.0.ln1.scale"] == 1) and np.all(params["enc.0.ln1.shift"] == 0)
    assert params["cls_token"].dtype == np.float32


def test_same_seed_same_weights(small_cfg):
    a = mm.build_model(small_cfg, np.random.default_rng(5))
    b = mm.build_model(small_cfg, np.random.default_rng(5))
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_masked_mse_ignores_visible_positions(rng):
    spec = sample_mask(250, 0.8, rng)
    y = rng.standard_normal((250, 64))
    t = rng.standard_normal((250, 64))
    base = mm.masked_mse(y, t, spec)
    y2 = y.copy()
    y2[spec.visible_idx] += 1e6 * rng.standard_normal((50, 64))
    assert mm.masked_mse(y2, t, spec) == base
    with pytest.raises(ValueError):
        mm.masked_mse(y, t, MaskSpec.all_visible(250))


def test_forward_shapes(small_cfg, rng):
    params = mm.build_model(small_cfg, rng)
    out = mm.forward_pretrain(params, small_cfg, rng.standard_normal((200, 80)), rng)
    assert out.y.shape == (250, 64) and np.isfinite(out.loss)
    feats = mm.encode_unmasked(params, small_cfg, rng.standard_normal((2, 200, 80)))
    assert feats.shape == (2, 251, 32)


def test_loss_is_independent_of_other_batch_rows(small_cfg, rng):
    params = mm.build_model(small_cfg, rng)
    s = rng.standard_normal((2, 200, 80))
    specs = [sample_mask(250, 0.8, rng) for _ in range(2)]
    pair = mm.batch_loss(params, small_cfg, s, specs)
    singles = [mm.batch_loss(params, small_cfg, s[i:i + 1], specs[i:i + 1]) for i in range(2)]
    assert pair == pytest.approx(np.mean(singles), rel=1e-5)


def test_decoder_width_sweep_builds():
    for d in (384, 512, 768):
        cfg = mm.PRESETS["tiny"].with_dec_dim(d)
        assert cfg.dec_heads == d // 64
        assert mm.param_shapes(cfg)["mask_token"] == (d,)


def test_config_round_trip():
    cfg = mm.PRESETS["large"].replace(rope_encoder=True)
    assert mm.ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_invalid_head_split():
    with pytest.raises(ValueError):
        mm.ModelConfig(d_model=30, enc_heads=4)


def test_gradients_with_input_standardization():
    from audiomaepp.trainer import grad_check
    cfg = mm.gradcheck_config().replace(input_mean=-3.0, input_std=2.5)
    assert grad_check(cfg, min_coords=60).passed


def test_standardization_is_an_exact_reparameterization(small_cfg, rng):
    # loss on raw values with (mean, std) equals std^2 times the loss on standardized data
    s = rng.standard_normal((1, 200, 80)) * 4 - 6
    specs = [sample_mask(250, 0.8, rng)]
    params = mm.build_model(small_cfg, rng, dtype=np.float64)
    raw = mm.batch_loss(params, small_cfg.replace(input_mean=-6.0, input_std=4.0), s, specs)
    unit = mm.batch_loss(params, small_cfg, (s + 6) / 4, specs)
    assert raw == pytest.approx(16 * unit, rel=1e-10)
