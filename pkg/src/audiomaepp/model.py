"""AudioMAE++ encoder/decoder assembly, masked-MSE loss and parameter counting.

Parameters live in a flat ``{name: ndarray}`` dict.  The forward pass keeps
caches so :func:`loss_and_grads` can run the exact reverse pass by hand.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import transformerpp as tpp
from .masking import MaskSpec, apply_mask, restore_backward, restore_with_mask_token, sample_mask
from .patching import PatchConfig, PositionalMode, TokenSequence, embed_patches, patchify, sinusoidal_2d

INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 768
    enc_layers: int = 12
    enc_heads: int = 12
    d_dec: int = 384
    dec_layers: int = 4
    dec_heads: int = 6
    patch: PatchConfig = field(default_factory=PatchConfig)
    mask_ratio: float = 0.8
    rope_encoder: bool = False
    rope_decoder: bool = False
    swiglu_pre_ln: bool = True
    # fixed (untrained) standardization of log-mel values; None = identity,
    # and pretrain() fills both in from its training set
    input_mean: float | None = None
    input_std: float | None = None

    def __post_init__(self):
        if self.input_std is not None and not self.input_std > 0:
            raise ValueError("input_std must be positive")
        if self.d_model % self.enc_heads or self.d_dec % self.dec_heads:
            raise ValueError("model widths must be divisible by their head counts")
        for d, heads, rope, name in ((self.d_model, self.enc_heads, self.rope_encoder, "encoder"),
                                     (self.d_dec, self.dec_heads, self.rope_decoder, "decoder")):
            if rope and (d // heads) % 2:
                raise ValueError(f"{name} head dimension must be even for RoPE")
            if not rope and d % 4:
                raise ValueError(f"{name} width must be divisible by 4 for the sinusoidal table")

    @property
    def input_affine(self) -> tuple[float, float]:
        """(mean, std) mapping raw log-mel values to model units."""
        return (self.input_mean or 0.0, self.input_std or 1.0)

    @property
    def input_shape(self) -> tuple[int, int]:
        return (self.patch.input_t, self.patch.input_f)

    def with_dec_dim(self, d_dec: int) -> "ModelConfig":
        return dataclasses.replace(self, d_dec=d_dec, dec_heads=max(1, d_dec // 64))

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["patch"] = dataclasses.asdict(self.patch)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["patch"] = PatchConfig(**d["patch"])
        return cls(**d)


PRESETS = {
    "tiny": ModelConfig(d_model=192, enc_layers=12, enc_heads=3, d_dec=384, dec_layers=4, dec_heads=6),
    "base": ModelConfig(d_model=768, enc_layers=12, enc_heads=12, d_dec=384, dec_layers=4, dec_heads=6),
    "large": ModelConfig(d_model=1024, enc_layers=24, enc_heads=16, d_dec=512, dec_layers=4, dec_heads=8),
    # desk-scale config for overfit / probe runs on a laptop CPU
    "desk": ModelConfig(d_model=64, enc_layers=2, enc_heads=2, d_dec=64, dec_layers=2, dec_heads=2),
}

# encoder-only "#M Params" reported for the three published sizes
REFERENCE_ENCODER_PARAMS = {"tiny": 8.9e6, "base": 141.9e6, "large": 504.0e6}


def gradcheck_config(rope: bool = False) -> ModelConfig:
    """d=8, 2 heads, 2+2 layers, 12 patches: small enough for float64 finite differences."""
    return ModelConfig(d_model=8, enc_layers=2, enc_heads=2, d_dec=8, dec_layers=2, dec_heads=2,
                       patch=PatchConfig(input_t=16, input_f=48, patch_t=4, patch_f=16),
                       rope_encoder=rope, rope_decoder=rope)


# ------------------------------------------------------------------ params


def param_shapes(cfg: ModelConfig, scope: str = "full") -> dict[str, tuple[int, ...]]:
    if scope not in ("encoder", "full"):
        raise ValueError(f"unknown scope {scope!r}")
    d, pd = cfg.d_model, cfg.patch.patch_dim
    shapes = {"patch_embed.weight": (pd, d), "patch_embed.bias": (d,), "cls_token": (d,)}
    for i in range(cfg.enc_layers):
        for k, s in tpp.block_param_shapes(d, cfg.swiglu_pre_ln).items():
            shapes[f"enc.{i}.{k}"] = s
    if scope == "encoder":
        return shapes
    dd = cfg.d_dec
    shapes.update({"enc_to_dec.weight": (d, dd), "enc_to_dec.bias": (dd,), "mask_token": (dd,)})
    for i in range(cfg.dec_layers):
        for k, s in tpp.block_param_shapes(dd, cfg.swiglu_pre_ln).items():
            shapes[f"dec.{i}.{k}"] = s
    shapes.update({"dec_out.weight": (dd, pd), "dec_out.bias": (pd,)})
    return shapes


def _block_count(d: int, pre_ln: bool) -> int:
    h = tpp.swiglu_hidden(d)
    n_ln = 4 if pre_ln else 3
    mlp = 8 * d * d + 5 * d
    attn = 4 * (d * d + d)
    swiglu = 2 * d * h + h * d + d
    return n_ln * 2 * d + mlp + attn + swiglu


def param_count(cfg: ModelConfig, scope: str = "encoder") -> int:
    """Closed-form trainable scalar count (``encoder`` or ``full``)."""
    d, pd = cfg.d_model, cfg.patch.patch_dim
    n = pd * d + d + d + cfg.enc_layers * _block_count(d, cfg.swiglu_pre_ln)
    if scope == "encoder":
        return n
    if scope != "full":
        raise ValueError(f"unknown scope {scope!r}")
    dd = cfg.d_dec
    return n + d * dd + dd + dd + cfg.dec_layers * _block_count(dd, cfg.swiglu_pre_ln) + dd * pd + pd


def allocate_params(cfg: ModelConfig, scope: str = "full", dtype=np.float32) -> dict[str, np.ndarray]:
    """Zero-filled tensors for every parameter (lazily committed by the OS)."""
    return {k: np.zeros(s, dtype=dtype) for k, s in param_shapes(cfg, scope).items()}


def _trunc_normal(rng, shape, std):
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def build_model(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name in ("cls_token", "mask_token"):
            val = rng.standard_normal(shape) * INIT_STD
        elif leaf == "scale":
            val = np.ones(shape)
        elif len(shape) == 2:
            val = _trunc_normal(rng, shape, INIT_STD)
        else:
            val = np.zeros(shape)
        params[name] = val.astype(dtype)
    return params


def is_decayed(name: str, value: np.ndarray) -> bool:
    """Weight decay applies to matrices only."""
    return value.ndim >= 2


# ----------------------------------------------------------------- forward


@lru_cache(maxsize=16)
def _rope(max_pos: int, d_head: int, dtype_name: str):
    return tpp.rope_table(max_pos, d_head, dtype=np.dtype(dtype_name))


def _sub(params, prefix):
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


def _stack_forward(x, params, prefix, layers, heads, cfg, rope_on, positions):
    rope = None
    if rope_on:
        table = _rope(cfg.patch.n_patches + 1, x.shape[-1] // heads, x.dtype.name)
        rope = (table, positions)
    caches = []
    for i in range(layers):
        x, c = tpp.block_forward(x, _sub(params, f"{prefix}.{i}."), heads, rope, cfg.swiglu_pre_ln)
        caches.append(c)
    return x, caches


def _stack_backward(dx, caches, prefix, grads):
    for i in reversed(range(len(caches))):
        dx, g = tpp.block_backward(dx, caches[i])
        for k, v in g.items():
            grads[f"{prefix}.{i}.{k}"] = v
    return dx


def standardize(patches, cfg: ModelConfig):
    mean, std = cfg.input_affine
    if mean == 0.0 and std == 1.0:
        return patches
    return ((patches - mean) / std).astype(patches.dtype, copy=False)


def embed_with_cls(params, cfg: ModelConfig, targets) -> TokenSequence:
    """Patch embedding (+ fixed table unless the encoder uses RoPE), cls prefixed at slot 0.

    ``targets`` are raw patch values; the config's fixed standardization is applied here.
    """
    mode = PositionalMode.NONE if cfg.rope_encoder else PositionalMode.SINUSOIDAL_2D
    seq = embed_patches(standardize(targets, cfg), params["patch_embed.weight"], params["patch_embed.bias"], mode, cfg.patch)
    lead = seq.tokens.shape[:-2]
    cls = np.broadcast_to(params["cls_token"], (*lead, 1, cfg.d_model))
    tokens = np.concatenate([cls, seq.tokens], axis=-2)
    positions = np.concatenate([np.zeros((*lead, 1), dtype=seq.positions.dtype), seq.positions], axis=-1)
    return TokenSequence(tokens, positions)


def encode(params, cfg: ModelConfig, visible: TokenSequence) -> TokenSequence:
    out, _ = _stack_forward(visible.tokens, params, "enc", cfg.enc_layers, cfg.enc_heads, cfg,
                            cfg.rope_encoder, visible.positions)
    return TokenSequence(out, visible.positions)


def _decode_forward(params, cfg, z, specs):
    zp, c_proj = tpp.linear(z, params["enc_to_dec.weight"], params["enc_to_dec.bias"])
    full = restore_with_mask_token(zp, specs, params["mask_token"]).tokens
    if not cfg.rope_decoder:
        table = sinusoidal_2d(cfg.patch.grid_t, cfg.patch.grid_f, cfg.d_dec).astype(full.dtype)
        full = full.copy()
        full[:, 1:] += table
    positions = np.broadcast_to(np.arange(cfg.patch.n_patches + 1), full.shape[:-1])
    h, c_dec = _stack_forward(full, params, "dec", cfg.dec_layers, cfg.dec_heads, cfg,
                              cfg.rope_decoder, positions)
    y_full, c_out = tpp.linear(h, params["dec_out.weight"], params["dec_out.bias"])
    mean, std = cfg.input_affine
    if mean != 0.0 or std != 1.0:
        y_full = (y_full * std + mean).astype(h.dtype, copy=False)
    return y_full[:, 1:], (c_proj, c_dec, c_out)


def decode(params, cfg: ModelConfig, z_enc: TokenSequence, spec: MaskSpec | Sequence[MaskSpec]) -> np.ndarray:
    """Reconstruction ``y`` of shape ``[N, t*f]`` (or ``[B, N, t*f]``), cls slot dropped."""
    z = z_enc.tokens
    batched = z.ndim == 3
    specs = list(spec) if batched else [spec]
    y, _ = _decode_forward(params, cfg, z if batched else z[None], specs)
    return y if batched else y[0]


def masked_mse(y, targets, spec: MaskSpec) -> float:
    if y.shape != targets.shape:
        raise ValueError(f"reconstruction shape {y.shape} != target shape {targets.shape}")
    if spec.masked_idx.size == 0:
        raise ValueError("masked_mse needs at least one masked patch")
    diff = y[spec.masked_idx] - targets[spec.masked_idx]
    return float(np.mean(diff * diff))


@dataclass
class ReconstructionOutput:
    y: np.ndarray
    loss: float
    spec: MaskSpec


def _forward(params, cfg: ModelConfig, spectrograms, specs):
    targets = patchify(np.asarray(spectrograms, dtype=params["cls_token"].dtype), cfg.patch)
    full = embed_with_cls(params, cfg, targets)
    vis = apply_mask(full, specs)
    z, c_enc = _stack_forward(vis.tokens, params, "enc", cfg.enc_layers, cfg.enc_heads, cfg,
                              cfg.rope_encoder, vis.positions)
    y, c_dec = _decode_forward(params, cfg, z, specs)
    losses = np.array([masked_mse(y[b], targets[b], s) for b, s in enumerate(specs)])
    return float(losses.mean()), y, (targets, vis, c_enc, c_dec)


def loss_and_grads(params, cfg: ModelConfig, spectrograms, specs: Sequence[MaskSpec]):
    """Mean masked MSE over the batch and its exact gradient for every parameter."""
    spectrograms = np.asarray(spectrograms)
    loss, y, (targets, vis, c_enc, c_dec) = _forward(params, cfg, spectrograms, specs)
    c_proj, c_dec_blocks, c_out = c_dec
    B, N, P = y.shape
    grads: dict[str, np.ndarray] = {}

    dy = np.zeros_like(y)
    for b, s in enumerate(specs):
        m = s.masked_idx
        dy[b, m] = 2.0 * (y[b, m] - targets[b, m]) / (B * m.size * P)
    dyf = np.concatenate([np.zeros_like(dy[:, :1]), dy], axis=1) * cfg.input_affine[1]
    dh, grads["dec_out.weight"], grads["dec_out.bias"] = tpp.linear_backward(dyf, c_out)
    dfull = _stack_backward(dh, c_dec_blocks, "dec", grads)
    dzp, grads["mask_token"] = restore_backward(dfull, specs)
    dz, grads["enc_to_dec.weight"], grads["enc_to_dec.bias"] = tpp.linear_backward(dzp, c_proj)
    dvis = _stack_backward(dz, c_enc, "enc", grads)

    grads["cls_token"] = dvis[:, 0].sum(0)
    rows = np.arange(B)[:, None]
    vis_idx = vis.positions[:, 1:] - 1
    t_vis = standardize(targets[rows, vis_idx], cfg)
    grads["patch_embed.weight"] = t_vis.reshape(-1, P).T @ dvis[:, 1:].reshape(-1, cfg.d_model)
    grads["patch_embed.bias"] = dvis[:, 1:].reshape(-1, cfg.d_model).sum(0)
    return loss, {k: grads[k].astype(params[k].dtype, copy=False) for k in params}


def batch_loss(params, cfg: ModelConfig, spectrograms, specs: Sequence[MaskSpec]) -> float:
    return _forward(params, cfg, np.asarray(spectrograms), specs)[0]


def forward_pretrain(params, cfg: ModelConfig, s, rng: np.random.Generator) -> ReconstructionOutput:
    s = np.asarray(s)
    if s.shape != cfg.input_shape:
        raise ValueError(f"spectrogram shape {s.shape} != {cfg.input_shape}")
    spec = sample_mask(cfg.patch.n_patches, cfg.mask_ratio, rng)
    loss, y, _ = _forward(params, cfg, s[None].astype(params["cls_token"].dtype), [spec])
    return ReconstructionOutput(y[0], loss, spec)


def encode_unmasked(params, cfg: ModelConfig, spectrograms) -> np.ndarray:
    """Encoder output for every patch plus cls, ``[B, N+1, d_model]``; no masking."""
    s = np.asarray(spectrograms, dtype=params["cls_token"].dtype)
    full = embed_with_cls(params, cfg, patchify(s, cfg.patch))
    return encode(params, cfg, full).tokens
