"""Invariant suite behind ``audiomaepp verify``."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import model as mm
from . import transformerpp as tpp
from .evalkit import ScoreTable, aggregate_score
from .masking import apply_mask, restore_with_mask_token, sample_mask
from .patching import PatchConfig, TokenSequence, patchify, unpatchify
from .trainer import OptimConfig, grad_check, lr_at


@dataclass
class Check:
    name: str
    measured: float
    limit: float
    passed: bool
    note: str = ""


def _param_counts(out):
    for name, ref in mm.REFERENCE_ENCODER_PARAMS.items():
        cfg = mm.PRESETS[name]
        closed = mm.param_count(cfg, "encoder")
        allocated = sum(a.size for a in mm.allocate_params(cfg, "encoder").values())
        rel = abs(closed - ref) / ref
        out.append(Check(f"param_count[{name}]", rel, 0.015, rel <= 0.015 and closed == allocated,
                         f"{closed / 1e6:.2f}M vs {ref / 1e6:.1f}M, allocated {allocated}"))


def _rope(out, rng):
    d_head, L = 16, 10
    table = tpp.rope_table(64, d_head)
    x = rng.standard_normal((L, 2, d_head))
    pos = rng.integers(0, 50, L)
    rot = tpp.rope_rotate(x, pos, table)
    err = float(np.max(np.abs(np.linalg.norm(rot, axis=-1) - np.linalg.norm(x, axis=-1))))
    out.append(Check("rope_norm_preservation", err, 1e-12, err < 1e-12))
    ident = float(np.max(np.abs(tpp.rope_rotate(x, np.zeros(L, int), table) - x)))
    out.append(Check("rope_position0_identity", ident, 0.0, ident == 0.0))
    p = {k.split(".", 1)[1]: rng.standard_normal(s) * 0.3
         for k, s in tpp.block_param_shapes(32).items() if k.startswith("attn.")}
    xs = rng.standard_normal((L, 32))
    base = np.arange(L)
    pa = tpp.attention_probs(xs, p, 2, (table, base))
    pb = tpp.attention_probs(xs, p, 2, (table, base + 7))
    shift = float(np.max(np.abs(pa - pb)))
    out.append(Check("rope_shift_invariance", shift, 1e-5, shift < 1e-5))


def _masking(out, rng):
    spec = sample_mask(250, 0.8, rng)
    ok = spec.masked_idx.size == 200 and spec.visible_idx.size == 50
    out.append(Check("mask_counts_N250", float(spec.masked_idx.size), 200, ok))
    x = rng.standard_normal((251, 8))
    vis = apply_mask(TokenSequence(x), spec)
    sentinel = np.full(8, np.nan)
    full = restore_with_mask_token(vis, spec, sentinel).tokens
    good = (np.array_equal(full[spec.visible_idx + 1], x[spec.visible_idx + 1])
            and np.array_equal(full[0], x[0]) and np.isnan(full[spec.masked_idx + 1]).all())
    out.append(Check("mask_restore_roundtrip", 0.0 if good else 1.0, 0.0, good))


def _patches(out, rng):
    cfg = PatchConfig()
    s = rng.standard_normal((200, 80))
    p = patchify(s, cfg)
    exact = np.array_equal(unpatchify(p, cfg), s) and p.shape == (250, 64)
    out.append(Check("patch_roundtrip", 0.0 if exact else 1.0, 0.0, exact))


def _schedule(out):
    oc = OptimConfig(peak_lr=1.0, epochs=100, warmup_epochs=10, steps_per_epoch=10)
    w, t = oc.warmup_steps, oc.total_steps
    vals = [lr_at(w // 2, oc), lr_at(w, oc), lr_at(w + (t - w) // 2, oc), lr_at(t, oc)]
    want = [0.5, 1.0, 0.5, 0.0]
    err = max(abs(a - b) for a, b in zip(vals, want))
    out.append(Check("lr_schedule", err, 1e-12, err < 1e-12))


def _block_equations(out, rng):
    d, L, heads = 16, 7, 2
    p = {k: rng.standard_normal(s) * 0.2 for k, s in tpp.block_param_shapes(d).items()}
    x = rng.standard_normal((L, d))
    y, _ = tpp.block_forward(x, p, heads)

    def ln(v, name):
        mu = v.mean(-1, keepdims=True)
        sd = np.sqrt(((v - mu) ** 2).mean(-1, keepdims=True) + tpp.LN_EPS)
        return (v - mu) / sd * p[f"{name}.scale"] + p[f"{name}.shift"]

    def mlp(v):
        h = v @ p["mlp.w1"] + p["mlp.b1"]
        return (0.5 * h * (1 + np.vectorize(math.erf)(h / math.sqrt(2)))) @ p["mlp.w2"] + p["mlp.b2"]

    def attn(v):
        q, k, vv = (v @ p[f"attn.w{n}"] + p[f"attn.b{n}"] for n in "qkv")
        dh = d // heads
        o = np.zeros_like(v)
        for h in range(heads):
            sl = slice(h * dh, (h + 1) * dh)
            sc = q[:, sl] @ k[:, sl].T / math.sqrt(dh)
            e = np.exp(sc - sc.max(1, keepdims=True))
            o[:, sl] = (e / e.sum(1, keepdims=True)) @ vv[:, sl]
        return o @ p["attn.wo"] + p["attn.bo"]

    def swiglu(v):
        a = v @ p["swiglu.w"]
        return (a / (1 + np.exp(-a)) * (v @ p["swiglu.v"])) @ p["swiglu.o"] + p["swiglu.bo"]

    x1 = x + 0.5 * mlp(ln(x, "ln1"))
    x2 = x1 + attn(ln(x1, "ln2"))
    ref = ln(x2 + 0.5 * swiglu(ln(x2, "ln3")), "ln_out")
    rel = float(np.linalg.norm(y - ref) / np.linalg.norm(ref))
    out.append(Check("block_equations", rel, 1e-6, rel < 1e-6))


def _score(out):
    t = ScoreTable(["A", "B", "C"], ["t1", "t2"], np.array([[90, 60], [70, 40], [80, 60]], float))
    s = aggregate_score(t)
    err = max(abs(s["A"] - 100), abs(s["B"] - 0), abs(s["C"] - 75))
    out.append(Check("aggregate_score_example", err, 1e-9, err < 1e-9))


def _shapes(out, rng):
    from .dsp import Waveform, logmel
    cfg = mm.ModelConfig(d_model=64, enc_layers=1, enc_heads=1, d_dec=64, dec_layers=1, dec_heads=1)
    params = mm.build_model(cfg, rng)
    s = logmel(Waveform(rng.uniform(-0.1, 0.1, 32000)))
    spec = sample_mask(cfg.patch.n_patches, cfg.mask_ratio, rng)
    seq = mm.embed_with_cls(params, cfg, patchify(s, cfg.patch).astype(np.float32))
    vis = apply_mask(seq, spec)
    z = mm.encode(params, cfg, vis)
    y = mm.decode(params, cfg, z, spec)
    ok = s.shape == (200, 80) and len(vis) == 51 and y.shape == (250, 64)
    out.append(Check("pipeline_shapes", 0.0 if ok else 1.0, 0.0, ok,
                     f"spec {s.shape}, encoder input {len(vis)}, decoder output {y.shape}"))


def run_all(tolerance: float = 1e-4, seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    out: list[Check] = []
    for rope in (False, True):
        rep = grad_check(mm.gradcheck_config(rope), tolerance=tolerance, seed=seed)
        out.append(Check(f"gradcheck[rope={'on' if rope else 'off'}]", rep.max_error, tolerance,
                         rep.passed, f"{rep.n_coords} coords, {len(rep.per_tensor)} tensors"))
    _block_equations(out, rng)
    _rope(out, rng)
    _masking(out, rng)
    _patches(out, rng)
    _param_counts(out)
    _schedule(out)
    _score(out)
    _shapes(out, rng)
    return out


def format_table(checks) -> str:
    w = max(len(c.name) for c in checks)
    lines = [f"{'check':<{w}}  {'measured':>12}  {'limit':>10}  result"]
    for c in checks:
        lines.append(f"{c.name:<{w}}  {c.measured:>12.4g}  {c.limit:>10.3g}  "
                     f"{'PASS' if c.passed else 'FAIL'}{'  ' + c.note if c.note else ''}")
    return "\n".join(lines)
