"""Compiled kernels vs. the numpy fallback.

Times each fused kernel on shapes from a desk-model training step, then a
whole forward+backward step with each backend swapped in.

    python3 benchmarks/bench_kernels.py [--repeat 20]
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from audiomaepp import kernels, model as mm, synthetic
from audiomaepp.trainer import fixed_mask


def _kernel_cases(rng):
    # batch 8, 51 visible tokens, d=64 (hidden 256 / 176), 2 heads
    x = rng.standard_normal((8, 51, 256)).astype(np.float32)
    a = rng.standard_normal((8, 51, 176)).astype(np.float32)
    s = rng.standard_normal((8, 2, 251, 251)).astype(np.float32)
    h = rng.standard_normal((8, 251, 64)).astype(np.float32)
    scale = np.ones(64, np.float32)
    shift = np.zeros(64, np.float32)
    p = kernels.softmax(s)
    _, xhat, rstd = kernels.layer_norm(h, scale, shift, 1e-6)
    return {
        "gelu": lambda impl: kernels.gelu(x, impl=impl),
        "gelu_backward": lambda impl: kernels.gelu_backward(x, x, impl=impl),
        "swiglu_gate": lambda impl: kernels.swiglu_gate(a, a, impl=impl),
        "swiglu_gate_backward": lambda impl: kernels.swiglu_gate_backward(a, a, a, impl=impl),
        "softmax": lambda impl: kernels.softmax(s, impl=impl),
        "softmax_backward": lambda impl: kernels.softmax_backward(p, s, 0.125, impl=impl),
        "layer_norm": lambda impl: kernels.layer_norm(h, scale, shift, 1e-6, impl=impl),
        "layer_norm_backward": lambda impl: kernels.layer_norm_backward(h, xhat, rstd, scale, impl=impl),
    }


def _best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    if not kernels.compiled_available():
        raise SystemExit("compiled extension not built; run `pip install -e . --no-build-isolation`")
    py, c = kernels.backend_module("python"), kernels.backend_module("compiled")
    rng = np.random.default_rng(0)

    print(f"{'kernel':<22} {'numpy ms':>10} {'compiled ms':>12} {'speedup':>8}")
    for name, fn in _kernel_cases(rng).items():
        tp = _best(lambda: fn(py), args.repeat)
        tc = _best(lambda: fn(c), args.repeat)
        print(f"{name:<22} {tp * 1e3:>10.3f} {tc * 1e3:>12.3f} {tp / tc:>7.2f}x")

    cfg = mm.PRESETS["desk"]
    params = mm.build_model(cfg, rng)
    data = synthetic.toyset()
    specs = [fixed_mask(0, i, cfg.patch.n_patches, cfg.mask_ratio) for i in range(len(data))]
    active = kernels._impl
    print("\ntraining step (desk, batch 8, forward + backward):")
    base = None
    for label in ("python", "compiled", "mixed"):
        kernels._impl = kernels.backend_module(label)
        mm.loss_and_grads(params, cfg, data, specs)
        t = _best(lambda: mm.loss_and_grads(params, cfg, data, specs), max(3, args.repeat // 4))
        base = base or t
        print(f"  {label:<9} {t * 1e3:8.1f} ms  {base / t:5.2f}x")
    kernels._impl = active


if __name__ == "__main__":
    main()
