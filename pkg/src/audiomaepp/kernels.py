"""Kernel backend selection.

The compiled extension is used when it was built; otherwise (or when
``AMPP_KERNELS=python``) the numpy implementations take over.  Both expose
the same functions; the wrappers here handle reshaping and contiguity.

Kernels dominated by exp/sigmoid stay on numpy even when the extension is
present, because numpy's vectorized transcendentals beat a scalar C loop
(see benchmarks/bench_kernels.py).  ``AMPP_KERNELS=compiled`` forces every
kernel onto the extension.
"""
from __future__ import annotations

import os
from types import SimpleNamespace

import numpy as np

from . import _kernels_py

# kernels where the fused C loop measured faster than numpy
COMPILED_WINS = ("gelu_forward", "softmax_rows_backward", "layer_norm_rows", "layer_norm_rows_backward")
_NAMES = ("gelu_forward", "gelu_backward", "swiglu_gate_forward", "swiglu_gate_backward",
          "softmax_rows", "softmax_rows_backward", "layer_norm_rows", "layer_norm_rows_backward")


def _dispatch(compiled):
    return SimpleNamespace(**{n: getattr(compiled if n in COMPILED_WINS else _kernels_py, n) for n in _NAMES})


_impl = _kernels_py
BACKEND = "python"
_choice = os.environ.get("AMPP_KERNELS", "").lower()
if _choice != "python":
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled if _choice == "compiled" else _dispatch(_compiled)
        BACKEND = "compiled" if _choice == "compiled" else "mixed"


def compiled_available() -> bool:
    try:
        from . import _kernels  # noqa: F401
    except ImportError:
        return False
    return True


def backend_module(name: str | None = None):
    """``"compiled"``, ``"mixed"``, ``"python"`` or ``None`` for the active backend."""
    if name is None:
        return _impl
    if name == "python":
        return _kernels_py
    if name in ("compiled", "mixed"):
        from . import _kernels
        return _kernels if name == "compiled" else _dispatch(_kernels)
    raise ValueError(f"unknown kernel backend {name!r}")


def _c(a):
    return np.ascontiguousarray(a)


def _elementwise(fn, *arrays):
    shape = arrays[0].shape
    flat = [_c(a).reshape(-1) for a in arrays]
    out = fn(*flat)
    if isinstance(out, tuple):
        return tuple(o.reshape(shape) for o in out)
    return out.reshape(shape)


def gelu(x, impl=None):
    return _elementwise((impl or _impl).gelu_forward, x)


def gelu_backward(x, dy, impl=None):
    return _elementwise((impl or _impl).gelu_backward, x, dy.astype(x.dtype, copy=False))


def swiglu_gate(a, g, impl=None):
    return _elementwise((impl or _impl).swiglu_gate_forward, a, g)


def swiglu_gate_backward(a, g, du, impl=None):
    return _elementwise((impl or _impl).swiglu_gate_backward, a, g, du.astype(a.dtype, copy=False))


def _rows(a):
    return _c(a).reshape(-1, a.shape[-1])


def softmax(s, impl=None):
    return (impl or _impl).softmax_rows(_rows(s)).reshape(s.shape)


def softmax_backward(p, dp, scale, impl=None):
    return (impl or _impl).softmax_rows_backward(_rows(p), _rows(dp.astype(p.dtype, copy=False)),
                                                 float(scale)).reshape(p.shape)


def layer_norm(x, scale, shift, eps, impl=None):
    y, xhat, rstd = (impl or _impl).layer_norm_rows(
        _rows(x), _c(scale.astype(x.dtype, copy=False)), _c(shift.astype(x.dtype, copy=False)), float(eps))
    lead = x.shape[:-1]
    return y.reshape(x.shape), xhat.reshape(x.shape), rstd.reshape(*lead, 1)


def layer_norm_backward(dy, xhat, rstd, scale, impl=None):
    dx, dscale, dshift = (impl or _impl).layer_norm_rows_backward(
        _rows(dy.astype(xhat.dtype, copy=False)), _rows(xhat), _c(rstd.reshape(-1, 1)),
        _c(scale.astype(xhat.dtype, copy=False)))
    return dx.reshape(dy.shape), dscale, dshift
