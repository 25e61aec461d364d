"""Transformer++ block: macaron MLP / attention / SwiGLU with optional RoPE.

Every forward function returns ``(out, cache)`` and has a matching
``*_backward(dout, cache)`` returning the input gradient plus a dict of
parameter gradients keyed like the parameters themselves.  Arrays carry
arbitrary leading batch dimensions: ``x`` is ``[..., L, d]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf, expit

from . import kernels

LN_EPS = 1e-6
_SQRT_HALF = float(np.sqrt(0.5))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def swiglu_hidden(d: int) -> int:
    """Hidden width of the SwiGLU FFN: 8d/3 rounded up to a multiple of 8."""
    return int(-(-(8 * d) // 3) + 7) // 8 * 8


def _flat(a):
    return a.reshape(-1, a.shape[-1])


# ---------------------------------------------------------------- primitives


def linear(x, w, b=None):
    y = x @ w
    if b is not None:
        y = y + b
    return y, (x, w, b is not None)


def linear_backward(dy, cache):
    x, w, has_bias = cache
    dw = _flat(x).T @ _flat(dy)
    db = _flat(dy).sum(0) if has_bias else None
    return dy @ w.T, dw, db


def layer_norm(x, scale, shift, eps=LN_EPS):
    y, xhat, rstd = kernels.layer_norm(x, scale, shift, eps)
    return y, (xhat, rstd, scale)


def layer_norm_backward(dy, cache):
    xhat, rstd, scale = cache
    return kernels.layer_norm_backward(dy, xhat, rstd, scale)


def sigmoid(x):
    return expit(x)


def swish(x):
    return x * expit(x)


def swish_grad(x):
    s = expit(x)
    return s + x * s * (1.0 - s)


def gelu(x):
    """Exact (erf) GELU."""
    return 0.5 * x * (1.0 + erf(x * _SQRT_HALF))


def gelu_grad(x):
    cdf = 0.5 * (1.0 + erf(x * _SQRT_HALF))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return cdf + x * pdf


def softmax(s, axis=-1):
    e = np.exp(s - s.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------------- FFNs


def mlp_ffn(x, p):
    """Single-hidden-layer MLP (4d hidden, exact GELU)."""
    h, c1 = linear(x, p["w1"], p["b1"])
    a = kernels.gelu(h)
    y, c2 = linear(a, p["w2"], p["b2"])
    return y, (c1, h, c2)


def mlp_ffn_backward(dy, cache):
    c1, h, c2 = cache
    da, dw2, db2 = linear_backward(dy, c2)
    dh = kernels.gelu_backward(h, da)
    dx, dw1, db1 = linear_backward(dh, c1)
    return dx, {"w1": dw1, "b1": db1, "w2": dw2, "b2": db2}


def swiglu_ffn(x, p):
    """(Swish(xW) * xV) O + bias; W and V carry no bias."""
    a = x @ p["w"]
    g = x @ p["v"]
    u = kernels.swiglu_gate(a, g)
    y = u @ p["o"] + p["bo"]
    return y, (x, a, g, u, p["w"], p["v"], p["o"])


def swiglu_ffn_backward(dy, cache):
    x, a, g, u, w, v, o = cache
    do = _flat(u).T @ _flat(dy)
    dbo = _flat(dy).sum(0)
    du = dy @ o.T
    da, dg = kernels.swiglu_gate_backward(a, g, du)
    dw = _flat(x).T @ _flat(da)
    dv = _flat(x).T @ _flat(dg)
    dx = da @ w.T + dg @ v.T
    return dx, {"w": dw, "v": dv, "o": do, "bo": dbo}


# ---------------------------------------------------------------------- RoPE


@dataclass(frozen=True)
class RopeTable:
    cos: np.ndarray  # [max_position, d_head // 2]
    sin: np.ndarray
    base: float = 10000.0

    @property
    def max_position(self) -> int:
        return self.cos.shape[0]


def rope_table(max_position: int, d_head: int, base: float = 10000.0, dtype=np.float64) -> RopeTable:
    if d_head % 2:
        raise ValueError(f"RoPE needs an even head dimension, got {d_head}")
    theta = base ** (-np.arange(0, d_head, 2, dtype=np.float64) / d_head)
    ang = np.arange(max_position, dtype=np.float64)[:, None] * theta[None, :]
    return RopeTable(np.cos(ang).astype(dtype), np.sin(ang).astype(dtype), base)


def _rope_cs(table, positions, dtype):
    positions = np.asarray(positions)
    if positions.size and (positions.min() < 0 or positions.max() >= table.max_position):
        raise ValueError("RoPE position outside table range")
    # [..., L, 1, d_head/2] so it broadcasts over heads
    cos = table.cos[positions][..., None, :].astype(dtype, copy=False)
    sin = table.sin[positions][..., None, :].astype(dtype, copy=False)
    return cos, sin


def rope_rotate(x, positions, table: RopeTable, inverse: bool = False):
    """Rotate interleaved pairs of ``x [..., L, heads, d_head]`` by position angles.

    ``inverse`` applies the transposed rotation, which is also the backward map.
    """
    if x.shape[-1] % 2:
        raise ValueError(f"RoPE needs an even head dimension, got {x.shape[-1]}")
    cos, sin = _rope_cs(table, positions, x.dtype)
    if inverse:
        sin = -sin
    xe, xo = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos
    return out


# ----------------------------------------------------------------- attention


def _split_heads(t, heads):
    *lead, L, d = t.shape
    return t.reshape(*lead, L, heads, d // heads)


def _to_bhld(t):
    # [..., L, H, dh] -> [..., H, L, dh]
    return np.swapaxes(t, -3, -2)


def mha(x, p, heads: int, rope=None):
    """Bidirectional multi-head attention.

    ``rope`` is ``None`` or ``(RopeTable, positions)`` with positions ``[..., L]``.
    """
    d = x.shape[-1]
    if d % heads:
        raise ValueError(f"width {d} not divisible by {heads} heads")
    dh = d // heads
    q, cq = linear(x, p["wq"], p["bq"])
    k, ck = linear(x, p["wk"], p["bk"])
    v, cv = linear(x, p["wv"], p["bv"])
    q, k, v = (_split_heads(t, heads) for t in (q, k, v))
    if rope is not None:
        table, pos = rope
        q = rope_rotate(q, pos, table)
        k = rope_rotate(k, pos, table)
    qh, kh, vh = _to_bhld(q), _to_bhld(k), _to_bhld(v)
    scale = 1.0 / np.sqrt(dh)
    probs = kernels.softmax((qh @ np.swapaxes(kh, -1, -2)) * scale)
    oh = probs @ vh
    o = _to_bhld(oh).reshape(x.shape)
    y, co = linear(o, p["wo"], p["bo"])
    return y, (cq, ck, cv, co, qh, kh, vh, probs, scale, heads, rope)


def attention_probs(x, p, heads: int, rope=None):
    return mha(x, p, heads, rope)[1][7]


def mha_backward(dy, cache):
    cq, ck, cv, co, qh, kh, vh, probs, scale, heads, rope = cache
    do, dwo, dbo = linear_backward(dy, co)
    doh = _to_bhld(_split_heads(do, heads))
    dprobs = doh @ np.swapaxes(vh, -1, -2)
    dvh = np.swapaxes(probs, -1, -2) @ doh
    ds = kernels.softmax_backward(probs, dprobs, scale)
    dqh = ds @ kh
    dkh = np.swapaxes(ds, -1, -2) @ qh
    dq, dk, dv = (_to_bhld(t) for t in (dqh, dkh, dvh))
    if rope is not None:
        table, pos = rope
        dq = rope_rotate(dq, pos, table, inverse=True)
        dk = rope_rotate(dk, pos, table, inverse=True)
    shape = dy.shape
    dxq, dwq, dbq = linear_backward(dq.reshape(shape), cq)
    dxk, dwk, dbk = linear_backward(dk.reshape(shape), ck)
    dxv, dwv, dbv = linear_backward(dv.reshape(shape), cv)
    grads = {"wq": dwq, "bq": dbq, "wk": dwk, "bk": dbk, "wv": dwv, "bv": dbv, "wo": dwo, "bo": dbo}
    return dxq + dxk + dxv, grads


# --------------------------------------------------------------------- block


def block_param_shapes(d: int, swiglu_pre_ln: bool = True) -> dict[str, tuple[int, ...]]:
    """Named parameter shapes of one transformer++ block of width ``d``."""
    h = swiglu_hidden(d)
    shapes: dict[str, tuple[int, ...]] = {}
    lns = ("ln1", "ln2", "ln3", "ln_out") if swiglu_pre_ln else ("ln1", "ln2", "ln_out")
    for ln in lns:
        shapes[f"{ln}.scale"] = (d,)
        shapes[f"{ln}.shift"] = (d,)
    shapes.update({
        "mlp.w1": (d, 4 * d), "mlp.b1": (4 * d,), "mlp.w2": (4 * d, d), "mlp.b2": (d,),
    })
    for n in "qkvo":
        shapes[f"attn.w{n}"] = (d, d)
        shapes[f"attn.b{n}"] = (d,)
    shapes.update({"swiglu.w": (d, h), "swiglu.v": (d, h), "swiglu.o": (h, d), "swiglu.bo": (d,)})
    return shapes


def _sub(p, prefix):
    n = len(prefix)
    return {k[n:]: v for k, v in p.items() if k.startswith(prefix)}


def block_forward(x, p, heads: int, rope=None, swiglu_pre_ln: bool = True):
    """Macaron block.

    a = x + MLP(LN1 x)/2;  b = a + MHA(LN2 a);  y = LN_out(b + SwiGLU(LN3 b)/2).
    With ``swiglu_pre_ln=False`` the SwiGLU branch reads ``b`` directly.
    """
    n1, c_ln1 = layer_norm(x, p["ln1.scale"], p["ln1.shift"])
    m, c_mlp = mlp_ffn(n1, _sub(p, "mlp."))
    a = x + 0.5 * m
    n2, c_ln2 = layer_norm(a, p["ln2.scale"], p["ln2.shift"])
    att, c_att = mha(n2, _sub(p, "attn."), heads, rope)
    b = a + att
    if swiglu_pre_ln:
        n3, c_ln3 = layer_norm(b, p["ln3.scale"], p["ln3.shift"])
    else:
        n3, c_ln3 = b, None
    s, c_sw = swiglu_ffn(n3, _sub(p, "swiglu."))
    y, c_out = layer_norm(b + 0.5 * s, p["ln_out.scale"], p["ln_out.shift"])
    return y, (c_ln1, c_mlp, c_ln2, c_att, c_ln3, c_sw, c_out)


def block_backward(dy, cache):
    c_ln1, c_mlp, c_ln2, c_att, c_ln3, c_sw, c_out = cache
    g = {}
    dpre, g["ln_out.scale"], g["ln_out.shift"] = layer_norm_backward(dy, c_out)
    dn3, gs = swiglu_ffn_backward(0.5 * dpre, c_sw)
    g.update({f"swiglu.{k}": v for k, v in gs.items()})
    if c_ln3 is not None:
        dn3, g["ln3.scale"], g["ln3.shift"] = layer_norm_backward(dn3, c_ln3)
    db = dpre + dn3
    dn2, ga = mha_backward(db, c_att)
    g.update({f"attn.{k}": v for k, v in ga.items()})
    dln2, g["ln2.scale"], g["ln2.shift"] = layer_norm_backward(dn2, c_ln2)
    da = db + dln2
    dn1, gm = mlp_ffn_backward(0.5 * da, c_mlp)
    g.update({f"mlp.{k}": v for k, v in gm.items()})
    dln1, g["ln1.scale"], g["ln1.shift"] = layer_norm_backward(dn1, c_ln1)
    return da + dln1, g
