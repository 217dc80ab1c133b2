"""Forward/backward pairs for the transformer sublayers.

Activations are ``(tokens, features)`` matrices.  Each ``*_forward`` returns
its output plus a small cache tuple consumed by the matching ``*_backward``.
"""

from __future__ import annotations

import numpy as np

from .numerics import bmm, matmul, row_sum


def linear_backward(x: np.ndarray, w: np.ndarray, dy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``y = x @ w``: returns ``(dx, dw)``."""
    return matmul(dy, w.T), matmul(x.T, dy)


# ---------------------------------------------------------------------------
# RMSNorm
# ---------------------------------------------------------------------------


def rmsnorm_forward(x: np.ndarray, gain: np.ndarray, eps: float):
    """``y = x / rms(x) * gain`` with ``gain`` of shape ``(1, d)``."""
    d = x.shape[1]
    ms = row_sum(x * x) / d + eps
    inv = (1.0 / np.sqrt(ms)).astype(x.dtype)
    xhat = x * inv[:, None]
    return xhat * gain, (xhat, inv)


def rmsnorm_backward(dy: np.ndarray, gain: np.ndarray, cache):
    xhat, inv = cache
    d = xhat.shape[1]
    dgain = row_sum(np.ascontiguousarray((dy * xhat).T))[None, :]
    dxhat = dy * gain
    dot = row_sum(dxhat * xhat) / d
    dx = inv[:, None] * (dxhat - xhat * dot[:, None])
    return dx, dgain


# ---------------------------------------------------------------------------
# Rotary position embedding (half-split convention)
# ---------------------------------------------------------------------------


def rope_tables(seq_len: int, head_dim: int, base: float, dtype):
    half = head_dim // 2
    freqs = base ** (-np.arange(half, dtype=np.float64) * 2.0 / head_dim)
    angles = np.arange(seq_len, dtype=np.float64)[:, None] * freqs[None, :]
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def rope_apply(x: np.ndarray, cos: np.ndarray, sin: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Rotate ``x`` of shape ``(..., T, head_dim)``; ``inverse`` applies the transpose."""
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    s = -sin if inverse else sin
    return np.concatenate([x1 * cos - x2 * s, x1 * s + x2 * cos], axis=-1)


# ---------------------------------------------------------------------------
# Causal grouped-query attention
# ---------------------------------------------------------------------------


def _split_heads(x: np.ndarray, batch: int, seq: int, heads: int, head_dim: int) -> np.ndarray:
    # (B*T, H*hd) -> (B, H, T, hd)
    return x.reshape(batch, seq, heads, head_dim).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, t, hd = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 1, 3)).reshape(b * t, h * hd)


def causal_softmax(scores: np.ndarray) -> np.ndarray:
    """Softmax over the last axis of ``(S, T, T)`` with future positions masked out."""
    t = scores.shape[-1]
    mask = np.triu(np.ones((t, t), dtype=bool), k=1)
    s = np.where(mask, -np.inf, scores)
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    flat = e.reshape(-1, t)
    return (flat / row_sum(flat)[:, None]).reshape(e.shape)


def attention_forward(h: np.ndarray, wq, wk, wv, wo, batch: int, seq: int,
                      n_heads: int, n_kv_heads: int, cos, sin):
    """Causal GQA self-attention on normalized input ``h`` of shape ``(B*T, d)``."""
    hd = wq.shape[1] // n_heads
    group = n_heads // n_kv_heads
    q = _split_heads(matmul(h, wq), batch, seq, n_heads, hd)
    k = _split_heads(matmul(h, wk), batch, seq, n_kv_heads, hd)
    v = _split_heads(matmul(h, wv), batch, seq, n_kv_heads, hd)
    q = rope_apply(q, cos, sin)
    k = rope_apply(k, cos, sin)
    # each kv head serves `group` consecutive query heads
    k_full = np.repeat(k, group, axis=1)
    v_full = np.repeat(v, group, axis=1)
    scale = 1.0 / np.sqrt(hd)
    stack = batch * n_heads
    qs = q.reshape(stack, seq, hd)
    ks = k_full.reshape(stack, seq, hd)
    vs = v_full.reshape(stack, seq, hd)
    scores = bmm(qs, np.ascontiguousarray(ks.transpose(0, 2, 1))) * np.asarray(scale, dtype=h.dtype)
    probs = causal_softmax(scores)
    ctx = bmm(probs, vs).reshape(batch, n_heads, seq, hd)
    ctx2d = _merge_heads(ctx)
    out = matmul(ctx2d, wo)
    cache = (h, qs, ks, vs, probs, ctx2d, scale, batch, seq, n_heads, n_kv_heads, hd)
    return out, cache


def attention_backward(dout: np.ndarray, wq, wk, wv, wo, cache, cos, sin):
    h, qs, ks, vs, probs, ctx2d, scale, batch, seq, n_heads, n_kv_heads, hd = cache
    group = n_heads // n_kv_heads
    stack = batch * n_heads
    dctx2d, dwo = linear_backward(ctx2d, wo, dout)
    dctx = _split_heads(dctx2d, batch, seq, n_heads, hd).reshape(stack, seq, hd)
    dprobs = bmm(dctx, np.ascontiguousarray(vs.transpose(0, 2, 1)))
    dvs = bmm(np.ascontiguousarray(probs.transpose(0, 2, 1)), dctx)
    # softmax backward; masked entries have probs == 0 so they drop out
    inner = row_sum((dprobs * probs).reshape(-1, seq)).reshape(stack, seq, 1)
    dscores = probs * (dprobs - inner) * np.asarray(scale, dtype=h.dtype)
    dqs = bmm(dscores, ks)
    dks = bmm(np.ascontiguousarray(dscores.transpose(0, 2, 1)), qs)
    dq = rope_apply(dqs.reshape(batch, n_heads, seq, hd), cos, sin, inverse=True)
    dk_full = rope_apply(dks.reshape(batch, n_heads, seq, hd), cos, sin, inverse=True)
    dv_full = dvs.reshape(batch, n_heads, seq, hd)
    # fold query-head groups back onto their kv head, in head order
    dk = dk_full.reshape(batch, n_kv_heads, group, seq, hd).sum(axis=2)
    dv = dv_full.reshape(batch, n_kv_heads, group, seq, hd).sum(axis=2)
    dq2d, dk2d, dv2d = _merge_heads(dq), _merge_heads(dk), _merge_heads(dv)
    dh_q, dwq = linear_backward(h, wq, dq2d)
    dh_k, dwk = linear_backward(h, wk, dk2d)
    dh_v, dwv = linear_backward(h, wv, dv2d)
    return dh_q + dh_k + dh_v, dwq, dwk, dwv, dwo


# ---------------------------------------------------------------------------
# Gated linear unit with SiLU gate
# ---------------------------------------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def glu_forward(x: np.ndarray, w_in, w_gate, w_out):
    """``(silu(x @ w_gate) * (x @ w_in)) @ w_out``."""
    a = matmul(x, w_in)
    g = matmul(x, w_gate)
    sig = _sigmoid(g)
    act = g * sig * a
    return matmul(act, w_out), (x, a, g, sig, act)


def glu_backward(dy: np.ndarray, w_in, w_gate, w_out, cache):
    x, a, g, sig, act = cache
    dact, dw_out = linear_backward(act, w_out, dy)
    silu = g * sig
    da = dact * silu
    dg = dact * a * (sig * (1.0 + g * (1.0 - sig)))
    dx_a, dw_in = linear_backward(x, w_in, da)
    dx_g, dw_gate = linear_backward(x, w_gate, dg)
    return dx_a + dx_g, dw_in, dw_gate, dw_out
