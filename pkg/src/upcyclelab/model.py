"""Decoder-only transformer: tensor schema, parameter accounting, forward, backward.

Tensor naming schema (every tensor is 2-D)::

    embed.weight                          (vocab, d)
    layers.{i}.attn_norm.weight           (1, d)
    layers.{i}.attn.wq                    (d, n_heads * head_dim)
    layers.{i}.attn.wk / wv               (d, n_kv_heads * head_dim)
    layers.{i}.attn.wo                    (n_heads * head_dim, d)
    layers.{i}.mlp_norm.weight            (1, d)
    layers.{i}.mlp.w_in / w_gate          (d, ffn)         dense blocks
    layers.{i}.mlp.w_out                  (ffn, d)
    layers.{i}.moe.router                 (d, n_experts)   MoE blocks
    layers.{i}.moe.experts.{e}.w_in ...   as the dense GLU
    final_norm.weight                     (1, d)
    lm_head.weight                        (d, vocab)       absent when tied
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .config import ModelConfig
from .errors import NumericError, ShapeError, StateError
from .layers import (attention_backward, attention_forward, linear_backward, rmsnorm_backward,
                     rmsnorm_forward, rope_tables)
from .moe import RouterStats, moe_backward, moe_forward
from .layers import glu_backward, glu_forward
from .numerics import RngStream, cross_entropy_with_grad, matmul

GLU_NAMES = ("w_in", "w_gate", "w_out")


# ---------------------------------------------------------------------------
# Schema and accounting
# ---------------------------------------------------------------------------


def glu_shapes(cfg: ModelConfig) -> dict[str, tuple[int, int]]:
    d, f = cfg.d_model, cfg.ffn_hidden
    return {"w_in": (d, f), "w_gate": (d, f), "w_out": (f, d)}


def param_schema(cfg: ModelConfig) -> dict[str, tuple[int, int]]:
    """Ordered map of tensor name to shape implied by ``cfg``."""
    d, hd = cfg.d_model, cfg.head_dim
    shapes: dict[str, tuple[int, int]] = {"embed.weight": (cfg.vocab_size, d)}
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        shapes[p + "attn_norm.weight"] = (1, d)
        shapes[p + "attn.wq"] = (d, cfg.n_heads * hd)
        shapes[p + "attn.wk"] = (d, cfg.n_kv_heads * hd)
        shapes[p + "attn.wv"] = (d, cfg.n_kv_heads * hd)
        shapes[p + "attn.wo"] = (cfg.n_heads * hd, d)
        shapes[p + "mlp_norm.weight"] = (1, d)
        if cfg.moe is None:
            for name, shape in glu_shapes(cfg).items():
                shapes[p + "mlp." + name] = shape
        else:
            shapes[p + "moe.router"] = (d, cfg.moe.n_experts)
            for e in range(cfg.moe.n_experts):
                for name, shape in glu_shapes(cfg).items():
                    shapes[f"{p}moe.experts.{e}.{name}"] = shape
    shapes["final_norm.weight"] = (1, d)
    if not cfg.tie_embeddings:
        shapes["lm_head.weight"] = (d, cfg.vocab_size)
    return shapes


@dataclass(frozen=True)
class ParamCount:
    total: int
    active: int
    embedding: int
    convention: str = (
        "total: every stored parameter. active: parameters that take part in a "
        "matmul for one token, i.e. attention, norms, router, top_k experts per "
        "layer and the output head; the input embedding table is a row lookup and "
        "is excluded (when embeddings are tied the shared matrix counts once, as the head)."
    )


def count_params(cfg: ModelConfig) -> ParamCount:
    """Closed-form parameter totals for ``cfg`` (independent of :func:`param_schema`)."""
    d, hd, f = cfg.d_model, cfg.head_dim, cfg.ffn_hidden
    attn = d * cfg.n_heads * hd * 2 + d * cfg.n_kv_heads * hd * 2
    norms = 2 * d
    glu = 3 * d * f
    emb = cfg.vocab_size * d
    head = 0 if cfg.tie_embeddings else cfg.vocab_size * d
    if cfg.moe is None:
        per_layer_total = attn + norms + glu
        per_layer_active = per_layer_total
    else:
        router = d * cfg.moe.n_experts
        per_layer_total = attn + norms + router + cfg.moe.n_experts * glu
        per_layer_active = attn + norms + router + cfg.moe.top_k * glu
    total = cfg.n_layers * per_layer_total + d + emb + head
    active = cfg.n_layers * per_layer_active + d + (head if head else emb)
    return ParamCount(total=total, active=active, embedding=emb)


def glu_param_count(cfg: ModelConfig) -> int:
    """Parameters in one dense GLU block."""
    return 3 * cfg.d_model * cfg.ffn_hidden


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def validate(self) -> "Checkpoint":
        schema = param_schema(self.config)
        if list(self.tensors) != list(schema):
            missing = set(schema) - set(self.tensors)
            extra = set(self.tensors) - set(schema)
            if missing or extra:
                raise StateError(f"tensor set mismatch: missing {sorted(missing)[:5]}, extra {sorted(extra)[:5]}")
            self.tensors = {name: self.tensors[name] for name in schema}
        for name, shape in schema.items():
            t = self.tensors[name]
            if t.shape != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {t.shape}")
            if not np.isfinite(t).all():
                raise NumericError(f"{name} contains non-finite values")
        return self

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def astype(self, dtype) -> "Checkpoint":
        return Checkpoint(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()}, dict(self.meta))

    def copy(self) -> "Checkpoint":
        return Checkpoint(self.config, {k: v.copy() for k, v in self.tensors.items()}, dict(self.meta))

    def n_params(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))


def _is_residual_output(name: str) -> bool:
    return name.endswith("attn.wo") or name.endswith("w_out")


def init_dense(cfg: ModelConfig, rng: RngStream, dtype=np.float32) -> Checkpoint:
    """Truncated-normal(0.02) init; residual output projections use 0.02 / sqrt(2 L).

    Norm gains start at one.  Each tensor draws from its own stream keyed by
    name, so adding or reordering tensors never shifts another tensor's values.
    """
    if cfg.moe is not None:
        raise StateError("init_dense needs a dense config; build MoE models with surgeon.upcycle")
    tensors = {}
    out_std = 0.02 / math.sqrt(2 * cfg.n_layers)
    for name, shape in param_schema(cfg).items():
        if name.endswith("norm.weight"):
            tensors[name] = np.ones(shape, dtype=dtype)
        else:
            std = out_std if _is_residual_output(name) else 0.02
            tensors[name] = rng.split(name).truncated_normal(shape, std, dtype=dtype)
    return Checkpoint(cfg, tensors, {"seed": rng.seed, "counter": rng.counter, "tokens_trained": 0,
                                     "parent_hash": None})


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


@dataclass
class ActivationTape:
    config: ModelConfig
    tensor_ids: tuple
    tokens: np.ndarray
    batch: int
    seq: int
    rope: tuple
    layers: list
    final_cache: tuple
    final_h: np.ndarray


@dataclass
class ForwardResult:
    logits: np.ndarray              # (batch * seq, vocab), row b*seq + t
    aux: list[RouterStats]          # one entry per MoE layer, empty for dense
    activation_tape: ActivationTape

    @property
    def aux_loss(self) -> float:
        """Mean per-layer load-balance loss (0 for dense models)."""
        if not self.aux:
            return 0.0
        return float(np.mean([s.load_balance_loss for s in self.aux]))


def _experts(t: dict, prefix: str, n_experts: int):
    return [tuple(t[f"{prefix}moe.experts.{e}.{n}"] for n in GLU_NAMES) for e in range(n_experts)]


def _tensor_ids(ckpt: Checkpoint) -> tuple:
    return tuple(id(v) for v in ckpt.tensors.values())


def forward(ckpt: Checkpoint, tokens) -> ForwardResult:
    """Causal forward pass over a ``(batch, seq)`` array of token ids."""
    cfg = ckpt.config
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    batch, seq = tokens.shape
    if seq > cfg.max_seq_len:
        raise ShapeError(f"sequence length {seq} exceeds max_seq_len {cfg.max_seq_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise IndexError("token id outside the vocabulary")
    t = ckpt.tensors
    dtype = t["embed.weight"].dtype
    cos, sin = rope_tables(seq, cfg.head_dim, cfg.rope_base, dtype)
    x = t["embed.weight"][tokens.reshape(-1)]
    layer_tapes = []
    aux = []
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        h, norm1 = rmsnorm_forward(x, t[p + "attn_norm.weight"], cfg.norm_eps)
        attn_out, attn_cache = attention_forward(
            h, t[p + "attn.wq"], t[p + "attn.wk"], t[p + "attn.wv"], t[p + "attn.wo"],
            batch, seq, cfg.n_heads, cfg.n_kv_heads, cos, sin)
        x = x + attn_out
        h2, norm2 = rmsnorm_forward(x, t[p + "mlp_norm.weight"], cfg.norm_eps)
        if cfg.moe is None:
            mlp_out, mlp_cache = glu_forward(h2, *(t[p + "mlp." + n] for n in GLU_NAMES))
        else:
            mlp_out, stats, mlp_cache = moe_forward(
                _experts(t, p, cfg.moe.n_experts), t[p + "moe.router"], h2, cfg.moe.top_k)
            aux.append(stats)
        x = x + mlp_out
        if not np.isfinite(x).all():
            raise NumericError(f"non-finite activation in layer {i}")
        layer_tapes.append((norm1, attn_cache, norm2, mlp_cache))
    hf, final_cache = rmsnorm_forward(x, t["final_norm.weight"], cfg.norm_eps)
    head = t["embed.weight"].T if cfg.tie_embeddings else t["lm_head.weight"]
    logits = matmul(hf, head)
    if not np.isfinite(logits).all():
        raise NumericError("non-finite logits")
    tape = ActivationTape(cfg, _tensor_ids(ckpt), tokens, batch, seq, (cos, sin), layer_tapes, final_cache, hf)
    return ForwardResult(logits, aux, tape)


def backward(ckpt: Checkpoint, tape: ActivationTape, loss_grad: np.ndarray, aux_grad: float = 0.0) -> dict:
    """Gradient map (same names as the weights) given dL/dlogits.

    ``aux_grad`` is dL/d(mean per-layer load-balance loss); pass the
    load-balance coefficient when the training loss is CE + coeff * aux.
    """
    cfg = ckpt.config
    if tape.config != cfg or tape.tensor_ids != _tensor_ids(ckpt):
        raise StateError("activation tape was produced by a different checkpoint")
    if loss_grad.shape != (tape.batch * tape.seq, cfg.vocab_size):
        raise ShapeError("loss gradient does not match the forward logits")
    t = ckpt.tensors
    cos, sin = tape.rope
    grads: dict[str, np.ndarray] = {}
    loss_grad = loss_grad.astype(t["embed.weight"].dtype, copy=False)
    if cfg.tie_embeddings:
        dhf, dhead = linear_backward(tape.final_h, t["embed.weight"].T, loss_grad)
        d_embed_head = dhead.T
    else:
        dhf, grads["lm_head.weight"] = linear_backward(tape.final_h, t["lm_head.weight"], loss_grad)
    dx, grads["final_norm.weight"] = rmsnorm_backward(dhf, t["final_norm.weight"], tape.final_cache)
    n_moe = cfg.n_layers if cfg.moe is not None else 0
    for i in reversed(range(cfg.n_layers)):
        p = f"layers.{i}."
        norm1, attn_cache, norm2, mlp_cache = tape.layers[i]
        if cfg.moe is None:
            dh2, *gw = glu_backward(dx, *(t[p + "mlp." + n] for n in GLU_NAMES), mlp_cache)
            for n, g in zip(GLU_NAMES, gw):
                grads[p + "mlp." + n] = g
        else:
            experts = _experts(t, p, cfg.moe.n_experts)
            dh2, egrads, grads[p + "moe.router"] = moe_backward(
                mlp_cache, dx, experts, t[p + "moe.router"], aux_scale=aux_grad / n_moe)
            for e, gw in enumerate(egrads):
                for n, g in zip(GLU_NAMES, gw):
                    grads[f"{p}moe.experts.{e}.{n}"] = g
        dnorm, grads[p + "mlp_norm.weight"] = rmsnorm_backward(dh2, t[p + "mlp_norm.weight"], norm2)
        dx = dx + dnorm
        dh, gq, gk, gv, go = attention_backward(
            dx, t[p + "attn.wq"], t[p + "attn.wk"], t[p + "attn.wv"], t[p + "attn.wo"], attn_cache, cos, sin)
        grads[p + "attn.wq"], grads[p + "attn.wk"], grads[p + "attn.wv"], grads[p + "attn.wo"] = gq, gk, gv, go
        dnorm, grads[p + "attn_norm.weight"] = rmsnorm_backward(dh, t[p + "attn_norm.weight"], norm1)
        dx = dx + dnorm
    d_embed = np.zeros_like(t["embed.weight"])
    np.add.at(d_embed, tape.tokens.reshape(-1), dx)
    if cfg.tie_embeddings:
        d_embed += d_embed_head
    grads["embed.weight"] = d_embed
    return {name: grads[name] for name in t}


def loss_and_grads(ckpt: Checkpoint, inputs, targets, lb_coeff: float = 0.0):
    """Training objective ``CE + lb_coeff * mean layer load-balance loss`` and its gradients.

    Returns ``(total_loss, ce, aux, grads, ForwardResult)``.
    """
    res = forward(ckpt, inputs)
    ce, dlogits = cross_entropy_with_grad(res.logits, np.asarray(targets).reshape(-1))
    coeff = lb_coeff if ckpt.config.moe is not None else 0.0
    aux = res.aux_loss
    grads = backward(ckpt, res.activation_tape, dlogits, aux_grad=coeff)
    return ce + coeff * aux, ce, aux, grads, res


def sequence_logprob(ckpt: Checkpoint, tokens) -> np.ndarray:
    """Next-token log-probabilities, shape ``(batch, seq - 1)``, for a ``(batch, seq)`` array."""
    tokens = np.asarray(tokens, dtype=np.int64)
    res = forward(ckpt, tokens[:, :-1])
    logits = res.logits.astype(np.float64)
    logits -= logits.max(axis=1, keepdims=True)
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    picked = logp[np.arange(logp.shape[0]), tokens[:, 1:].reshape(-1)]
    return picked.reshape(tokens.shape[0], -1)
