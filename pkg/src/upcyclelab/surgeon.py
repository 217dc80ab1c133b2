"""Dense -> MoE checkpoint surgery (sparse upcycling)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ckptio import content_hash
from .config import MoEConfig
from .errors import ConfigError, StateError
from .model import GLU_NAMES, Checkpoint, forward, param_schema
from .numerics import RngStream


def upcycle(
    dense: Checkpoint,
    n_experts: int = 8,
    k: int = 2,
    router_init_std: float = 0.02,
    noise_std: float = 0.0,
    rng: RngStream | None = None,
    load_balance_coeff: float = 0.01,
) -> Checkpoint:
    """Turn every dense GLU block into an ``n_experts``-way MoE layer.

    Each expert starts as a copy of the block's GLU (plus independent
    Gaussian noise of ``noise_std`` when nonzero); attention, norms and
    embeddings are carried over untouched and each layer gets a fresh
    ``Normal(0, router_init_std)`` router.
    """
    if dense.config.moe is not None:
        raise StateError("checkpoint is already a mixture of experts")
    if n_experts < k:
        raise ConfigError(f"n_experts={n_experts} is smaller than top_k={k}")
    if noise_std < 0:
        raise ConfigError("noise_std must be >= 0")
    rng = rng if rng is not None else RngStream(0)
    moe_cfg = MoEConfig(n_experts=n_experts, top_k=k, router_init_std=router_init_std,
                        load_balance_coeff=load_balance_coeff)
    cfg = dense.config.with_moe(moe_cfg)
    src = dense.tensors
    dtype = dense.dtype
    tensors = {}
    for name in param_schema(cfg):
        if ".moe.router" in name:
            tensors[name] = rng.split(name).normal((cfg.d_model, n_experts), router_init_std, dtype=dtype)
        elif ".moe.experts." in name:
            layer_prefix, rest = name.split("moe.experts.")
            proj = rest.split(".", 1)[1]
            w = src[f"{layer_prefix}mlp.{proj}"].copy()
            if noise_std > 0:
                w = w + rng.split("noise/" + name).normal(w.shape, noise_std, dtype=dtype)
            tensors[name] = w
        else:
            tensors[name] = src[name].copy()
    meta = {
        "seed": rng.seed,
        "counter": rng.counter,
        "tokens_trained": dense.meta.get("tokens_trained", 0),
        "parent_hash": content_hash(dense),
        "upcycle": {"n_experts": n_experts, "top_k": k, "router_init_std": router_init_std,
                    "noise_std": noise_std},
    }
    return Checkpoint(cfg, tensors, meta).validate()


@dataclass(frozen=True)
class PreservationReport:
    max_abs_diff: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_abs_diff <= self.tol

    def __float__(self) -> float:
        return self.max_abs_diff


def verify_preservation(dense: Checkpoint, upcycled: Checkpoint, probe_tokens, tol: float = 1e-5,
                        chunk: int = 16) -> PreservationReport:
    """Max |logits_moe - logits_dense| over ``probe_tokens`` (batch, seq)."""
    if upcycled.config.moe is None or upcycled.config.dense_parent() != dense.config:
        raise StateError("upcycled checkpoint does not derive from this dense config")
    probe = np.asarray(probe_tokens)
    worst = 0.0
    for lo in range(0, probe.shape[0], chunk):
        batch = probe[lo:lo + chunk]
        a = forward(dense, batch).logits
        b = forward(upcycled, batch).logits
        worst = max(worst, float(np.max(np.abs(a.astype(np.float64) - b))))
    return PreservationReport(worst, tol)


def glu_copies_identical(dense: Checkpoint, upcycled: Checkpoint) -> bool:
    """True when every expert matrix equals its source GLU matrix bit for bit."""
    cfg = upcycled.config
    for i in range(cfg.n_layers):
        for e in range(cfg.moe.n_experts):
            for n in GLU_NAMES:
                a = dense.tensors[f"layers.{i}.mlp.{n}"]
                b = upcycled.tensors[f"layers.{i}.moe.experts.{e}.{n}"]
                if a.tobytes() != b.tobytes():
                    return False
    return True
