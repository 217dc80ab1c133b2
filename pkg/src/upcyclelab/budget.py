"""FLOP accounting and iso-FLOP token planning.

FLOP convention (per token, forward pass):

* every weight matmul costs 2 FLOPs per weight touched: attention q/k/v/o
  projections, the router, the top_k routed GLU experts, and the output head;
* attention scores and the weighted value sum cost ``4 * d_model * seq_len``
  per layer;
* the input embedding is a table lookup and is free; norms and activations
  are ignored.

Training multiplies the forward cost by 3 (forward + backward).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

from .config import ModelConfig
from .errors import ConfigError, TableLookupError
from .model import count_params

PHASE_FACTOR = {"infer": 1, "train": 3}


def flops_breakdown(cfg: ModelConfig, seq_len: float) -> dict[str, float]:
    """Forward FLOPs per token split by term, summed over layers."""
    d, hd, L = cfg.d_model, cfg.head_dim, cfg.n_layers
    q_o = 2 * 2 * d * cfg.n_heads * hd
    k_v = 2 * 2 * d * cfg.n_kv_heads * hd
    k_active = cfg.moe.top_k if cfg.moe is not None else 1
    return {
        "attn_proj": L * (q_o + k_v),
        "attn_scores": L * 4 * d * seq_len,
        "mlp": L * k_active * 2 * 3 * d * cfg.ffn_hidden,
        "router": L * 2 * d * cfg.moe.n_experts if cfg.moe is not None else 0,
        "head": 2 * d * cfg.vocab_size,
    }


def flops_per_token(cfg: ModelConfig, seq_len: float, phase: str = "train") -> float:
    if phase not in PHASE_FACTOR:
        raise ConfigError(f"phase must be 'train' or 'infer', got {phase!r}")
    return PHASE_FACTOR[phase] * sum(flops_breakdown(cfg, seq_len).values())


def token_param_ratio(cfg: ModelConfig, tokens: float) -> float:
    """Training tokens per stored parameter."""
    if tokens < 0:
        raise ConfigError("tokens must be >= 0")
    return tokens / count_params(cfg).total


# ---------------------------------------------------------------------------
# Published duration tables
# ---------------------------------------------------------------------------

B = 1e9

# (model, duration, pretraining tokens, tokens per parameter)
PRETRAIN_TABLE = [
    ("436M", "Medium", 43.6 * B, 100),
    ("436M", "Long", 100 * B, 230),
    ("436M", "Extra Long", 200 * B, 460),
    ("1.4B", "Medium", 142 * B, 100),
    ("1.4B", "Long", 354 * B, 250),
]

# Additional-training grids, one list per (model, duration); position i of a
# CPT grid pairs with position i of the upcycled grid of the same duration.
ADDITIONAL_TOKENS = {
    ("436M", "Medium"): [4.3, 8.7, 17.5, 34.9, 43.6],
    ("436M", "Long"): [10, 20, 40, 80, 100],
    ("436M", "Extra Long"): [20, 40, 80, 100, 200],
    ("1.6B (Upcycled)", "Medium"): [3.2, 6.5, 13, 26, 32],
    ("1.6B (Upcycled)", "Long"): [7.5, 15, 30, 60, 75],
    ("1.6B (Upcycled)", "Extra Long"): [15, 30, 60, 120, 150],
    ("1.4B", "Medium"): [14, 28, 56, 113],
    ("1.4B", "Long"): [35, 70, 142, 284],
    ("6.7B (Upcycled)", "Medium"): [9.6, 19.3, 38.6, 77.2],
    ("6.7B (Upcycled)", "Long"): [24, 48, 96, 193],
}
UPCYCLED_OF = {"436M": "1.6B (Upcycled)", "1.4B": "6.7B (Upcycled)"}


def additional_training_rows() -> list[tuple[str, str, float]]:
    """Every published (model, duration, additional tokens) row."""
    return [(m, dur, v * B) for (m, dur), vals in ADDITIONAL_TOKENS.items() for v in vals]


def _size_label(cfg: ModelConfig) -> str:
    total = count_params(cfg.dense_parent()).total
    for label, ref in (("436M", 436e6), ("1.4B", 1.42e9)):
        if abs(total - ref) / ref <= 0.01:
            return label
    raise TableLookupError(f"no published table entry for a {total / 1e6:.1f}M-parameter dense model")


@dataclass(frozen=True)
class BudgetPlan:
    cpt_config: ModelConfig
    upcycled_config: ModelConfig
    cpt_tokens: float
    upcycled_tokens: float
    flops_per_token_cpt: float
    flops_per_token_upcycled: float
    mode: str
    seq_len: float
    duration: Optional[str] = None

    @property
    def cpt_flops(self) -> float:
        return self.cpt_tokens * self.flops_per_token_cpt

    @property
    def upcycled_flops(self) -> float:
        return self.upcycled_tokens * self.flops_per_token_upcycled

    @property
    def token_ratio(self) -> float:
        return self.upcycled_tokens / self.cpt_tokens

    def to_dict(self) -> dict:
        out = asdict(self)
        out.update(cpt_flops=self.cpt_flops, upcycled_flops=self.upcycled_flops, token_ratio=self.token_ratio)
        return out

    def table(self) -> str:
        rows = [
            ("mode", self.mode),
            ("cpt tokens", f"{self.cpt_tokens / B:.3f}B"),
            ("upcycled tokens", f"{self.upcycled_tokens / B:.3f}B"),
            ("train FLOPs/token (cpt)", f"{self.flops_per_token_cpt:.4e}"),
            ("train FLOPs/token (upcycled)", f"{self.flops_per_token_upcycled:.4e}"),
            ("total FLOPs (cpt)", f"{self.cpt_flops:.4e}"),
            ("total FLOPs (upcycled)", f"{self.upcycled_flops:.4e}"),
            ("upcycled / cpt tokens", f"{self.token_ratio:.4f}"),
        ]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


def _table4_lookup(cpt_cfg: ModelConfig, upcycled_cfg: ModelConfig, cpt_tokens: float,
                   duration: Optional[str]) -> tuple[float, str]:
    label = _size_label(cpt_cfg)
    if upcycled_cfg.moe is None or _size_label(upcycled_cfg) != label:
        raise TableLookupError("upcycled config is not the published upcycle of the CPT model")
    if upcycled_cfg.moe.n_experts != 8:
        raise TableLookupError("published pairings use 8 experts")
    durations = [duration] if duration else [dur for (m, dur) in ADDITIONAL_TOKENS if m == label]
    hits = {}
    for dur in durations:
        grid = ADDITIONAL_TOKENS.get((label, dur))
        if grid is None:
            raise TableLookupError(f"no {dur!r} duration for {label}")
        for i, v in enumerate(grid):
            if math.isclose(v * B, cpt_tokens, rel_tol=1e-9):
                hits[dur] = ADDITIONAL_TOKENS[(UPCYCLED_OF[label], dur)][i] * B
    if not hits:
        raise TableLookupError(f"{cpt_tokens / B:g}B CPT tokens is not a published {label} duration point")
    if len(set(hits.values())) > 1:
        raise TableLookupError(f"{cpt_tokens / B:g}B appears in several {label} grids with different "
                               f"pairings {hits}; pass duration")
    dur, tokens = next(iter(hits.items()))
    return tokens, (dur if len(hits) == 1 else duration)


def iso_flop_tokens(cpt_config: ModelConfig, upcycled_config: ModelConfig, cpt_tokens: float,
                    mode: str = "analytic", seq_len: float = 4096,
                    duration: Optional[str] = None) -> BudgetPlan:
    """Pair a CPT run with an upcycled run of equal training FLOPs.

    ``analytic`` solves ``upcycled_tokens = cpt_tokens * F_cpt / F_upcycled``
    under this module's FLOP convention; ``table4`` returns the published
    pairing for a published CPT duration point.
    """
    if cpt_tokens <= 0:
        raise ConfigError("cpt_tokens must be positive")
    f_cpt = flops_per_token(cpt_config, seq_len, "train")
    f_up = flops_per_token(upcycled_config, seq_len, "train")
    if mode == "analytic":
        up_tokens = float(round(cpt_tokens * f_cpt / f_up))
    elif mode == "table4":
        up_tokens, duration = _table4_lookup(cpt_config, upcycled_config, cpt_tokens, duration)
    else:
        raise ConfigError(f"mode must be 'analytic' or 'table4', got {mode!r}")
    return BudgetPlan(cpt_config, upcycled_config, float(cpt_tokens), up_tokens, f_cpt, f_up, mode,
                      seq_len, duration)
