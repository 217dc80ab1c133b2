"""Architecture descriptions and the full-size presets."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

from .errors import ConfigError


@dataclass(frozen=True)
class MoEConfig:
    n_experts: int = 8
    top_k: int = 2
    router_init_std: float = 0.02
    load_balance_coeff: float = 0.01

    def __post_init__(self):
        if self.n_experts < 1:
            raise ConfigError("n_experts must be >= 1")
        if not 1 <= self.top_k <= self.n_experts:
            raise ConfigError(f"top_k={self.top_k} must lie in [1, n_experts={self.n_experts}]")
        if self.load_balance_coeff < 0:
            raise ConfigError("load_balance_coeff must be >= 0")
        if self.router_init_std < 0:
            raise ConfigError("router_init_std must be >= 0")


@dataclass(frozen=True)
class ModelConfig:
    d_model: int
    n_layers: int
    n_heads: int
    n_kv_heads: int
    ffn_hidden: int
    vocab_size: int = 256
    max_seq_len: int = 4096
    norm_kind: str = "rmsnorm"
    tie_embeddings: bool = False
    moe: Optional[MoEConfig] = None
    rope_base: float = 10000.0
    norm_eps: float = 1e-6

    def __post_init__(self):
        for name in ("d_model", "n_layers", "n_heads", "n_kv_heads", "ffn_hidden", "vocab_size", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.n_heads % self.n_kv_heads:
            raise ConfigError("n_heads must be divisible by n_kv_heads")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.head_dim % 2:
            raise ConfigError("head_dim must be even for rotary embeddings")
        if self.norm_kind != "rmsnorm":
            raise ConfigError(f"unsupported norm_kind {self.norm_kind!r}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def is_moe(self) -> bool:
        return self.moe is not None

    def with_moe(self, moe: Optional[MoEConfig]) -> "ModelConfig":
        return dataclasses.replace(self, moe=moe)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def dense_parent(self) -> "ModelConfig":
        return dataclasses.replace(self, moe=None)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        data = dict(data)
        moe = data.pop("moe", None)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        try:
            return cls(**data, moe=MoEConfig(**moe) if moe else None)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


# Tokenizer vocabulary used for full-size accounting (cl100k_base, 100,277 ids
# including specials).  Desk-scale training uses bytes (256).
REFERENCE_VOCAB = 100_277

CONFIG_436M = ModelConfig(
    d_model=1024, n_layers=22, n_heads=16, n_kv_heads=4, ffn_hidden=2560,
    vocab_size=REFERENCE_VOCAB, max_seq_len=4096,
)
CONFIG_1_4B = ModelConfig(
    d_model=2048, n_layers=24, n_heads=16, n_kv_heads=4, ffn_hidden=5120,
    vocab_size=REFERENCE_VOCAB, max_seq_len=4096,
)
# Llama-3-8B-shaped dense model for the 8B / 47B serving comparison.
CONFIG_8B = ModelConfig(
    d_model=4096, n_layers=32, n_heads=32, n_kv_heads=8, ffn_hidden=14336,
    vocab_size=128_256, max_seq_len=8192,
)

UPCYCLED_MOE = MoEConfig(n_experts=8, top_k=2, router_init_std=0.02, load_balance_coeff=0.01)

PRESETS = {
    "436m": CONFIG_436M,
    "1.4b": CONFIG_1_4B,
    "8b": CONFIG_8B,
    "1.6b-moe": CONFIG_436M.with_moe(UPCYCLED_MOE),
    "6.7b-moe": CONFIG_1_4B.with_moe(UPCYCLED_MOE),
    "47b-moe": CONFIG_8B.with_moe(UPCYCLED_MOE),
}


def toy_config(**overrides) -> ModelConfig:
    """Small byte-level model for desk-scale experiments."""
    base = dict(d_model=64, n_layers=2, n_heads=4, n_kv_heads=2, ffn_hidden=160,
                vocab_size=256, max_seq_len=128)
    base.update(overrides)
    return ModelConfig(**base)


def table3_shaped_config(**overrides) -> ModelConfig:
    """The 436M layout (22 layers, 16/4 GQA heads, ffn = 2.5 d) shrunk to d=128."""
    base = dict(d_model=128, n_layers=22, n_heads=16, n_kv_heads=4, ffn_hidden=320,
                vocab_size=256, max_seq_len=128)
    base.update(overrides)
    return ModelConfig(**base)


def load_model_config(data) -> ModelConfig:
    """Accept a preset name (``"toy"`` included) or a config dict."""
    if isinstance(data, ModelConfig):
        return data
    if isinstance(data, str):
        if data.lower() == "toy":
            return toy_config()
        try:
            return PRESETS[data.lower()]
        except KeyError:
            raise ConfigError(f"unknown preset {data!r}; known: {sorted(PRESETS)}") from None
    if isinstance(data, dict):
        if "preset" in data:
            base = load_model_config(data["preset"])
            rest = {k: v for k, v in data.items() if k != "preset"}
            merged = base.to_dict()
            merged.update(rest)
            return ModelConfig.from_dict(merged)
        return ModelConfig.from_dict(data)
    raise ConfigError(f"cannot interpret model config {data!r}")

