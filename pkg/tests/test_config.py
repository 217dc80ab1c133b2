import pytest

from upcyclelab.config import (CONFIG_1_4B, CONFIG_436M, PRESETS, MoEConfig, ModelConfig, load_model_config,
                               toy_config)
from upcyclelab.errors import ConfigError


def test_presets_have_published_shapes():
    assert (CONFIG_436M.d_model, CONFIG_436M.n_layers, CONFIG_436M.n_heads, CONFIG_436M.n_kv_heads) == (1024, 22, 16, 4)
    assert (CONFIG_1_4B.d_model, CONFIG_1_4B.n_layers, CONFIG_1_4B.n_heads, CONFIG_1_4B.n_kv_heads) == (2048, 24, 16, 4)
    assert PRESETS["1.6b-moe"].moe == MoEConfig(8, 2, 0.02, 0.01)
    assert PRESETS["1.6b-moe"].dense_parent() == CONFIG_436M


@pytest.mark.parametrize("kwargs", [
    dict(d_model=64, n_layers=2, n_heads=4, n_kv_heads=3, ffn_hidden=8),
    dict(d_model=60, n_layers=2, n_heads=8, n_kv_heads=4, ffn_hidden=8),
    dict(d_model=12, n_layers=2, n_heads=4, n_kv_heads=4, ffn_hidden=8),  # odd head_dim
    dict(d_model=64, n_layers=0, n_heads=4, n_kv_heads=4, ffn_hidden=8),
    dict(d_model=64, n_layers=2, n_heads=4, n_kv_heads=4, ffn_hidden=8, norm_kind="layernorm"),
])
def test_invalid_model_configs(kwargs):
    with pytest.raises(ConfigError):
        ModelConfig(**kwargs)


def test_invalid_moe_configs():
    with pytest.raises(ConfigError):
        MoEConfig(n_experts=2, top_k=3)
    with pytest.raises(ConfigError):
        MoEConfig(load_balance_coeff=-1)


def test_dict_round_trip_and_unknown_keys():
    cfg = toy_config().with_moe(MoEConfig(4, 1))
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        ModelConfig.from_dict(dict(cfg.to_dict(), colour="red"))


def test_load_model_config_forms():
    assert load_model_config("436M") == CONFIG_436M
    assert load_model_config({"preset": "436m", "n_layers": 2}).n_layers == 2
    assert load_model_config(CONFIG_436M) is CONFIG_436M
    with pytest.raises(ConfigError):
        load_model_config("nope")
    with pytest.raises(ConfigError):
        load_model_config(3)
