import json
import os

import pytest

from upcyclelab import ckptio
from upcyclelab.errors import ConfigError, StageError
from upcyclelab.manifest import ExperimentManifest, run_manifest

PLAN = {"batch_size": 2, "seq_len": 32, "warmup_tokens": 64, "total_tokens": 640, "log_every": 2}


def pipeline(**extra):
    return {
        "seed": 3,
        "stages": [
            {"name": "base", "op": "pretrain", "args": {"model": "toy", "plan": PLAN}},
            {"name": "moe", "op": "upcycle", "args": {"checkpoint": "@base"}},
            {"name": "dense_cpt", "op": "cpt", "args": {"checkpoint": "@base", "plan": PLAN}},
            {"name": "moe_cpt", "op": "cpt", "args": {"checkpoint": "@moe", "plan": PLAN}},
            {"name": "budget", "op": "plan-budget",
             "args": {"cpt_config": "toy", "moe_config": {"preset": "toy", "moe": {"n_experts": 8, "top_k": 2}},
                      "cpt_tokens": 640, "seq_len": 32}},
            {"name": "report", "op": "report",
             "args": {"runs": {"cpt": "@dense_cpt:run", "up": "@moe_cpt:run"},
                      "pairs": [{"cpt": "cpt", "upcycled": "up", "additional_tokens": 640}]}},
        ],
        **extra,
    }


def tree(root):
    out = {}
    for d, _, files in os.walk(root):
        for f in files:
            p = os.path.join(d, f)
            out[os.path.relpath(p, root)] = open(p, "rb").read()
    return out


def test_end_to_end_pipeline_is_reproducible(tmp_path, monkeypatch):
    monkeypatch.delenv("UPCYCLE_SEED", raising=False)
    m = ExperimentManifest.from_dict(pipeline())
    out = run_manifest(m, str(tmp_path / "a"))
    run_manifest(m, str(tmp_path / "b"))
    a, b = tree(tmp_path / "a"), tree(tmp_path / "b")
    assert a == b
    assert {"base/model.upcy", "moe/model.upcy", "report/relative_improvement.svg",
            "budget/plan.json", "manifest_run.json"} <= set(a)
    moe = ckptio.load(out["moe"]["checkpoint"])
    assert moe.meta["parent_hash"] == ckptio.content_hash(ckptio.load(out["base"]["checkpoint"]))
    summary = json.loads(a["manifest_run.json"])
    assert summary["order"].index("base") < summary["order"].index("moe") < summary["order"].index("moe_cpt")


def test_env_seed_overrides_manifest(tmp_path, monkeypatch):
    m = ExperimentManifest.from_dict({"seed": 1, "stages": pipeline()["stages"][:1]})
    monkeypatch.delenv("UPCYCLE_SEED", raising=False)
    run_manifest(m, str(tmp_path / "a"))
    monkeypatch.setenv("UPCYCLE_SEED", "1")
    run_manifest(m, str(tmp_path / "b"))
    monkeypatch.setenv("UPCYCLE_SEED", "2")
    run_manifest(m, str(tmp_path / "c"))
    a, b, c = (tree(tmp_path / x)["base/model.upcy"] for x in "abc")
    assert a == b != c
    monkeypatch.setenv("UPCYCLE_SEED", "two")
    with pytest.raises(ConfigError):
        run_manifest(m, str(tmp_path / "d"))


def test_empty_manifest(tmp_path):
    out = run_manifest(ExperimentManifest.from_dict({"stages": []}), str(tmp_path / "e"))
    assert out == {} and os.listdir(tmp_path / "e") == []


def test_cycle_is_rejected_before_running(tmp_path):
    data = {"stages": [{"name": "a", "op": "upcycle", "args": {"checkpoint": "@b"}},
                       {"name": "b", "op": "upcycle", "args": {"checkpoint": "@a"}}]}
    with pytest.raises(ConfigError, match="cycle"):
        ExperimentManifest.from_dict(data)


@pytest.mark.parametrize("data,pointer", [
    ({"stages": [{"name": "a", "op": "train"}]}, "/stages/0/op"),
    ({"stages": [{"name": "a"}]}, "/stages/0"),
    ({"seed": -1, "stages": []}, "/seed"),
    ({"stages": [], "extra": 1}, "/"),
])
def test_schema_errors_carry_json_pointer(data, pointer):
    with pytest.raises(ConfigError) as info:
        ExperimentManifest.from_dict(data)
    assert f"manifest {pointer}:" in str(info.value)


def test_bad_references():
    with pytest.raises(ConfigError, match="unknown stages"):
        ExperimentManifest.from_dict({"stages": [{"name": "a", "op": "upcycle", "args": {"checkpoint": "@zz"}}]})
    with pytest.raises(ConfigError, match="duplicate"):
        ExperimentManifest.from_dict({"stages": [{"name": "a", "op": "eval"}, {"name": "a", "op": "eval"}]})


def test_stage_failure_names_the_stage(tmp_path):
    m = ExperimentManifest.from_dict({"stages": [
        {"name": "lift", "op": "upcycle", "args": {"checkpoint": str(tmp_path / "nope.upcy")}}]})
    with pytest.raises(StageError, match="lift"):
        run_manifest(m, str(tmp_path / "out"))


def test_unknown_stage_argument(tmp_path):
    m = ExperimentManifest.from_dict({"stages": [{"name": "b", "op": "plan-budget", "args": {"colour": 1}}]})
    with pytest.raises(ConfigError, match="colour"):
        run_manifest(m, str(tmp_path))
