import json

import pytest

from upcyclelab.experiment import DeskExperiment, run_experiment

SMALL = DeskExperiment(batch_size=4, seq_len=32, pretrain_steps=40, cpt_steps=(10, 20), eval_items=2, log_every=5)


@pytest.fixture(scope="module")
def result(tmp_path_factory):
    out = tmp_path_factory.mktemp("exp")
    return run_experiment(SMALL, str(out)), out


def test_iso_flop_pairs(result):
    res, _ = result
    assert [p["cpt_tokens"] for p in res.plans] == [10 * 128, 20 * 128]
    for p in res.plans:
        # rounding to whole steps keeps the FLOP match within half a step
        per_tok = p["upcycled_flops"] / p["upcycled_tokens"]
        assert abs(p["upcycled_flops"] - p["cpt_flops"]) <= 0.5 * 128 * per_tok + 1e-6
        assert p["upcycled_tokens"] < p["cpt_tokens"]


def test_summary_and_artifacts(result):
    res, out = result
    summary = json.loads((out / "experiment_summary.json").read_text())
    assert summary["n_params_moe"] > summary["n_params_dense"]
    assert isinstance(summary["upcycled_beats_cpt_at_largest_budget"], bool)
    assert len(summary["pairs"]) == 2
    for name in ("relative_improvement.svg", "relative_improvement.csv", "ce_curves.svg", "pretrain_metrics.csv"):
        assert (out / name).exists()
    assert "heldout_ce" in res.runs["cpt_1280"].final_eval


def test_rerun_is_identical(result):
    res, _ = result
    again = run_experiment(SMALL)
    assert again.final_hashes == res.final_hashes
    assert again.rows() == res.rows()
