"""Pipeline operations shared by the command line and the manifest runner.

Each function takes plain JSON-compatible arguments, writes its artifacts
and returns a dict of produced paths.  Training stages write the checkpoint
at ``out`` plus ``<stem>_metrics.csv`` and ``<stem>_run.json`` beside it.
"""

from __future__ import annotations

import json
import os
from typing import Optional

import numpy as np

from . import ckptio
from .budget import iso_flop_tokens
from .config import load_model_config
from .data import build_tasks, domain_corpus, encode, evaluate, generic_corpus
from .errors import ConfigError
from .experiment import DeskExperiment, run_experiment
from .model import init_dense
from .numerics import RngStream
from .report import RunPair, emit_report, write_sweep
from .servesim import HardwareProfile, SweepResult, WorkloadSpec, h100, model_footprint, sweep_rps
from .surgeon import upcycle
from .trainer import PUBLISHED_PLANS, RunMetrics, TrainPlan, train_run


def read_json(path: str):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


def write_json(path: str, obj) -> str:
    d = os.path.dirname(path)
    if d:
        os.makedirs(d, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _maybe_file(value):
    """Strings naming an existing .json file are loaded; anything else passes through."""
    if isinstance(value, str) and value.endswith(".json") and os.path.exists(value):
        return read_json(value)
    return value


def make_corpus(spec: Optional[dict], seed: int, n_tokens: int, default_kind: str) -> np.ndarray:
    """Build a token stream from ``{"kind": generic|domain|repeat|file, ...}``.

    Generated corpora depend only on (seed, kind), so a CPT run and an
    upcycled run that name the same kind read the same tokens.
    """
    spec = dict(spec or {})
    kind = spec.pop("kind", default_kind)
    n = int(spec.pop("n_tokens", n_tokens))
    root = RngStream(seed).split(f"corpus/{kind}")
    if kind == "generic":
        return generic_corpus(n, root)
    if kind == "domain":
        return domain_corpus(n, root)
    if kind == "repeat":
        unit = encode(spec.get("text", "abcdefgh "))
        return np.resize(unit, n)
    if kind == "file":
        with open(spec["path"], "rb") as fh:
            return np.frombuffer(fh.read(), dtype=np.uint8).copy()
    raise ConfigError(f"unknown corpus kind {kind!r}")


def build_plan(phase: str, plan: Optional[dict], seed: int) -> TrainPlan:
    data = dict(PUBLISHED_PLANS[phase])
    data.update(plan or {})
    data["phase"] = phase
    data.setdefault("seed", seed)
    return TrainPlan.from_dict(data)


def _save_run(out: str, ckpt, metrics: RunMetrics, plan: TrainPlan) -> dict:
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    digest = ckptio.save(ckpt, out)
    stem = os.path.splitext(out)[0]
    metrics.write_csv(stem + "_metrics.csv")
    write_json(stem + "_run.json", {"plan": plan.to_dict(), "metrics": metrics.to_dict(), "hash": digest})
    return {"checkpoint": out, "metrics_csv": stem + "_metrics.csv", "run": stem + "_run.json", "hash": digest}


def _eval_fn(n_items: int, seed: int):
    if not n_items:
        return None
    tasks = build_tasks(RngStream(seed).split("eval"), n_items)
    return lambda ck: evaluate(ck, tasks)


def pretrain(out: str, model, plan: Optional[dict] = None, corpus: Optional[dict] = None, seed: int = 0,
             eval_items: int = 0) -> dict:
    """Initialise a dense model and pretrain it."""
    cfg = load_model_config(_maybe_file(model))
    if cfg.moe is not None:
        raise ConfigError("pretraining starts from a dense config")
    tp = build_plan("pretrain", plan, seed)
    tokens = make_corpus(corpus, seed, tp.data_offset + tp.n_steps * tp.tokens_per_step + 1, "generic")
    ckpt = init_dense(cfg, RngStream(tp.seed).split("init"))
    ckpt, metrics = train_run(ckpt, tokens, tp, _eval_fn(eval_items, seed),
                              checkpoint_dir=_milestone_dir(out, tp), label="pretrain")
    return _save_run(out, ckpt, metrics, tp)


def _milestone_dir(out: str, tp: TrainPlan) -> Optional[str]:
    return os.path.splitext(out)[0] + "_milestones" if tp.milestones else None


def cpt(out: str, checkpoint: str, plan: Optional[dict] = None, corpus: Optional[dict] = None, seed: int = 0,
        eval_items: int = 0) -> dict:
    """Continue training a checkpoint; MoE checkpoints use the upcycled-CPT phase."""
    ckpt = ckptio.load(checkpoint)
    phase = "upcycle_cpt" if ckpt.config.moe is not None else "cpt"
    tp = build_plan(phase, plan, seed)
    tokens = make_corpus(corpus, seed, tp.data_offset + tp.n_steps * tp.tokens_per_step + 1, "domain")
    ckpt, metrics = train_run(ckpt, tokens, tp, _eval_fn(eval_items, seed),
                              checkpoint_dir=_milestone_dir(out, tp), label=phase)
    return _save_run(out, ckpt, metrics, tp)


def upcycle_file(out: str, checkpoint: str, experts: int = 8, top_k: int = 2, router_std: float = 0.02,
                 noise_std: float = 0.0, seed: int = 0) -> dict:
    dense = ckptio.load(checkpoint)
    moe = upcycle(dense, n_experts=experts, k=top_k, router_init_std=router_std, noise_std=noise_std,
                  rng=RngStream(seed).split("upcycle"))
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    return {"checkpoint": out, "hash": ckptio.save(moe, out), "parent_hash": moe.meta["parent_hash"]}


def plan_budget(cpt_config, moe_config, cpt_tokens: float, mode: str = "analytic",
                duration: Optional[str] = None, seq_len: float = 4096, out: Optional[str] = None) -> dict:
    plan = iso_flop_tokens(load_model_config(_maybe_file(cpt_config)), load_model_config(_maybe_file(moe_config)),
                           float(cpt_tokens), mode=mode, seq_len=seq_len, duration=duration)
    result = plan.to_dict()
    result["cpt_config"] = plan.cpt_config.to_dict()
    result["upcycled_config"] = plan.upcycled_config.to_dict()
    result["table"] = plan.table()
    if out:
        write_json(out, result)
        result["path"] = out
    return result


def resolve_hardware(spec) -> HardwareProfile:
    """``"h100"``, ``"h100x4"``, a dict, or a JSON file path."""
    spec = _maybe_file(spec)
    if spec is None:
        return h100()
    if isinstance(spec, dict):
        return HardwareProfile.from_dict(spec)
    if isinstance(spec, str) and spec.lower().startswith("h100"):
        rest = spec.lower()[4:]
        if rest == "":
            return h100()
        if rest.startswith("x") and rest[1:].isdigit():
            return h100(int(rest[1:]))
    raise ConfigError(f"unknown hardware {spec!r}; use h100, h100xN or a JSON file")


def resolve_serving_model(spec, workload: WorkloadSpec, top_k: Optional[int] = None, name: str = ""):
    """Preset name, config dict / JSON file, or a .upcy checkpoint."""
    if isinstance(spec, str) and spec.endswith(".upcy"):
        cfg = ckptio.load(spec).config
    else:
        cfg = load_model_config(_maybe_file(spec))
    return model_footprint(cfg, k=top_k, input_tokens=workload.input_tokens,
                           output_tokens=workload.output_tokens, name=name)


def bench_sim(out_dir: str, model, hardware="h100", workload=None, baseline=None,
              top_k: Optional[int] = None, name: str = "") -> dict:
    """Sweep request rates for one model and, optionally, a dense baseline."""
    wl = WorkloadSpec.from_dict(_maybe_file(workload)) if workload else WorkloadSpec()
    prof = resolve_hardware(hardware)
    os.makedirs(out_dir, exist_ok=True)
    base = None
    if baseline is not None:
        base = sweep_rps(wl, resolve_serving_model(baseline, wl), prof)
    res = sweep_rps(wl, resolve_serving_model(model, wl, top_k, name), prof, baseline=base)
    files = write_sweep(res, out_dir, "sweep")
    files["result"] = write_json(os.path.join(out_dir, "sweep_result.json"), res.to_dict())
    if base is not None:
        files["baseline_result"] = write_json(os.path.join(out_dir, "baseline_result.json"), base.to_dict())
    files["summary_data"] = res.summary()
    return files


def eval_checkpoint(checkpoint: str, n_items: int = 48, seed: int = 0, out: Optional[str] = None) -> dict:
    ckpt = ckptio.load(checkpoint)
    result = evaluate(ckpt, build_tasks(RngStream(seed).split("eval"), n_items))
    if out:
        write_json(out, result)
    return result


def load_run(path: str) -> RunMetrics:
    data = read_json(path)
    return RunMetrics.from_dict(data["metrics"] if "metrics" in data else data)


def report(out_dir: str, runs: Optional[dict] = None, pairs: Optional[list] = None,
           sweeps: Optional[list] = None) -> dict:
    """Render tables and charts from saved ``*_run.json`` and ``sweep_result.json`` files."""
    loaded = {label: load_run(path) for label, path in (runs or {}).items()}
    run_pairs = [RunPair(p["cpt"], p["upcycled"], float(p["additional_tokens"]), p.get("series", "upcycled vs cpt"))
                 for p in (pairs or [])]
    results = [SweepResult.from_dict(read_json(path)) for path in sweeps or []]
    return emit_report(out_dir, loaded, run_pairs, results)


def experiment(out_dir: str, seed: int = 0, **overrides) -> dict:
    """The full desk-scale CPT-vs-upcycle comparison."""
    if "cpt_steps" in overrides:
        overrides["cpt_steps"] = tuple(overrides["cpt_steps"])
    exp = DeskExperiment(seed=seed, **overrides)
    result = run_experiment(exp, out_dir)
    return {"summary": os.path.join(out_dir, "experiment_summary.json"),
            "upcycled_beats_cpt_at_largest_budget": result.summary()["upcycled_beats_cpt_at_largest_budget"]}
