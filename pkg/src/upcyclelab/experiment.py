"""Desk-scale comparison of continued pretraining against upcycling.

The pipeline mirrors the two-phase protocol at toy scale:

1. pretrain a small dense byte-level model on the generic corpus;
2. upcycle it into an 8-expert top-2 MoE;
3. for each CPT duration, train the dense model for that many tokens on the
   domain corpus, and train the MoE for the iso-FLOP number of tokens
   (analytic planner), each run with its own fully annealed schedule;
4. compare smoothed final CE and the core average of the evaluation suite.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ckptio
from .budget import iso_flop_tokens
from .config import toy_config
from .data import build_tasks, domain_corpus, evaluate, generic_corpus
from .model import Checkpoint, count_params, forward, init_dense
from .numerics import RngStream, cross_entropy
from .report import RunPair, emit_report, relative_rows
from .surgeon import upcycle
from .trainer import RunMetrics, TrainPlan, train_run


@dataclass(frozen=True)
class DeskExperiment:
    seed: int = 0
    model: dict = field(default_factory=dict)  # overrides for toy_config
    batch_size: int = 8
    seq_len: int = 64
    pretrain_steps: int = 400
    pretrain_lr: float = 3e-3
    cpt_steps: tuple = (80, 160, 240, 320, 400)
    cpt_lr: float = 5e-4
    upcycle_lr: float = 1e-3
    weight_decay: float = 0.05
    warmup_frac: float = 0.1
    n_experts: int = 8
    top_k: int = 2
    eval_items: int = 32
    log_every: int = 10

    @property
    def tokens_per_step(self) -> int:
        return self.batch_size * self.seq_len

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ExperimentResult:
    config: DeskExperiment
    pretrain: RunMetrics
    runs: dict
    pairs: list
    plans: list
    dense_hash: str
    upcycled_hash: str
    final_hashes: dict

    def rows(self) -> list[dict]:
        return relative_rows(self.runs, self.pairs)

    def summary(self) -> dict:
        rows = self.rows()
        largest = max(rows, key=lambda r: r["additional_tokens"])
        return {
            "config": self.config.to_dict(),
            "n_params_dense": self.plans[0]["dense_params"],
            "n_params_moe": self.plans[0]["moe_params"],
            "plans": self.plans,
            "pairs": rows,
            "dense_hash": self.dense_hash,
            "upcycled_hash": self.upcycled_hash,
            "final_hashes": self.final_hashes,
            "upcycled_beats_cpt_at_largest_budget": bool(largest["upcycled_ce"] <= largest["cpt_ce"]),
        }

    def write(self, out_dir: str) -> dict:
        runs = dict(self.runs, pretrain=self.pretrain)
        files = emit_report(out_dir, runs, self.pairs)
        path = os.path.join(out_dir, "experiment_summary.json")
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        files["summary"] = path
        return files


def _heldout_ce(ckpt: Checkpoint, tokens: np.ndarray) -> float:
    logits = forward(ckpt, tokens[:, :-1]).logits
    v = logits.shape[-1]
    return cross_entropy(logits.reshape(-1, v).astype(np.float64), tokens[:, 1:].reshape(-1))


def _plan(exp: DeskExperiment, phase: str, lr: float, tokens: int, lb: float = 0.01) -> TrainPlan:
    return TrainPlan(phase=phase, peak_lr=lr, weight_decay=exp.weight_decay, batch_size=exp.batch_size,
                     seq_len=exp.seq_len, warmup_tokens=int(exp.warmup_frac * tokens), total_tokens=tokens,
                     lb_coeff=lb, seed=exp.seed, log_every=exp.log_every)


def run_experiment(exp: DeskExperiment = DeskExperiment(), out_dir: str | None = None,
                   progress=None) -> ExperimentResult:
    """Run the whole pipeline; artifacts go to ``out_dir`` when given."""
    say = progress or (lambda msg: None)
    if len(exp.cpt_steps) < 1:
        raise ValueError("need at least one CPT duration")
    root = RngStream(exp.seed)
    cfg = toy_config(**exp.model)
    tps = exp.tokens_per_step
    longest = max(exp.cpt_steps)
    generic = generic_corpus(exp.pretrain_steps * tps + 1, root.split("corpus/generic"))
    domain = domain_corpus(longest * tps + 1, root.split("corpus/domain"))
    heldout = domain_corpus(16 * (exp.seq_len + 1), root.split("corpus/heldout")).astype(np.int64)
    heldout = heldout.reshape(16, exp.seq_len + 1)
    tasks = build_tasks(root.split("eval"), exp.eval_items)

    def eval_fn(ck):
        out = evaluate(ck, tasks)
        out["heldout_ce"] = _heldout_ce(ck, heldout)
        return out

    say(f"pretraining dense model ({count_params(cfg).total} params, {exp.pretrain_steps} steps)")
    dense0 = init_dense(cfg, root.split("init"))
    dense, pre_metrics = train_run(dense0, generic, _plan(exp, "pretrain", exp.pretrain_lr,
                                                          exp.pretrain_steps * tps), label="pretrain")
    moe = upcycle(dense, n_experts=exp.n_experts, k=exp.top_k, rng=root.split("upcycle"))
    runs, pairs, plans, hashes = {}, [], [], {}
    for steps in exp.cpt_steps:
        cpt_tokens = steps * tps
        bp = iso_flop_tokens(dense.config, moe.config, cpt_tokens, mode="analytic", seq_len=exp.seq_len)
        up_steps = max(1, int(round(bp.upcycled_tokens / tps)))
        plans.append({"cpt_tokens": cpt_tokens, "planned_upcycled_tokens": bp.upcycled_tokens,
                      "upcycled_tokens": up_steps * tps, "cpt_flops": bp.cpt_flops,
                      "upcycled_flops": up_steps * tps * bp.flops_per_token_upcycled,
                      "dense_params": count_params(dense.config).total,
                      "moe_params": count_params(moe.config).total})
        c_label, u_label = f"cpt_{cpt_tokens}", f"upcycled_{cpt_tokens}"
        say(f"CPT {cpt_tokens} tokens vs upcycled {up_steps * tps} tokens")
        ck_c, m_c = train_run(dense, domain, _plan(exp, "cpt", exp.cpt_lr, cpt_tokens), eval_fn, label=c_label)
        ck_u, m_u = train_run(moe, domain, _plan(exp, "upcycle_cpt", exp.upcycle_lr, up_steps * tps),
                              eval_fn, label=u_label)
        runs[c_label], runs[u_label] = m_c, m_u
        hashes[c_label], hashes[u_label] = ckptio.content_hash(ck_c), ckptio.content_hash(ck_u)
        pairs.append(RunPair(c_label, u_label, float(cpt_tokens)))
    result = ExperimentResult(exp, pre_metrics, runs, pairs, plans, ckptio.content_hash(dense),
                              ckptio.content_hash(moe), hashes)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        result.write(out_dir)
    return result
