"""Training loop, Lion optimizer, cosine schedule, and evaluation-scoring math."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import ckptio
from .errors import ConfigError, DomainError, LengthError, NumericError, TrainingDiverged
from .model import Checkpoint, loss_and_grads

# ---------------------------------------------------------------------------
# Plans and schedules
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainPlan:
    """One training phase.

    Defaults follow the 436M CPT settings except the pretraining warmup,
    which is set to 5e8 tokens (the published pretraining value is garbled).
    """

    phase: str = "cpt"
    peak_lr: float = 5e-5
    weight_decay: float = 0.05
    batch_size: int = 1024
    seq_len: int = 4096
    warmup_tokens: int = 500_000_000
    total_tokens: int = 10_000_000_000
    lb_coeff: float = 0.01
    seed: int = 0
    log_every: int = 1
    beta1: float = 0.9
    beta2: float = 0.99
    data_offset: int = 0
    milestones: tuple = ()

    def __post_init__(self):
        if self.phase not in ("pretrain", "cpt", "upcycle_cpt"):
            raise ConfigError(f"unknown phase {self.phase!r}")
        if not 0 <= self.warmup_tokens < self.total_tokens:
            raise ConfigError("warmup_tokens must lie in [0, total_tokens)")
        if self.batch_size < 1 or self.seq_len < 1 or self.log_every < 1:
            raise ConfigError("batch_size, seq_len and log_every must be positive")
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))

    @property
    def tokens_per_step(self) -> int:
        return self.batch_size * self.seq_len

    @property
    def n_steps(self) -> int:
        return math.ceil(self.total_tokens / self.tokens_per_step)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainPlan":
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


PUBLISHED_PLANS = {
    # Full-scale published settings for the 436M model (the 1.4B runs differ only in lr).
    "pretrain": dict(phase="pretrain", peak_lr=8e-4, weight_decay=0.5, batch_size=1024, seq_len=4096,
                     warmup_tokens=500_000_000),
    "cpt": dict(phase="cpt", peak_lr=5e-5, weight_decay=0.05, batch_size=1024, seq_len=4096,
                warmup_tokens=500_000_000),
    "upcycle_cpt": dict(phase="upcycle_cpt", peak_lr=1e-4, weight_decay=0.05, batch_size=1024, seq_len=4096,
                        warmup_tokens=500_000_000, lb_coeff=0.01),
}


def cosine_lr(tokens_seen: float, plan: TrainPlan) -> float:
    """Linear warmup to ``peak_lr``, then cosine decay to exactly 0 at ``total_tokens``."""
    w, total, peak = plan.warmup_tokens, plan.total_tokens, plan.peak_lr
    t = min(max(tokens_seen, 0), total)
    if t < w:
        return peak * t / w
    progress = (t - w) / (total - w)
    return 0.5 * peak * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# Lion
# ---------------------------------------------------------------------------


def lion_step(w: np.ndarray, g: np.ndarray, m: np.ndarray, lr: float, weight_decay: float,
              beta1: float = 0.9, beta2: float = 0.99) -> tuple[np.ndarray, np.ndarray]:
    """One Lion update; returns ``(new_w, new_m)`` and leaves the inputs untouched.

    ``w -= lr * (sign(beta1 m + (1 - beta1) g) + weight_decay * w)``;
    ``m = beta2 m + (1 - beta2) g``.
    """
    if w.shape != g.shape or w.shape != m.shape:
        raise ConfigError("weight, gradient and momentum shapes differ")
    if not np.isfinite(g).all():
        raise NumericError("non-finite gradient")
    dt = w.dtype.type
    c = dt(beta1) * m + dt(1 - beta1) * g
    new_w = w - dt(lr) * (np.sign(c) + dt(weight_decay) * w)
    new_m = dt(beta2) * m + dt(1 - beta2) * g
    return new_w, new_m


def decays(name: str) -> bool:
    """Weight decay applies to matrices, not to norm gains or the input embedding."""
    return not (name.endswith("norm.weight") or name == "embed.weight")


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

BASE_COLUMNS = ("tokens", "lr", "ce", "aux", "core_avg")


@dataclass
class RunMetrics:
    phase: str
    lb_coeff: float
    rows: list = field(default_factory=list)
    step_ce: list = field(default_factory=list)  # every optimizer step
    evals: dict = field(default_factory=dict)     # tokens -> eval result dict
    checkpoints: dict = field(default_factory=dict)  # tokens -> path
    final_ce: Optional[float] = None
    final_eval: Optional[dict] = None
    label: str = ""

    def log(self, row: dict):
        if self.rows and row["tokens"] <= self.rows[-1]["tokens"]:
            raise ValueError("tokens seen must strictly increase between log rows")
        self.rows.append(row)

    @property
    def tokens(self) -> np.ndarray:
        return np.array([r["tokens"] for r in self.rows])

    @property
    def ce(self) -> np.ndarray:
        return np.array([r["ce"] for r in self.rows])

    def columns(self) -> list[str]:
        extra = []
        for r in self.rows:
            for k in r:
                if k not in BASE_COLUMNS and k not in extra:
                    extra.append(k)
        return list(BASE_COLUMNS) + extra

    def write_csv(self, path) -> None:
        cols = self.columns()
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(cols)
            for r in self.rows:
                wr.writerow(["" if r.get(c) is None else _fmt(r.get(c)) for c in cols])


    def to_dict(self) -> dict:
        return {"phase": self.phase, "lb_coeff": self.lb_coeff, "label": self.label, "rows": self.rows,
                "step_ce": self.step_ce, "evals": {str(k): v for k, v in self.evals.items()},
                "checkpoints": {str(k): v for k, v in self.checkpoints.items()},
                "final_ce": self.final_ce, "final_eval": self.final_eval}

    @classmethod
    def from_dict(cls, data: dict) -> "RunMetrics":
        m = cls(data["phase"], data["lb_coeff"], label=data.get("label", ""))
        m.rows = list(data["rows"])
        m.step_ce = list(data["step_ce"])
        m.evals = {int(k): v for k, v in data.get("evals", {}).items()}
        m.checkpoints = {int(k): v for k, v in data.get("checkpoints", {}).items()}
        m.final_ce = data.get("final_ce")
        m.final_eval = data.get("final_eval")
        return m


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def is_smoothed_nonincreasing(curve: Sequence[float], window: int, rebound: float = 0.02) -> bool:
    """Block means over consecutive ``window``-step blocks never rise by more than ``rebound`` (relative)."""
    x = np.asarray(curve, dtype=np.float64)
    n = len(x) // window
    if n < 2:
        return True
    means = x[:n * window].reshape(n, window).mean(axis=1)
    best = means[0]
    for v in means[1:]:
        if v > best * (1 + rebound):
            return False
        best = min(best, v)
    return True


def smoothed_final_loss(curve: Sequence[float], window: int = 50) -> float:
    """Mean of the last ``window`` values of a per-step loss curve."""
    if len(curve) < window:
        raise LengthError(f"need at least {window} steps, got {len(curve)}")
    tail = list(curve)[-window:]
    return math.fsum(tail) / window


def core_average(per_task: Sequence[float], baselines: Sequence[float]) -> float:
    """Mean over tasks of ``(acc - chance) / (1 - chance)``."""
    if len(per_task) != len(baselines):
        raise LengthError("per-task accuracies and baselines differ in length")
    if not per_task:
        raise LengthError("no tasks")
    for b in baselines:
        if not 0 <= b < 1:
            raise DomainError(f"baseline accuracy {b} must lie in [0, 1)")
    return math.fsum((a - b) / (1 - b) for a, b in zip(per_task, baselines)) / len(per_task)


def relative_improvement(upcycled_score: float, cpt_score: float) -> float:
    """``(upcycled - cpt) / cpt``."""
    if cpt_score == 0:
        raise DomainError("CPT score is zero; relative improvement undefined")
    return (upcycled_score - cpt_score) / cpt_score


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def batch_at(corpus: np.ndarray, step: int, plan: TrainPlan) -> tuple[np.ndarray, np.ndarray]:
    """Inputs/targets for ``step``: consecutive windows read in corpus order."""
    n = plan.batch_size
    L = plan.seq_len
    start = plan.data_offset + step * n * L
    need = start + n * L + 1
    if need > corpus.shape[0]:
        raise LengthError(f"corpus has {corpus.shape[0]} tokens; step {step} needs {need}")
    chunk = corpus[start:start + n * L + 1].astype(np.int64)
    return chunk[:-1].reshape(n, L), chunk[1:].reshape(n, L)


def train_run(ckpt: Checkpoint, corpus: np.ndarray, plan: TrainPlan,
              eval_fn: Optional[Callable[[Checkpoint], dict]] = None,
              checkpoint_dir: Optional[str] = None, label: str = "") -> tuple[Checkpoint, RunMetrics]:
    """Train a copy of ``ckpt`` on ``corpus`` for ``plan.total_tokens`` tokens.

    The objective is cross entropy plus, for MoE models, ``plan.lb_coeff``
    times the mean per-layer load-balance loss.  Runs are deterministic in
    (ckpt, corpus, plan).  ``eval_fn`` runs at every milestone and at the
    end; milestone checkpoints go to ``checkpoint_dir`` when given.
    """
    corpus = np.asarray(corpus)
    n_steps = plan.n_steps
    if plan.data_offset + n_steps * plan.tokens_per_step + 1 > corpus.shape[0]:
        raise LengthError(f"corpus too short for {plan.total_tokens} tokens")
    model = ckpt.copy()
    is_moe = model.config.moe is not None
    coeff = plan.lb_coeff if is_moe else 0.0
    momentum = {k: np.zeros_like(v) for k, v in model.tensors.items()}
    metrics = RunMetrics(plan.phase, coeff, label=label)
    milestones = sorted(set(plan.milestones))
    tokens = 0
    last_good = model  # most recent weights whose loss and gradients were finite
    for step in range(n_steps):
        inputs, targets = batch_at(corpus, step, plan)
        lr = cosine_lr(tokens, plan)
        try:
            total, ce, aux, grads, res = loss_and_grads(model, inputs, targets, coeff)
            finite = math.isfinite(total) and all(np.isfinite(g).all() for g in grads.values())
        except NumericError:
            finite = False
        if not finite:
            metrics.final_ce = float("nan")
            raise TrainingDiverged(f"loss became non-finite at step {step}", last_good=last_good, metrics=metrics)
        last_good = model
        new_tensors = {}
        for name, w in model.tensors.items():
            wd = plan.weight_decay if decays(name) else 0.0
            new_tensors[name], momentum[name] = lion_step(w, grads[name], momentum[name], lr, wd,
                                                          plan.beta1, plan.beta2)
        model = Checkpoint(model.config, new_tensors, dict(model.meta))
        tokens += plan.tokens_per_step
        metrics.step_ce.append(ce)
        if (step + 1) % plan.log_every == 0 or step == n_steps - 1:
            row = {"tokens": tokens, "lr": lr, "ce": ce, "aux": coeff * aux if is_moe else 0.0,
                   "core_avg": None, "step": step + 1}
            if is_moe:
                row["lb_mean"] = aux
                for li, st in enumerate(res.aux):
                    row[f"lb_L{li}"] = st.load_balance_loss
                    for e in range(st.dispatch_fraction.shape[0]):
                        row[f"f_L{li}_e{e}"] = float(st.dispatch_fraction[e])
                        row[f"p_L{li}_e{e}"] = float(st.mean_prob[e])
            metrics.log(row)
        while milestones and tokens >= milestones[0]:
            m = milestones.pop(0)
            _milestone(model, metrics, m, tokens, eval_fn, checkpoint_dir, label)
    model.meta["tokens_trained"] = int(model.meta.get("tokens_trained", 0)) + tokens
    model.meta["phase"] = plan.phase
    if len(metrics.step_ce) >= 50:
        metrics.final_ce = smoothed_final_loss(metrics.step_ce)
    else:
        metrics.final_ce = float(np.mean(metrics.step_ce))
    if eval_fn is not None:
        metrics.final_eval = eval_fn(model)
        metrics.evals[tokens] = metrics.final_eval
        metrics.rows[-1]["core_avg"] = metrics.final_eval.get("core_avg")
    return model, metrics


def _milestone(model, metrics, milestone, tokens, eval_fn, checkpoint_dir, label):
    if eval_fn is not None:
        metrics.evals[tokens] = eval_fn(model)
    if checkpoint_dir is not None:
        os.makedirs(checkpoint_dir, exist_ok=True)
        path = os.path.join(checkpoint_dir, f"{label or metrics.phase}_{milestone}.upcy")
        snap = Checkpoint(model.config, model.tensors,
                          dict(model.meta, tokens_trained=int(model.meta.get("tokens_trained", 0)) + tokens))
        ckptio.save(snap, path)
        metrics.checkpoints[tokens] = path
