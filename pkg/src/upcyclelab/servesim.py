"""Discrete-event serving simulator for dense vs. upcycled models.

Requests arrive as a Poisson process and are served with continuous
batching: at every step boundary, waiting requests are admitted FIFO while
the KV-cache budget allows.  Newly admitted requests are prefilled together
in one step, and all running requests then advance one token per decode step
until they have produced ``output_tokens``.  Step cost is a roofline:
``max(compute time, memory time)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np
from numba import njit

from .budget import flops_per_token
from .config import ModelConfig
from .errors import CapacityError, ConfigError
from .model import count_params, glu_param_count
from .numerics import RngStream


@dataclass(frozen=True)
class HardwareProfile:
    peak_matmul_flops: float = 989e12
    hbm_bandwidth: float = 3.35e12
    hbm_capacity: float = 80e9
    n_devices: int = 1
    tensor_parallel: int = 1
    mfu_prefill: float = 0.5
    mbu_decode: float = 0.6
    memory_util: float = 0.9
    name: str = "H100"

    def __post_init__(self):
        if self.tensor_parallel < 1 or self.n_devices % self.tensor_parallel:
            raise ConfigError("tensor_parallel must divide n_devices")
        for f in ("mfu_prefill", "mbu_decode", "memory_util"):
            v = getattr(self, f)
            if not 0 < v <= 1:
                raise ConfigError(f"{f} must lie in (0, 1], got {v}")

    @property
    def effective_flops(self) -> float:
        return self.peak_matmul_flops * self.mfu_prefill * self.tensor_parallel

    @property
    def effective_bandwidth(self) -> float:
        return self.hbm_bandwidth * self.mbu_decode * self.tensor_parallel

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "HardwareProfile":
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def h100(n_devices: int = 1, tensor_parallel: Optional[int] = None, **overrides) -> HardwareProfile:
    """H100 SXM preset: 989 TFLOP/s dense bf16, 3.35 TB/s, 80 GB per device."""
    tp = n_devices if tensor_parallel is None else tensor_parallel
    return HardwareProfile(n_devices=n_devices, tensor_parallel=tp, **overrides)


@dataclass(frozen=True)
class WorkloadSpec:
    input_tokens: int = 3500
    output_tokens: int = 300
    rps_start: float = 0.1
    rps_stop: Optional[float] = None  # None: sweep a little past the saturation point
    rps_step: float = 0.1
    n_trials: int = 5
    trial_duration: float = 120.0
    warmup: float = 30.0
    seed: int = 0

    def __post_init__(self):
        if self.input_tokens <= 0 or self.output_tokens <= 0:
            raise ConfigError("token counts must be positive")
        if self.rps_step <= 0 or self.rps_start <= 0:
            raise ConfigError("rps_start and rps_step must be positive")
        if not 0 <= self.warmup < self.trial_duration:
            raise ConfigError("warmup must lie in [0, trial_duration)")
        if self.n_trials < 1:
            raise ConfigError("n_trials must be >= 1")

    @property
    def seq_len(self) -> int:
        return self.input_tokens + self.output_tokens

    def rps_grid(self, stop: float) -> np.ndarray:
        n = int(math.floor((stop - self.rps_start) / self.rps_step + 1e-9)) + 1
        return np.round(self.rps_start + self.rps_step * np.arange(max(n, 1)), 10)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "WorkloadSpec":
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass(frozen=True)
class ServingModelSpec:
    """Serving-side costs of one model at a fixed top-K.

    FLOP terms are per token at the workload's mean attended context:
    prompt tokens attend to ``(input_tokens + 1) / 2`` positions on average
    and decode tokens to ``mean_decode_context``.
    """

    name: str
    weight_bytes: float
    kv_bytes_per_token: float
    prefill_flops_per_token: float
    decode_flops_per_token: float
    decode_bytes_per_token: float  # active weights + KV at the mean decode context
    mean_decode_context: float
    shared_weight_bytes: float     # weights every token reads (attention, norms, router, head)
    expert_bytes: float            # one expert's GLU, one layer
    n_layers: int
    n_experts: int
    top_k: int
    total_params: int
    active_params: int

    @property
    def active_weight_bytes(self) -> float:
        return self.shared_weight_bytes + self.n_layers * self.top_k * self.expert_bytes

    def weight_bytes_read(self, n_tokens) -> float:
        """Expected weight bytes streamed for a step over ``n_tokens`` routed tokens.

        Each token touches K of n experts per layer, so a step touches
        ``n * (1 - (1 - K/n) ** tokens)`` distinct experts in expectation
        (exactly K for one token, all n for large batches).
        """
        touched = _expected_experts(n_tokens, self.n_experts, self.top_k)
        return self.shared_weight_bytes + self.n_layers * touched * self.expert_bytes


def _expected_experts(n_tokens, n_experts: int, top_k: int):
    if n_experts == top_k:
        return float(top_k)
    return n_experts * (1.0 - (1.0 - top_k / n_experts) ** n_tokens)


def model_footprint(cfg: ModelConfig, k: Optional[int] = None, weight_precision_bytes: int = 2,
                    input_tokens: int = 3500, output_tokens: int = 300, name: str = "") -> ServingModelSpec:
    """Memory and FLOP costs of serving ``cfg`` with top-``k`` routing."""
    if cfg.moe is not None and k is not None:
        cfg = cfg.with_moe(replace(cfg.moe, top_k=k))
    pc = count_params(cfg)
    n_experts = cfg.moe.n_experts if cfg.moe else 1
    top_k = cfg.moe.top_k if cfg.moe else 1
    prec = weight_precision_bytes
    kv = 2 * cfg.n_layers * cfg.n_kv_heads * cfg.head_dim * prec
    expert_bytes = glu_param_count(cfg) * prec
    active_bytes = pc.active * prec
    shared = active_bytes - cfg.n_layers * top_k * expert_bytes
    decode_ctx = input_tokens + (output_tokens - 1) / 2
    return ServingModelSpec(
        name=name or _default_name(cfg, pc.total),
        weight_bytes=pc.total * prec,
        kv_bytes_per_token=kv,
        prefill_flops_per_token=flops_per_token(cfg, (input_tokens + 1) / 2, "infer"),
        decode_flops_per_token=flops_per_token(cfg, decode_ctx, "infer"),
        decode_bytes_per_token=active_bytes + kv * decode_ctx,
        mean_decode_context=decode_ctx,
        shared_weight_bytes=shared,
        expert_bytes=expert_bytes,
        n_layers=cfg.n_layers,
        n_experts=n_experts,
        top_k=top_k,
        total_params=pc.total,
        active_params=pc.active,
    )


def _default_name(cfg: ModelConfig, total: int) -> str:
    size = f"{total / 1e9:.1f}B" if total >= 1e9 else f"{total / 1e6:.0f}M"
    return f"{size} (MoE top-{cfg.moe.top_k})" if cfg.moe else size


def max_batch_from_memory(profile: HardwareProfile, spec: ServingModelSpec, seq_len: int) -> int:
    """Concurrent requests whose full-length KV cache fits beside the weights."""
    usable = profile.memory_util * profile.hbm_capacity
    per_device = spec.weight_bytes / profile.tensor_parallel
    if per_device >= usable:
        raise CapacityError(
            f"{spec.name}: weights need {per_device / 1e9:.2f} GB per device but only "
            f"{usable / 1e9:.2f} GB is usable (short by {(per_device - usable) / 1e9:.2f} GB)",
            shortfall_bytes=per_device - usable)
    free = usable * profile.tensor_parallel - spec.weight_bytes
    return int(free // (spec.kv_bytes_per_token * seq_len))


def step_time(prefill_tokens: float, decode_seqs: float, spec: ServingModelSpec, profile: HardwareProfile,
              kv_tokens: Optional[float] = None) -> float:
    """Roofline time of one batched step.

    ``kv_tokens`` is the total context read by the decoding sequences; by
    default each reads the mean decode context.
    """
    if kv_tokens is None:
        kv_tokens = decode_seqs * spec.mean_decode_context
    compute = (prefill_tokens * spec.prefill_flops_per_token
               + decode_seqs * spec.decode_flops_per_token) / profile.effective_flops
    tokens = prefill_tokens + decode_seqs
    memory = (spec.weight_bytes_read(tokens) + kv_tokens * spec.kv_bytes_per_token) / profile.effective_bandwidth
    return max(compute, memory)


def isolated_latency(spec: ServingModelSpec, profile: HardwareProfile, workload: WorkloadSpec) -> float:
    """Latency of a single request on an otherwise idle server."""
    t = step_time(workload.input_tokens, 0, spec, profile, kv_tokens=0)
    for j in range(workload.output_tokens):
        t += step_time(0, 1, spec, profile, kv_tokens=workload.input_tokens + j)
    return t


def saturation_throughput(spec: ServingModelSpec, profile: HardwareProfile, workload: WorkloadSpec) -> float:
    """Closed-form plateau throughput (tokens/s) with the batch held at its memory limit.

    Per request: one prefill share plus ``output_tokens`` decode steps shared
    by the full batch, at the mean decode context.
    """
    b = max_batch_from_memory(profile, spec, workload.seq_len)
    prefill = workload.input_tokens * spec.prefill_flops_per_token / profile.effective_flops
    decode = step_time(0, b, spec, profile)
    return workload.seq_len / (prefill + workload.output_tokens * decode / b)


# ---------------------------------------------------------------------------
# Event loop
# ---------------------------------------------------------------------------


@njit(cache=True)
def _run_trial(arrivals, in_tok, out_tok, max_batch, t_end, warmup,
               pf_flops, dec_flops, eff_flops, eff_bw, shared_b, expert_b, n_layers, n_exp, top_k, kv_b,
               check_flow):
    n_req = arrivals.shape[0]
    completion = np.full(n_req, np.nan)
    # cohorts: requests prefilled in the same step share progress
    c_start = np.empty(n_req, np.int64)   # decode-step counter at admission
    c_first = np.empty(n_req, np.int64)   # first request index of the cohort
    c_size = np.empty(n_req, np.int64)
    c_head = 0
    c_tail = 0
    t = 0.0
    g = 0                 # global decode-step counter
    next_arr = 0          # next request not yet in the queue
    queue_head = 0        # next queued request to admit
    in_flight = 0
    start_sum = 0         # sum over running requests of their cohort start
    completed = 0
    tokens_window = 0.0
    violations = 0
    while t < t_end:
        while next_arr < n_req and arrivals[next_arr] <= t:
            next_arr += 1
        queued = next_arr - queue_head
        if check_flow and next_arr != completed + in_flight + queued:
            violations += 1
        if queued > 0 and in_flight < max_batch:
            n = min(queued, max_batch - in_flight)
            p = n * in_tok
            if n_exp == top_k:
                touched = top_k
            else:
                touched = n_exp * (1.0 - (1.0 - top_k / n_exp) ** p)
            comp = p * pf_flops / eff_flops
            mem = (shared_b + n_layers * touched * expert_b) / eff_bw
            t += max(comp, mem)
            c_start[c_tail] = g
            c_first[c_tail] = queue_head
            c_size[c_tail] = n
            c_tail += 1
            queue_head += n
            in_flight += n
            start_sum += n * g
            if t > warmup:
                tokens_window += p
        elif in_flight > 0:
            d = in_flight
            kv_tokens = d * (in_tok + g) - start_sum
            if n_exp == top_k:
                touched = top_k
            else:
                touched = n_exp * (1.0 - (1.0 - top_k / n_exp) ** d)
            comp = d * dec_flops / eff_flops
            mem = (shared_b + n_layers * touched * expert_b + kv_tokens * kv_b) / eff_bw
            t += max(comp, mem)
            g += 1
            if t > warmup:
                tokens_window += d
            while c_head < c_tail and g - c_start[c_head] >= out_tok:
                n = c_size[c_head]
                f = c_first[c_head]
                for r in range(f, f + n):
                    completion[r] = t
                in_flight -= n
                completed += n
                start_sum -= n * c_start[c_head]
                c_head += 1
        else:
            if next_arr < n_req:
                t = max(t, arrivals[next_arr])
            else:
                break
    while next_arr < n_req and arrivals[next_arr] <= t:
        next_arr += 1
    if check_flow and next_arr != completed + in_flight + (next_arr - queue_head):
        violations += 1
    return completion, tokens_window, violations, min(t, t_end), next_arr, completed, in_flight


@dataclass
class TrialResult:
    rps: float
    latencies: np.ndarray
    throughput: float
    arrivals: int
    completed: int
    in_flight: int
    queued: int
    flow_violations: int

    @property
    def mean_latency(self) -> float:
        return float(np.mean(self.latencies)) if self.latencies.size else float("nan")


def unit_arrivals(rng: RngStream, horizon: float) -> np.ndarray:
    """Arrival times of a rate-1 Poisson process on ``[0, horizon]``.

    Scaling by ``1 / rps`` gives the process at any rate from the same draws,
    so every point of an RPS sweep sees common random numbers.
    """
    gen = rng.generator()
    n = int(horizon + 10 * math.sqrt(horizon) + 20)
    times = np.cumsum(gen.exponential(1.0, n))
    while times[-1] < horizon:
        more = np.cumsum(gen.exponential(1.0, n)) + times[-1]
        times = np.concatenate([times, more])
    return times[times <= horizon]


def simulate(workload: WorkloadSpec, rps: float, spec: ServingModelSpec, profile: HardwareProfile,
             rng: RngStream, check_flow: bool = True) -> TrialResult:
    """One trial at a fixed request rate.

    Latency statistics cover requests arriving after ``workload.warmup`` that
    finish within the trial; throughput counts prompt and generated tokens
    processed after the warmup, divided by the measured span.
    """
    if rps <= 0:
        raise ConfigError("rps must be positive")
    max_batch = max_batch_from_memory(profile, spec, workload.seq_len)
    if max_batch < 1:
        raise CapacityError(f"{spec.name}: no room for a single request's KV cache", 0.0)
    arrivals = unit_arrivals(rng, workload.trial_duration * rps) / rps
    completion, tokens, violations, t_stop, n_arr, completed, in_flight = _run_trial(
        arrivals, workload.input_tokens, workload.output_tokens, max_batch,
        workload.trial_duration, workload.warmup,
        spec.prefill_flops_per_token, spec.decode_flops_per_token,
        profile.effective_flops, profile.effective_bandwidth,
        spec.shared_weight_bytes, spec.expert_bytes, spec.n_layers, spec.n_experts, spec.top_k,
        spec.kv_bytes_per_token, check_flow)
    done = ~np.isnan(completion) & (arrivals >= workload.warmup)
    lat = completion[done] - arrivals[done]
    span = max(t_stop - workload.warmup, 1e-12)
    return TrialResult(rps, lat, tokens / span, n_arr, completed, in_flight,
                       n_arr - completed - in_flight, violations)


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


@dataclass
class SweepResult:
    name: str
    rps: np.ndarray
    mean_latency: np.ndarray
    p50_latency: np.ndarray
    p99_latency: np.ndarray
    throughput: np.ndarray
    throughput_std: np.ndarray
    max_throughput: float
    saturation_rps: float
    max_batch: int
    flow_violations: int = 0
    pct_decrease_vs_baseline: Optional[float] = None
    baseline_name: Optional[str] = None
    devices: int = 1
    top_k: Optional[int] = None
    extra: dict = field(default_factory=dict)

    def rows(self):
        for i in range(len(self.rps)):
            yield (float(self.rps[i]), float(self.mean_latency[i]), float(self.p50_latency[i]),
                   float(self.p99_latency[i]), float(self.throughput[i]))

    def summary(self) -> dict:
        return {
            "name": self.name,
            "max_throughput": self.max_throughput,
            "saturation_rps": self.saturation_rps,
            "max_batch": self.max_batch,
            "pct_decrease_vs_baseline": self.pct_decrease_vs_baseline,
            "baseline": self.baseline_name,
            "devices": self.devices,
            "top_k": self.top_k,
        }

    def to_dict(self) -> dict:
        out = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()}
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "SweepResult":
        arrays = ("rps", "mean_latency", "p50_latency", "p99_latency", "throughput", "throughput_std")
        return cls(**{k: (np.asarray(v, dtype=np.float64) if k in arrays else v) for k, v in data.items()})


def _percentile(x: np.ndarray, q: float) -> float:
    return float(np.percentile(x, q)) if x.size else float("nan")


def sweep_rps(workload: WorkloadSpec, spec: ServingModelSpec, profile: HardwareProfile,
              baseline: Optional["SweepResult"] = None, check_flow: bool = True) -> SweepResult:
    """Simulate every RPS point of the workload grid, averaging ``n_trials`` seeds.

    Trial ``i`` uses the same arrival draws at every RPS.  Without an explicit
    ``rps_stop`` the grid runs to 1.2x the closed-form saturation rate.
    """
    stop = workload.rps_stop
    if stop is None:
        sat_rps = saturation_throughput(spec, profile, workload) / workload.seq_len
        stop = math.ceil(1.2 * sat_rps / workload.rps_step) * workload.rps_step
    grid = workload.rps_grid(stop)
    root = RngStream(workload.seed).split("arrivals")
    n = len(grid)
    mean_l, p50, p99, thr, thr_sd = (np.zeros(n) for _ in range(5))
    violations = 0
    for i, rps in enumerate(grid):
        trials = [simulate(workload, float(rps), spec, profile, root.split(j), check_flow)
                  for j in range(workload.n_trials)]
        violations += sum(tr.flow_violations for tr in trials)
        lat = np.concatenate([tr.latencies for tr in trials])
        mean_l[i] = float(np.mean([tr.mean_latency for tr in trials]))
        p50[i] = _percentile(lat, 50)
        p99[i] = _percentile(lat, 99)
        t = np.array([tr.throughput for tr in trials])
        thr[i], thr_sd[i] = t.mean(), t.std()
    max_thr = float(thr.max())
    sat = float(grid[np.argmax(thr >= 0.99 * max_thr)])
    res = SweepResult(spec.name, grid, mean_l, p50, p99, thr, thr_sd, max_thr, sat,
                      max_batch_from_memory(profile, spec, workload.seq_len), violations,
                      devices=profile.n_devices, top_k=spec.top_k if spec.n_experts > 1 else None)
    if baseline is not None:
        res.pct_decrease_vs_baseline = pct_decrease(baseline.max_throughput, max_thr)
        res.baseline_name = baseline.name
    return res


def pct_decrease(baseline: float, value: float) -> float:
    return 100.0 * (baseline - value) / baseline


# Measured max throughput (tokens/s, decrease %) of a production engine, used as reference columns.
PUBLISHED_MAX_THROUGHPUT = {
    ("436M", None): (59128, None), ("1.6B", 1): (37164, 37), ("1.6B", 2): (32832, 44),
    ("1.4B", None): (48032, None), ("6.7B", 1): (31464, 34), ("6.7B", 2): (29716, 38),
    ("8B", None): (33516, None), ("47B", 1): (21356, 36), ("47B", 2): (18924, 44),
}


# (dense preset, MoE preset, devices, display names)
SERVING_LINEUP = (
    ("436m", "1.6b-moe", 1, "436M", "1.6B"),
    ("1.4b", "6.7b-moe", 1, "1.4B", "6.7B"),
    ("8b", "47b-moe", 4, "8B", "47B"),
)


def lineup_sweeps(workload: Optional[WorkloadSpec] = None, lineup=SERVING_LINEUP,
                  profile_overrides: Optional[dict] = None) -> list[SweepResult]:
    """Sweep each dense model and its upcycled K=1 and K=2 variants on H100s.

    Multi-device pairs use tensor parallelism across all devices.
    """
    from .config import PRESETS

    workload = workload or WorkloadSpec()
    out = []
    for dense_key, moe_key, devices, dense_name, moe_name in lineup:
        prof = h100(devices, **(profile_overrides or {}))
        kw = dict(input_tokens=workload.input_tokens, output_tokens=workload.output_tokens)
        base = sweep_rps(workload, model_footprint(PRESETS[dense_key], name=dense_name, **kw), prof)
        out.append(base)
        for k in (1, 2):
            spec = model_footprint(PRESETS[moe_key], k=k, name=f"{moe_name} K={k}", **kw)
            out.append(sweep_rps(workload, spec, prof, baseline=base))
    return out
