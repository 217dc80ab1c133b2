"""Dropless top-K mixture-of-experts feed-forward layer.

Each token goes to exactly K experts chosen by a bias-free linear router;
its output is the gate-weighted sum of those experts' GLU outputs, with
gates given by a softmax over the K selected router logits.  Computation is
grouped per expert: gather that expert's tokens, run one GLU, scatter back.
There is no capacity limit, so no token is ever dropped.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, StateError
from .layers import glu_backward, glu_forward, linear_backward
from .numerics import matmul, row_sum, softmax_rows


@dataclass
class Routing:
    expert_ids: np.ndarray  # (tokens, k) int64, descending logit order
    gates: np.ndarray       # (tokens, k), rows sum to 1


@dataclass
class RouterStats:
    """Per-batch routing statistics for one MoE layer.

    ``dispatch_fraction`` sums to 1 (counts / (K * tokens));
    ``dispatch_per_token`` sums to K (counts / tokens).
    """

    counts: np.ndarray
    dispatch_fraction: np.ndarray
    mean_prob: np.ndarray
    load_balance_loss: float
    top_k: int

    @property
    def dispatch_per_token(self) -> np.ndarray:
        return self.dispatch_fraction * self.top_k


@dataclass
class MoETape:
    x: np.ndarray
    router_w: np.ndarray
    probs: np.ndarray
    routing: Routing
    groups: list = field(default_factory=list)  # per expert: (token_idx, slot_idx, glu cache, expert_out)
    n_experts: int = 0


def route_topk(router_logits: np.ndarray, k: int) -> Routing:
    """Pick the k largest logits per row; ties go to the lower expert index."""
    n_tokens, n_experts = router_logits.shape
    if not 1 <= k <= n_experts:
        raise ShapeError(f"k={k} must lie in [1, {n_experts}]")
    # stable sort on the negated logits keeps lower indices first among equals
    order = np.argsort(-router_logits, axis=1, kind="stable")[:, :k]
    selected = np.take_along_axis(router_logits, order, axis=1)
    gates = softmax_rows(selected)
    return Routing(order.astype(np.int64), gates)


def load_balance_loss(f, p, n_experts: int) -> float:
    """``n_experts * sum_e f_e * p_e`` for dispatch fractions f and mean probabilities p."""
    f = np.asarray(f, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if f.shape != (n_experts,) or p.shape != (n_experts,):
        raise ShapeError("f and p must both have one entry per expert")
    return float(n_experts * row_sum((f * p)[None, :])[0])


def router_stats(probs: np.ndarray, routing: Routing) -> RouterStats:
    n_tokens, n_experts = probs.shape
    k = routing.expert_ids.shape[1]
    counts = np.bincount(routing.expert_ids.reshape(-1), minlength=n_experts)
    f = counts / float(k * n_tokens)
    p = row_sum(np.ascontiguousarray(probs.T, dtype=np.float64)) / n_tokens
    return RouterStats(counts, f, p, load_balance_loss(f, p, n_experts), k)


def moe_forward(experts, router_w: np.ndarray, x: np.ndarray, k: int):
    """Apply the MoE layer to ``x`` of shape ``(tokens, d_model)``.

    ``experts`` is a sequence of ``(w_in, w_gate, w_out)`` triples and
    ``router_w`` has shape ``(d_model, n_experts)``.  Returns
    ``(y, RouterStats, MoETape)``.
    """
    n_experts = len(experts)
    if router_w.shape != (x.shape[1], n_experts):
        raise ShapeError(f"router weight {router_w.shape} does not fit x {x.shape} and {n_experts} experts")
    logits = matmul(x, router_w)
    probs = softmax_rows(logits)
    routing = route_topk(logits, k)
    y = np.zeros_like(x)
    tape = MoETape(x=x, router_w=router_w, probs=probs, routing=routing, n_experts=n_experts)
    for e, (w_in, w_gate, w_out) in enumerate(experts):
        tok, slot = np.nonzero(routing.expert_ids == e)
        if tok.size == 0:
            tape.groups.append(None)
            continue
        out, cache = glu_forward(np.ascontiguousarray(x[tok]), w_in, w_gate, w_out)
        # each token picks an expert at most once, so `tok` has no repeats
        y[tok] += routing.gates[tok, slot][:, None] * out
        tape.groups.append((tok, slot, cache, out))
    return y, router_stats(probs, routing), tape


def moe_backward(tape: MoETape, dy: np.ndarray, experts, router_w: np.ndarray, aux_scale: float = 0.0):
    """Gradients of the MoE layer.

    ``aux_scale`` is dL/d(load_balance_loss) for this layer; the loss is
    differentiated through the mean router probabilities only (dispatch
    fractions are counts).  Top-K selection itself carries no gradient.
    Returns ``(dx, [(dw_in, dw_gate, dw_out) per expert], d_router)``.
    """
    if router_w is not tape.router_w or len(experts) != tape.n_experts:
        raise StateError("MoE tape was produced with different layer weights")
    if dy.shape != tape.x.shape:
        raise ShapeError("upstream gradient does not match the forward input")
    x, routing, probs = tape.x, tape.routing, tape.probs
    n_tokens, k = routing.expert_ids.shape
    dx = np.zeros_like(x)
    dgates = np.zeros_like(routing.gates)
    expert_grads = []
    for e, (w_in, w_gate, w_out) in enumerate(experts):
        group = tape.groups[e]
        if group is None:
            expert_grads.append((np.zeros_like(w_in), np.zeros_like(w_gate), np.zeros_like(w_out)))
            continue
        tok, slot, cache, out = group
        dy_tok = dy[tok]
        dgates[tok, slot] = row_sum(dy_tok * out)
        dxe, dw_in, dw_gate, dw_out = glu_backward(routing.gates[tok, slot][:, None] * dy_tok,
                                                   w_in, w_gate, w_out, cache)
        dx[tok] += dxe
        expert_grads.append((dw_in, dw_gate, dw_out))

    # gates = softmax over the selected logits
    g = routing.gates
    dsel = g * (dgates - row_sum(g * dgates)[:, None])
    dlogits = np.zeros_like(probs)
    np.put_along_axis(dlogits, routing.expert_ids, dsel, axis=1)

    if aux_scale:
        n_experts = tape.n_experts
        f = np.bincount(routing.expert_ids.reshape(-1), minlength=n_experts) / float(k * n_tokens)
        # d/dlogits of n * sum_e f_e * mean_t p_te
        dp = np.broadcast_to((aux_scale * n_experts / n_tokens) * f, probs.shape).astype(probs.dtype)
        dlogits += probs * (dp - row_sum(probs * dp)[:, None])

    dx_router, d_router = linear_backward(x, router_w, dlogits)
    return dx + dx_router, expert_grads, d_router
