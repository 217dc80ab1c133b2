"""Pretrain a toy dense model briefly, upcycle it, and confirm nothing changed.

With ``--noise-std 0`` the upcycled model computes exactly the same function
as its parent: every expert is a copy of the dense GLU and the top-K gates
sum to one.  A nonzero noise level breaks the copies and the gap shows up in
the logits.

    python3 demos/upcycle_and_verify.py --steps 60 --noise-std 0.01
"""

import argparse

import numpy as np

from upcyclelab import ckptio
from upcyclelab.config import toy_config
from upcyclelab.data import generic_corpus
from upcyclelab.model import count_params, init_dense
from upcyclelab.numerics import RngStream
from upcyclelab.surgeon import upcycle, verify_preservation
from upcyclelab.trainer import TrainPlan, train_run


def parse_args():
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("--steps", type=int, default=60, help="dense pretraining steps")
    p.add_argument("--experts", type=int, default=8)
    p.add_argument("--top-k", type=int, default=2)
    p.add_argument("--noise-std", type=float, default=0.0, help="also try this expert noise level")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--save", default=None, help="write the upcycled checkpoint here")
    return p.parse_args()


def main():
    args = parse_args()
    root = RngStream(args.seed)
    cfg = toy_config()
    plan = TrainPlan(phase="pretrain", peak_lr=3e-3, weight_decay=0.05, batch_size=8, seq_len=64,
                     warmup_tokens=512 * max(1, args.steps // 10), total_tokens=512 * args.steps, log_every=10)
    corpus = generic_corpus(plan.total_tokens + 1, root.split("corpus"))
    dense, metrics = train_run(init_dense(cfg, root.split("init")), corpus, plan)
    print(f"dense: {count_params(cfg).total:,} params, CE {metrics.step_ce[0]:.3f} -> {metrics.final_ce:.3f}")

    probe = root.split("probe").generator().integers(0, 256, size=(100, 32))
    levels = [0.0] + ([args.noise_std] if args.noise_std > 0 else [])
    for noise in levels:
        moe = upcycle(dense, n_experts=args.experts, k=args.top_k, noise_std=noise, rng=root.split("upcycle"))
        pc = count_params(moe.config)
        rep = verify_preservation(dense, moe, probe)
        print(f"noise {noise:g}: {pc.total:,} total / {pc.active:,} active params, "
              f"max |logit diff| {rep.max_abs_diff:.2e} ({'preserved' if rep.passed else 'changed'})")
        if args.save and noise == 0.0:
            digest = ckptio.save(moe, args.save)
            print(f"saved {args.save} ({digest[:12]}, parent {moe.meta['parent_hash'][:12]})")


if __name__ == "__main__":
    main()
