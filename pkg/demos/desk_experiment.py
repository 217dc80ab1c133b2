"""Continued pretraining vs upcycling at desk scale (about two minutes on one core).

A 119k-parameter byte model is pretrained on generic text, then either
trained further as-is or upcycled to 8 experts and trained for the same
FLOPs on a structured domain corpus.  Five matched budgets are compared on
smoothed final cross entropy.

    python3 demos/desk_experiment.py --out runs/desk
"""

import argparse
import sys

from upcyclelab.experiment import DeskExperiment, run_experiment


def main():
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("--out", default="runs/desk")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--upcycle-lr", type=float, default=1e-3)
    args = p.parse_args()

    exp = DeskExperiment(seed=args.seed, upcycle_lr=args.upcycle_lr)
    res = run_experiment(exp, args.out, progress=lambda m: print(m, file=sys.stderr))
    print(f"{'cpt tokens':>10} {'cpt CE':>8} {'upcycled CE':>12} {'CE gain':>8}")
    for r in res.rows():
        print(f"{int(r['additional_tokens']):>10} {r['cpt_ce']:>8.3f} {r['upcycled_ce']:>12.3f} {r['ce_gain']:>+8.1%}")
    verdict = res.summary()["upcycled_beats_cpt_at_largest_budget"]
    print(f"upcycled matches or beats CPT at the largest budget: {verdict}")
    print(f"charts and tables in {args.out}")


if __name__ == "__main__":
    main()
