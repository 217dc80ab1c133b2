"""Serve each dense model and its upcycled K=1 / K=2 variants in the roofline simulator.

Prints the max-throughput table with the decrease relative to the dense
model, next to the measured numbers reported for a production engine, and
writes the CSV/SVG report when ``--out`` is given.

    python3 demos/serving_lineup.py --out runs/serving
"""

import argparse

from upcyclelab.report import emit_report, throughput_table
from upcyclelab.servesim import PUBLISHED_MAX_THROUGHPUT, WorkloadSpec, lineup_sweeps


def main():
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--duration", type=float, default=120.0, help="simulated seconds per trial")
    p.add_argument("--out", default=None)
    args = p.parse_args()

    sweeps = lineup_sweeps(WorkloadSpec(n_trials=args.trials, trial_duration=args.duration))
    print(f"{'model':<10} {'dev':>3} {'K':>2} {'tok/s':>10} {'decr':>7} {'ref tok/s':>10} {'ref decr':>8}")
    for (name, dev, k, thr, pct), s in zip(throughput_table(sweeps), sweeps):
        size = name.split()[0]
        ref_thr, ref_pct = PUBLISHED_MAX_THROUGHPUT.get((size, s.top_k), (None, None))
        pct_s = f"{pct:.1f}%" if pct is not None else "-"
        ref_pct_s = f"{ref_pct}%" if ref_pct is not None else "-"
        print(f"{name:<10} {dev:>3} {k!s:>2} {thr:>10,.0f} {pct_s:>7} {ref_thr or 0:>10,} {ref_pct_s:>8}")
    if args.out:
        emit_report(args.out, sweeps=sweeps)
        print(f"report written to {args.out}")


if __name__ == "__main__":
    main()
