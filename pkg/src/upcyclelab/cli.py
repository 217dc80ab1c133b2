"""Command-line entry point: ``upcyclelab <subcommand> ...``.

Every subcommand forwards to a function in :mod:`upcyclelab.stages` or
:mod:`upcyclelab.manifest`.  Exit status is 0 on success, 2 for invalid
configuration or arguments, and 3 for any other runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import manifest, stages
from .errors import ConfigError, UpcycleError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

_SUFFIX = {"k": 1e3, "m": 1e6, "b": 1e9, "g": 1e9, "t": 1e12}


def token_count(text: str) -> float:
    """Parse ``4.3B``, ``500M`` or ``4.3e9``."""
    t = text.strip().lower()
    try:
        if t and t[-1] in _SUFFIX:
            return float(t[:-1]) * _SUFFIX[t[-1]]
        return float(t)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a token count: {text!r}") from None


def json_value(text: str):
    """A JSON file path or an inline JSON document; other strings pass through (preset names)."""
    if os.path.exists(text):
        return stages.read_json(text) if text.endswith(".json") else text
    s = text.strip()
    if s.startswith(("{", "[")):
        try:
            return json.loads(s)
        except json.JSONDecodeError as exc:
            raise argparse.ArgumentTypeError(f"invalid inline JSON: {exc}") from None
    return text


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=str))


def cmd_pretrain(a):
    _print_json(stages.pretrain(a.out, a.model, a.plan, a.corpus, a.seed, a.eval_items))


def cmd_cpt(a):
    _print_json(stages.cpt(a.out, a.inp, a.plan, a.corpus, a.seed, a.eval_items))


def cmd_upcycle(a):
    _print_json(stages.upcycle_file(a.out, a.inp, a.experts, a.top_k, a.router_std, a.noise_std, a.seed))


def cmd_plan_budget(a):
    res = stages.plan_budget(a.cpt_config, a.moe_config, a.cpt_tokens, a.mode, a.duration, a.seq_len, a.out)
    if a.json:
        _print_json({k: v for k, v in res.items() if k != "table"})
    else:
        print(res["table"])


def cmd_bench_sim(a):
    res = stages.bench_sim(a.out, a.model, a.hardware, a.workload, a.baseline, a.top_k, a.name)
    _print_json(res["summary_data"])


def cmd_eval(a):
    _print_json(stages.eval_checkpoint(a.inp, a.n_items, a.seed, a.out))


def _label_path(text: str):
    label, sep, path = text.partition("=")
    if not sep or not label or not path:
        raise argparse.ArgumentTypeError(f"expected LABEL=PATH, got {text!r}")
    return label, path


def _pair(text: str):
    parts = text.split(":")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected CPT_LABEL:UPCYCLED_LABEL:TOKENS, got {text!r}")
    return {"cpt": parts[0], "upcycled": parts[1], "additional_tokens": token_count(parts[2])}


def cmd_report(a):
    if not a.run and not a.sweep:
        raise ConfigError("report needs at least one --run or --sweep")
    files = stages.report(a.out, dict(a.run or []), a.pair or [], a.sweep or [])
    _print_json(files)


def cmd_run(a):
    m = manifest.ExperimentManifest.load(a.manifest)
    out = manifest.run_manifest(m, a.out, log=lambda s: print(s, file=sys.stderr))
    _print_json({"stages": sorted(out)})


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="upcyclelab", description="Sparse upcycling toolkit.")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.set_defaults(fn=fn)
        return sp

    def train_flags(sp):
        sp.add_argument("--out", required=True, help="output checkpoint path (.upcy)")
        sp.add_argument("--plan", type=json_value, default=None,
                        help="TrainPlan fields as a JSON file or inline JSON")
        sp.add_argument("--corpus", type=json_value, default=None,
                        help='corpus spec, e.g. {"kind": "domain"}; kinds: generic, domain, repeat, file')
        sp.add_argument("--seed", type=int, default=0, help="seed for init, corpus and eval tasks")
        sp.add_argument("--eval-items", type=int, default=0, help="multiple-choice items per task (0: skip)")

    sp = add("pretrain", cmd_pretrain, "Initialise and pretrain a dense model.")
    sp.add_argument("--model", type=json_value, required=True, help="preset name, JSON file or inline JSON")
    train_flags(sp)

    sp = add("cpt", cmd_cpt, "Continue pretraining a dense or upcycled checkpoint.")
    sp.add_argument("--in", dest="inp", required=True, help="input checkpoint (.upcy)")
    train_flags(sp)

    sp = add("upcycle", cmd_upcycle, "Convert a dense checkpoint into a mixture of experts.")
    sp.add_argument("--in", dest="inp", required=True, help="dense input checkpoint")
    sp.add_argument("--out", required=True, help="output checkpoint path")
    sp.add_argument("--experts", type=int, default=8, help="number of experts (default 8)")
    sp.add_argument("--top-k", type=int, default=2, help="experts per token (default 2)")
    sp.add_argument("--router-std", type=float, default=0.02, help="router init std (default 0.02)")
    sp.add_argument("--noise-std", type=float, default=0.0, help="expert weight noise std (default 0)")
    sp.add_argument("--seed", type=int, default=0, help="router/noise seed")

    sp = add("plan-budget", cmd_plan_budget, "Pair CPT tokens with iso-FLOP upcycled tokens.")
    sp.add_argument("--mode", choices=("analytic", "table4"), default="analytic", help="planner mode")
    sp.add_argument("--cpt-config", type=json_value, required=True, help="dense config or preset")
    sp.add_argument("--moe-config", type=json_value, required=True, help="upcycled config or preset")
    sp.add_argument("--cpt-tokens", type=token_count, required=True, help="CPT tokens, e.g. 4.3B")
    sp.add_argument("--duration", default=None, help="table4 duration: Medium, Long or 'Extra Long'")
    sp.add_argument("--seq-len", type=float, default=4096, help="sequence length for attention FLOPs")
    sp.add_argument("--out", default=None, help="also write the plan as JSON here")
    sp.add_argument("--json", action="store_true", help="print JSON instead of a table")

    sp = add("bench-sim", cmd_bench_sim, "Sweep request rates through the serving simulator.")
    sp.add_argument("--model", type=json_value, required=True, help="preset, config JSON or .upcy checkpoint")
    sp.add_argument("--hardware", type=json_value, default="h100", help="h100, h100xN or a JSON profile")
    sp.add_argument("--workload", type=json_value, default=None, help="WorkloadSpec JSON (default 3500/300)")
    sp.add_argument("--baseline", type=json_value, default=None, help="dense model for the %% decrease")
    sp.add_argument("--top-k", type=int, default=None, help="override the MoE top-k")
    sp.add_argument("--name", default="", help="display name")
    sp.add_argument("--out", required=True, help="output directory")

    sp = add("eval", cmd_eval, "Score a checkpoint on the multiple-choice suite.")
    sp.add_argument("--in", dest="inp", required=True, help="checkpoint to score")
    sp.add_argument("--n-items", type=int, default=48, help="items per task")
    sp.add_argument("--seed", type=int, default=0, help="task generation seed")
    sp.add_argument("--out", default=None, help="write the scores as JSON here")

    sp = add("report", cmd_report, "Render CSV tables and SVG charts from saved results.")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--run", type=_label_path, action="append", help="LABEL=path/to/*_run.json (repeatable)")
    sp.add_argument("--pair", type=_pair, action="append", help="CPT_LABEL:UPCYCLED_LABEL:TOKENS (repeatable)")
    sp.add_argument("--sweep", action="append", help="path to a sweep_result.json (repeatable)")

    sp = add("run", cmd_run, "Execute an experiment manifest.")
    sp.add_argument("manifest", help="manifest JSON file")
    sp.add_argument("--out", default=None, help="output directory (overrides the manifest)")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 0 for --help, 2 for usage errors
        return int(exc.code or 0)
    try:
        args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (UpcycleError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
