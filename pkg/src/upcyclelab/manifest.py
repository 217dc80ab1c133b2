"""Experiment manifests: a JSON file listing pipeline stages and their wiring.

Example::

    {
      "seed": 0,
      "output_dir": "runs/toy",
      "stages": [
        {"name": "base", "op": "pretrain", "args": {"model": {"preset": "436m"}}},
        {"name": "moe", "op": "upcycle", "args": {"checkpoint": "@base"}},
        {"name": "moe_cpt", "op": "cpt", "args": {"checkpoint": "@moe"}}
      ]
    }

A string argument ``"@stage"`` is replaced by that stage's primary output
(its checkpoint, or its output directory for stages without one), and
``"@stage:key"`` by a named output such as ``"@base:run"``.  References
and the optional ``after`` list define a dependency graph that must be
acyclic; it is checked before anything runs.  Each stage writes under
``<output_dir>/<stage name>/``.  The environment variable ``UPCYCLE_SEED``
overrides the manifest seed.
"""

from __future__ import annotations

import inspect
import json
import os
from dataclasses import dataclass, field
from graphlib import CycleError, TopologicalSorter
from typing import Optional

import jsonschema

from . import stages
from .errors import ConfigError, StageError, UpcycleError

SEED_ENV = "UPCYCLE_SEED"

# op name -> (function, name of the output-location argument, whether that location is a file)
OPS = {
    "pretrain": (stages.pretrain, "out", True),
    "cpt": (stages.cpt, "out", True),
    "upcycle": (stages.upcycle_file, "out", True),
    "plan-budget": (stages.plan_budget, "out", True),
    "bench-sim": (stages.bench_sim, "out_dir", False),
    "eval": (stages.eval_checkpoint, "out", True),
    "report": (stages.report, "out_dir", False),
    "experiment": (stages.experiment, "out_dir", False),
}
_FILE_NAMES = {"pretrain": "model.upcy", "cpt": "model.upcy", "upcycle": "model.upcy",
               "plan-budget": "plan.json", "eval": "eval.json"}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "output_dir": {"type": "string", "minLength": 1},
        "stages": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["name", "op"],
                "properties": {
                    "name": {"type": "string", "pattern": "^[A-Za-z0-9_.-]+$"},
                    "op": {"enum": sorted(OPS)},
                    "args": {"type": "object"},
                    "after": {"type": "array", "items": {"type": "string"}, "uniqueItems": True},
                },
            },
        },
    },
}


@dataclass
class Stage:
    name: str
    op: str
    args: dict = field(default_factory=dict)
    after: list = field(default_factory=list)


@dataclass
class ExperimentManifest:
    stages: list
    seed: int = 0
    output_dir: Optional[str] = None

    @classmethod
    def from_dict(cls, data) -> "ExperimentManifest":
        validate(data)
        stages_ = [Stage(s["name"], s["op"], dict(s.get("args", {})), list(s.get("after", [])))
                   for s in data.get("stages", [])]
        m = cls(stages_, int(data.get("seed", 0)), data.get("output_dir"))
        m.order()  # reject bad references and cycles up front
        return m

    @classmethod
    def load(cls, path: str) -> "ExperimentManifest":
        return cls.from_dict(stages.read_json(path))

    def dependencies(self) -> dict[str, set]:
        names = [s.name for s in self.stages]
        if len(set(names)) != len(names):
            dup = sorted({n for n in names if names.count(n) > 1})
            raise ConfigError(f"duplicate stage names: {dup}")
        deps = {}
        for i, s in enumerate(self.stages):
            d = set(s.after) | {ref.split(":", 1)[0] for ref in _refs(s.args)}
            unknown = sorted(d - set(names))
            if unknown:
                raise ConfigError(f"/stages/{i}: stage {s.name!r} references unknown stages {unknown}")
            deps[s.name] = d
        return deps

    def order(self) -> list[str]:
        try:
            return list(TopologicalSorter(self.dependencies()).static_order())
        except CycleError as exc:
            raise ConfigError(f"stage dependencies form a cycle: {' -> '.join(exc.args[1])}") from None


def validate(data) -> None:
    """Raise ``ConfigError`` naming the JSON pointer of the first schema violation."""
    err = jsonschema.exceptions.best_match(jsonschema.Draft202012Validator(SCHEMA).iter_errors(data))
    if err is not None:
        pointer = "/" + "/".join(str(p) for p in err.absolute_path)
        raise ConfigError(f"manifest {pointer}: {err.message}")


def _refs(value):
    if isinstance(value, str) and value.startswith("@"):
        yield value[1:]
    elif isinstance(value, dict):
        for v in value.values():
            yield from _refs(v)
    elif isinstance(value, list):
        for v in value:
            yield from _refs(v)


def _resolve(value, outputs: dict, stage: str):
    if isinstance(value, str) and value.startswith("@"):
        ref, _, key = value[1:].partition(":")
        produced = outputs[ref]
        key = key or ("checkpoint" if "checkpoint" in produced else "dir")
        if key not in produced:
            raise StageError(stage, f"stage {ref!r} has no output {key!r}; it has {sorted(produced)}")
        path = produced[key]
        if isinstance(path, str) and not os.path.exists(path):
            raise StageError(stage, f"input {value} -> {path} does not exist")
        return path
    if isinstance(value, dict):
        return {k: _resolve(v, outputs, stage) for k, v in value.items()}
    if isinstance(value, list):
        return [_resolve(v, outputs, stage) for v in value]
    return value


def effective_seed(manifest: ExperimentManifest) -> int:
    env = os.environ.get(SEED_ENV)
    if env is None or env == "":
        return manifest.seed
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from None


def run_manifest(manifest: ExperimentManifest, output_dir: Optional[str] = None, log=None) -> dict:
    """Execute every stage in dependency order; returns stage name -> outputs."""
    say = log or (lambda msg: None)
    out_root = output_dir or manifest.output_dir
    if out_root is None:
        raise ConfigError("no output directory: set output_dir in the manifest or pass one")
    seed = effective_seed(manifest)
    by_name = {s.name: s for s in manifest.stages}
    order = manifest.order()
    os.makedirs(out_root, exist_ok=True)
    outputs: dict[str, dict] = {}
    for name in order:
        st = by_name[name]
        fn, out_arg, is_file = OPS[st.op]
        stage_dir = os.path.join(out_root, name)
        args = _resolve(st.args, outputs, name)
        if out_arg in args:
            args[out_arg] = os.path.join(out_root, args[out_arg])
        else:
            args[out_arg] = os.path.join(stage_dir, _FILE_NAMES[st.op]) if is_file else stage_dir
        params = inspect.signature(fn).parameters
        accepts_kw = any(p.kind is p.VAR_KEYWORD for p in params.values())
        if "seed" in params or accepts_kw:
            args.setdefault("seed", seed)
        if not accepts_kw:
            unknown = sorted(set(args) - set(params))
            if unknown:
                raise ConfigError(f"stage {name!r}: unknown arguments {unknown} for op {st.op!r}")
        os.makedirs(stage_dir, exist_ok=True)
        say(f"[{name}] {st.op}")
        try:
            produced = fn(**args)
        except ConfigError as exc:
            raise ConfigError(f"stage {name!r}: {exc}") from exc
        except (UpcycleError, OSError, ValueError, KeyError) as exc:
            raise StageError(name, str(exc)) from exc
        produced = {k: v for k, v in (produced or {}).items() if isinstance(v, (str, int, float, bool))}
        produced["dir"] = stage_dir
        outputs[name] = produced
    if outputs:
        summary = {"seed": seed, "order": order,
                   "stages": {n: {k: _rel(v, out_root) for k, v in o.items()} for n, o in outputs.items()}}
        with open(os.path.join(out_root, "manifest_run.json"), "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return outputs


def _rel(v, root):
    if isinstance(v, str) and os.path.isabs(v) == os.path.isabs(root) and v.startswith(root):
        return os.path.relpath(v, root)
    return v
