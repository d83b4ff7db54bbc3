"""Command-line interface.

Subcommands
-----------
gen-data     generate a task corpus for one environment and write it to disk
train-prior  train a prior predictor from a JSON config; writes a checkpoint
invert       evaluate a prior variant on stored tasks; writes a results table
bounds       evaluate transfer-bound formulas from a JSON inputs file
report       re-emit a stored results table as CSV/JSON

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import bounds as bounds_mod
from .bounds import BoundInputs
from .harness import (
    EnvironmentSpec,
    ExperimentConfig,
    ResultsTable,
    VARIANTS,
    build_dataset,
    default_train_config,
    desk_spec,
    emit_report,
    evaluate_variant,
    generate_tasks,
    load_checkpoint,
    load_tasks,
    make_environment,
    save_checkpoint,
    save_tasks,
    state_from_checkpoint,
    state_to_checkpoint,
    train_variant,
)
from .hyper import HyperConfig

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


class ConfigError(Exception):
    pass


def _env_spec_from_args(args) -> EnvironmentSpec:
    problem = {"diffusion": "diffusion", "darcy": "darcy"}.get(args.env)
    if problem is None:
        raise ConfigError(f"unknown environment {args.env!r}")
    if args.regime not in ("simple", "complex"):
        raise ConfigError(f"unknown regime {args.regime!r}")
    spec = desk_spec(problem, args.regime, seed=args.seed)
    if args.n_train is not None or args.n_test is not None:
        spec = dataclasses.replace(
            spec,
            n_train=args.n_train or spec.n_train,
            n_test=args.n_test or spec.n_test,
        )
    return spec


def _cmd_gen_data(args) -> int:
    spec = _env_spec_from_args(args)
    env = make_environment(spec)
    os.makedirs(args.out, exist_ok=True)
    train_tasks = generate_tasks(env, spec.n_train, spec.seed)
    test_tasks = generate_tasks(env, spec.n_test, spec.seed + 1)
    save_tasks(os.path.join(args.out, "train.tasks"), spec, "train",
               train_tasks)
    save_tasks(os.path.join(args.out, "test.tasks"), spec, "test",
               test_tasks)
    print(f"wrote {spec.n_train} train / {spec.n_test} test tasks to "
          f"{args.out}")
    return EXIT_OK


def _hyper_config_from_dict(d: dict, base: HyperConfig) -> HyperConfig:
    known = {f.name for f in dataclasses.fields(HyperConfig)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown HyperConfig fields: {sorted(unknown)}")
    if "lr_schedule" in d:
        d = dict(d)
        d["lr_schedule"] = tuple(
            (int(n), float(lr)) for n, lr in d["lr_schedule"]
        )
    return dataclasses.replace(base, **d)


def _cmd_train_prior(args) -> int:
    try:
        with open(args.config) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {args.config}: {exc}")
    for key in ("tasks", "variant", "out"):
        if key not in cfg:
            raise ConfigError(f"config is missing the {key!r} entry")
    variant = cfg["variant"]
    if variant not in ("independent", "dependent"):
        raise ConfigError(f"cannot train variant {variant!r}")
    env, split, dataset = load_tasks(cfg["tasks"])
    if split != "train":
        raise ConfigError(f"{cfg['tasks']} holds the {split!r} split, "
                          "training needs the train split")
    hyper = default_train_config(env.spec.problem, variant, env.spec.seed)
    hyper = _hyper_config_from_dict(cfg.get("hyper", {}), hyper)
    state = train_variant(env, dataset, variant, hyper)
    meta, sections = state_to_checkpoint(state, variant, env.spec)
    save_checkpoint(cfg["out"], meta, sections)
    print(f"trained {variant} prior on {dataset.n} tasks -> {cfg['out']}")
    return EXIT_OK


def _cmd_invert(args) -> int:
    if args.prior not in VARIANTS:
        raise ConfigError(f"unknown prior variant {args.prior!r}")
    env, split, dataset = load_tasks(args.tasks)
    state = None
    if args.prior != "unlearned":
        if not args.checkpoint:
            raise ConfigError(f"prior {args.prior!r} needs --checkpoint")
        meta, sections = load_checkpoint(args.checkpoint)
        if meta["variant"] != args.prior:
            raise ConfigError(
                f"checkpoint holds the {meta['variant']!r} variant, "
                f"not {args.prior!r}")
        state = state_from_checkpoint(env, meta, sections)
    errors = evaluate_variant(env, dataset, state, args.max_itn)
    table = ResultsTable(
        itn=list(range(1, args.max_itn + 1)),
        errors={args.prior: [float(e) for e in errors]},
        config={"spec": dataclasses.asdict(env.spec), "split": split,
                "prior": args.prior, "max_itn": args.max_itn},
    )
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "table.json"), "w",
              newline="\n") as fh:
        fh.write(table.to_json())
    paths = emit_report(table, args.out)
    print("wrote " + ", ".join(paths))
    return EXIT_OK


_BOUND_KINDS = {
    "bounded_indep": ("bound_bounded_indep", ("a", "b")),
    "subgaussian_indep": ("bound_subgaussian_indep", ("s1_sq", "s2_sq")),
    "bounded_dep": ("bound_bounded_dep", ("a", "b")),
    "subgaussian_dep": ("bound_subgaussian_dep", ("s1_sq", "s2_sq")),
    "subgamma": ("bound_subgamma", ("s1_sq", "s2_sq", "c1", "c2")),
}


def _eval_bound(kind: str, inputs: dict, extra: dict):
    if kind not in _BOUND_KINDS:
        raise ConfigError(f"unknown bound kind {kind!r}")
    fn_name, extra_keys = _BOUND_KINDS[kind]
    missing = [k for k in extra_keys if k not in extra]
    if missing:
        raise ConfigError(f"bound {kind!r} needs parameters {missing}")
    inp = BoundInputs(**inputs)
    fn = getattr(bounds_mod, fn_name)
    return fn(inp, *(float(extra[k]) for k in extra_keys))


def _cmd_bounds(args) -> int:
    try:
        with open(args.inputs) as fh:
            spec = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read inputs {args.inputs}: {exc}")
    for key in ("kind", "inputs", "out"):
        if key not in spec:
            raise ConfigError(f"inputs file is missing the {key!r} entry")
    try:
        report = _eval_bound(spec["kind"], spec["inputs"],
                             spec.get("params", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc))
    os.makedirs(spec["out"], exist_ok=True)
    payload = {"kind": report.kind, "terms": report.terms,
               "total": report.total}
    with open(os.path.join(spec["out"], "bound.json"), "w",
              newline="\n") as fh:
        fh.write(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    # optional sweep over n or m
    sweep = spec.get("sweep")
    lines = []
    if sweep:
        param = sweep.get("param")
        if param not in ("n", "m"):
            raise ConfigError("sweep.param must be 'n' or 'm'")
        lines.append(f"{param},bound")
        for value in sweep["values"]:
            inputs = dict(spec["inputs"])
            inputs[param] = int(value)
            rep = _eval_bound(spec["kind"], inputs, spec.get("params", {}))
            lines.append(f"{int(value)},{format(rep.total, '.17g')}")
        with open(os.path.join(spec["out"], "bound_sweep.csv"), "w",
                  newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")
    print(f"bound total = {report.total:.6g} -> {spec['out']}")
    return EXIT_OK


def _cmd_report(args) -> int:
    path = os.path.join(args.run, "table.json")
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}")
    table = ResultsTable(itn=payload["itn"], errors=payload["errors"],
                         config=payload["config"])
    formats = tuple(f.strip() for f in args.format.split(",") if f.strip())
    for fmt in formats:
        if fmt not in ("csv", "json"):
            raise ConfigError(f"unknown report format {fmt!r}")
    paths = emit_report(table, args.run, formats)
    print("wrote " + ", ".join(paths))
    return EXIT_OK


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="priorlearn",
                                description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a task corpus")
    g.add_argument("--env", required=True, choices=("diffusion", "darcy"))
    g.add_argument("--regime", required=True, choices=("simple", "complex"))
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--n-train", type=int, default=None)
    g.add_argument("--n-test", type=int, default=None)
    g.set_defaults(fn=_cmd_gen_data)

    t = sub.add_parser("train-prior", help="train a prior predictor")
    t.add_argument("--config", required=True)
    t.set_defaults(fn=_cmd_train_prior)

    i = sub.add_parser("invert", help="evaluate a prior on stored tasks")
    i.add_argument("--prior", required=True, choices=VARIANTS)
    i.add_argument("--checkpoint", default=None)
    i.add_argument("--tasks", required=True)
    i.add_argument("--max-itn", type=int, default=10)
    i.add_argument("--out", required=True)
    i.set_defaults(fn=_cmd_invert)

    b = sub.add_parser("bounds", help="evaluate transfer-bound formulas")
    b.add_argument("--inputs", required=True)
    b.set_defaults(fn=_cmd_bounds)

    r = sub.add_parser("report", help="re-emit a stored results table")
    r.add_argument("--run", required=True)
    r.add_argument("--format", default="csv,json")
    r.set_defaults(fn=_cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (KeyError, TypeError, OSError) as exc:
        print(f"config error: {exc!r}", file=sys.stderr)
        return EXIT_CONFIG
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
