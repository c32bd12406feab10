"""Command-line front end: fit a dataset, run benchmarks, emit reports.

Reports are deterministic given the seed; wall-clock timing goes to stderr
and an optional sidecar file so the primary artifact stays byte-reproducible.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from dataclasses import replace

import numpy as np

from .bench import (
    GeneratorSpec,
    MODEL_NAMES,
    fit_and_rank,
    holdout_rmse,
    load_csv,
    run_benchmark,
    split,
)
from .prior import PriorConfig, dropped_leaf_constant
from .relax import TempSchedule
from .sampler import render_candidate, top_k
from .train import FitError, TrainConfig, write_trace_csv
from .trees import DEFAULT_OPERATORS, OperatorSet

SCHEMA_VERSION = 1

EXIT_USAGE = 2
EXIT_OPTIMIZATION = 3

# flat key=value configuration file; flags override file values
CONFIG_KEYS = {
    "trees": int,
    "depth": int,
    "steps": int,
    "mc_samples": int,
    "lr": float,
    "clip": float,
    "alpha": float,
    "delta": float,
    "a0": float,
    "b0": float,
    "sigma0_scale": float,
    "tau_start": float,
    "tau_end": float,
    "tau_steps": int,
    "hard_samples": int,
    "seed": int,
    "operators": str,
    "test_fraction": float,
}

DEFAULTS = {
    "trees": 3,
    "depth": 3,
    "steps": 2000,
    "mc_samples": 8,
    "lr": 5e-5,
    "clip": 1.0,
    "alpha": 0.95,
    "delta": 2.0,
    "a0": 2.0,
    "b0": 2.0,
    "sigma0_scale": 10.0,
    "tau_start": 1.0,
    "tau_end": 0.5,
    "tau_steps": 1500,
    "hard_samples": 2000,
    "seed": 0,
    "operators": ",".join(DEFAULT_OPERATORS.members),
    "test_fraction": 0.1,
}


class UsageError(RuntimeError):
    pass


def load_config(path: str) -> dict:
    """Parse a flat key=value file; unknown keys are fatal."""
    merged = {}
    with open(path) as handle:
        for line_no, raw in enumerate(handle, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{line_no}: expected key=value, got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in CONFIG_KEYS:
                raise UsageError(
                    f"{path}:{line_no}: unknown key {key!r}; valid keys: {', '.join(sorted(CONFIG_KEYS))}"
                )
            try:
                merged[key] = CONFIG_KEYS[key](value)
            except ValueError:
                raise UsageError(f"{path}:{line_no}: bad value for {key}: {value!r}") from None
    return merged


def _merge_settings(args) -> dict:
    settings = dict(DEFAULTS)
    if args.config:
        settings.update(load_config(args.config))
    for key in CONFIG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    return settings


def _build_configs(settings: dict):
    ops = OperatorSet.from_names(name.strip() for name in settings["operators"].split(",") if name.strip())
    if ops.size == 0:
        raise UsageError("operator set is empty")
    prior_cfg = PriorConfig(
        alpha=settings["alpha"],
        delta=settings["delta"],
        a0=settings["a0"],
        b0=settings["b0"],
        sigma0_scale=settings["sigma0_scale"],
    )
    train_cfg = TrainConfig(
        steps=settings["steps"],
        mc_samples=settings["mc_samples"],
        learning_rate=settings["lr"],
        clip=settings["clip"],
        seed=settings["seed"],
        schedule=TempSchedule(settings["tau_start"], settings["tau_end"], settings["tau_steps"]),
    )
    return ops, prior_cfg, train_cfg


def _json_safe(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, (np.floating, np.integer)):
        return _json_safe(value.item())
    if isinstance(value, np.ndarray):
        return [_json_safe(v) for v in value.tolist()]
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    return value


def _write_atomic(path: str, text: str):
    tmp = path + ".tmp"
    with open(tmp, "w") as handle:
        handle.write(text)
    os.replace(tmp, path)


def _write_json(path: str, payload: dict):
    _write_atomic(path, json.dumps(_json_safe(payload), sort_keys=True, indent=2) + "\n")


def _config_echo(settings: dict, train_cfg: TrainConfig, prior_cfg: PriorConfig, ops, n_trees, depth, n_features) -> dict:
    from .trees import Topology

    topo = Topology(depth)
    prior = prior_cfg.resolved(n_trees + 1, ops.size, n_features)
    return {
        **{k: settings[k] for k in sorted(CONFIG_KEYS)},
        "adam_betas": list(train_cfg.adam_betas),
        "adam_eps": train_cfg.adam_eps,
        "weight_decay": train_cfg.weight_decay,
        "operator_list": list(ops.members),
        "init": {
            "gate_logits": "logit of the depth-dependent split probabilities",
            "label_logit_sd": 0.01,
            "log_concentrations": "log of the prior concentrations",
        },
        "kl_dropped_leaf_constant": dropped_leaf_constant(prior, topo, n_trees),
    }


def cmd_fit(args) -> int:
    settings = _merge_settings(args)
    ops, prior_cfg, train_cfg = _build_configs(settings)

    try:
        data = load_csv(args.data)
    except (OSError, ValueError) as err:
        print(f"error: cannot load data: {err}", file=sys.stderr)
        return EXIT_USAGE

    started = time.perf_counter()
    test = None
    train = data
    if settings["test_fraction"] > 0:
        train, test = split(data, settings["test_fraction"], settings["seed"])

    try:
        result, candidates, _ = fit_and_rank(
            train,
            prior_cfg,
            train_cfg,
            ops,
            n_trees=settings["trees"],
            depth=settings["depth"],
            hard_samples=settings["hard_samples"],
        )
    except (FitError, RuntimeError) as err:
        print(f"error: optimization failed: {err}", file=sys.stderr)
        return EXIT_OPTIMIZATION
    elapsed = time.perf_counter() - started

    shown, truncated = top_k(candidates, args.top_k)
    rows = []
    for cand in shown:
        rows.append(
            {
                "rank": cand.rank,
                "draw_index": cand.draw_index,
                "in_rmse": cand.in_rmse,
                "test_rmse": holdout_rmse(cand, test) if test is not None else None,
                "sigma2_pm": cand.sigma2_pm,
                "beta_pm": list(cand.beta_pm),
                "canonical": list(cand.canonical),
                "expression": render_candidate(cand, data.feature_names),
            }
        )

    elbo_values = [row.elbo for row in result.trace if not row.skipped]
    report = {
        "schema_version": SCHEMA_VERSION,
        "command": "fit",
        "config": _config_echo(
            settings, train_cfg, prior_cfg, ops, settings["trees"], settings["depth"], data.p
        ),
        "seed": settings["seed"],
        "data": {
            "path": args.data,
            "n": data.n,
            "p": data.p,
            "feature_names": list(data.feature_names),
            "n_train": train.n,
            "n_test": test.n if test is not None else 0,
        },
        "training": {
            "steps": train_cfg.steps,
            "applied_steps": result.applied_steps,
            "skipped_steps": result.skipped_steps,
            "first_elbo": elbo_values[0] if elbo_values else None,
            "final_elbo": elbo_values[-1] if elbo_values else None,
        },
        "candidates": rows,
        "n_candidates_scored": len(candidates),
        "top_k_truncated": truncated,
    }
    _write_json(args.out, report)

    if args.expressions_out:
        lines = [f"rank {row['rank']}  in_rmse={row['in_rmse']:.6g}  {row['expression']}" for row in rows]
        _write_atomic(args.expressions_out, "\n".join(lines) + "\n")
    if args.trace_out:
        write_trace_csv(result.trace, args.trace_out)
    if args.timing_out:
        _write_json(args.timing_out, {"wall_clock_seconds": elapsed})
    print(f"wall_clock_seconds={elapsed:.3f}", file=sys.stderr)
    return 0


def cmd_bench(args) -> int:
    settings = _merge_settings(args)
    ops, prior_cfg, train_cfg = _build_configs(settings)
    if args.model not in MODEL_NAMES:
        print(f"error: unknown model {args.model!r}; choose from {', '.join(MODEL_NAMES)}", file=sys.stderr)
        return EXIT_USAGE

    spec = GeneratorSpec(model=args.model, n=args.n, noise_sd=args.noise, seed=settings["seed"])
    try:
        report = run_benchmark(
            spec,
            prior_cfg,
            train_cfg,
            repeats=args.repeats,
            ops=ops,
            n_trees=settings["trees"],
            depth=settings["depth"],
            hard_samples=settings["hard_samples"],
            test_fraction=settings["test_fraction"],
        )
    except (FitError, RuntimeError) as err:
        print(f"error: benchmark failed: {err}", file=sys.stderr)
        return EXIT_OPTIMIZATION

    lines = [
        "model,noise_sd,repeats,mean_test_rmse,sd_test_rmse,mean_seconds,single_run",
        ",".join(
            [
                report.model,
                repr(report.noise_sd),
                str(len(report.repeats)),
                repr(report.mean_rmse),
                repr(report.sd_rmse),
                repr(report.mean_seconds),
                str(int(report.single_run)),
            ]
        ),
    ]
    _write_atomic(args.out, "\n".join(lines) + "\n")

    if args.json_out:
        payload = {
            "schema_version": SCHEMA_VERSION,
            "command": "bench",
            "model": report.model,
            "noise_sd": report.noise_sd,
            "config": {k: settings[k] for k in sorted(CONFIG_KEYS)},
            "repeats": [
                {
                    "repeat": r.repeat,
                    "seed": r.seed,
                    "test_rmse": r.test_rmse,
                    "in_rmse": r.in_rmse,
                    "canonical": list(r.canonical),
                    "expression": r.expression,
                    "seconds": r.seconds,
                    "skipped_steps": r.skipped_steps,
                }
                for r in report.repeats
            ],
            "mean_test_rmse": report.mean_rmse,
            "sd_test_rmse": report.sd_rmse,
        }
        _write_json(args.json_out, payload)
    print(
        f"{report.model} noise={report.noise_sd}: rmse {report.mean_rmse:.6g} +/- {report.sd_rmse:.6g} "
        f"({report.mean_seconds:.1f}s/run)",
        file=sys.stderr,
    )
    return 0


def _add_shared_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="flat key=value configuration file")
    parser.add_argument("--trees", type=int)
    parser.add_argument("--depth", type=int)
    parser.add_argument("--steps", type=int)
    parser.add_argument("--mc-samples", dest="mc_samples", type=int)
    parser.add_argument("--lr", type=float)
    parser.add_argument("--clip", type=float)
    parser.add_argument("--alpha", type=float)
    parser.add_argument("--delta", type=float)
    parser.add_argument("--a0", type=float)
    parser.add_argument("--b0", type=float)
    parser.add_argument("--sigma0-scale", dest="sigma0_scale", type=float)
    parser.add_argument("--tau-start", dest="tau_start", type=float)
    parser.add_argument("--tau-end", dest="tau_end", type=float)
    parser.add_argument("--tau-steps", dest="tau_steps", type=int)
    parser.add_argument("--hard-samples", dest="hard_samples", type=int)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--operators", type=str)
    parser.add_argument("--test-fraction", dest="test_fraction", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="symvi", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    fit_p = sub.add_parser("fit", help="fit a CSV dataset and rank sampled expressions")
    fit_p.add_argument("--data", required=True, help="input CSV (features plus y/target column)")
    fit_p.add_argument("--out", required=True, help="JSON report path")
    fit_p.add_argument("--expressions-out", help="optional text file with the top expressions")
    fit_p.add_argument("--trace-out", help="optional training-trace CSV")
    fit_p.add_argument("--timing-out", help="optional wall-clock sidecar JSON")
    fit_p.add_argument("--top-k", dest="top_k", type=int, default=5)
    _add_shared_flags(fit_p)
    fit_p.set_defaults(func=cmd_fit)

    bench_p = sub.add_parser("bench", help="run a synthetic benchmark")
    bench_p.add_argument("--model", required=True, help=f"one of {', '.join(MODEL_NAMES)}")
    bench_p.add_argument("--noise", type=float, default=0.0)
    bench_p.add_argument("--repeats", type=int, default=10)
    bench_p.add_argument("--n", type=int, default=2000)
    bench_p.add_argument("--out", required=True, help="summary CSV path")
    bench_p.add_argument("--json-out", help="per-repeat JSON path")
    _add_shared_flags(bench_p)
    bench_p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
