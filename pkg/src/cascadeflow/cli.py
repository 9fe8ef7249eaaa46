"""Single command-line entry point wiring all modules into reproducible runs.

Subcommands: synth, train, sample, validate, eval, bench. Every command
writes line-delimited JSON reports (and a resolved run_config.json when it
produces artifacts). Exit codes: 0 success, 2 configuration/input error,
3 certification-suite failure, 1 unexpected internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .bench import analytic_eval_counts, measure_cached_vs_uncached, measure_direct
from .config import (
    load_config,
    model_from_config,
    persist_config,
    schedule_from_config,
    train_config_from,
)
from .errors import CascadeflowError, ConfigError
from .metrics import evaluate_ensemble
from .model import load_checkpoint
from .sampling import SampleRequest, sample
from .synth import (
    ScenarioSpec,
    default_dataset,
    generate,
    read_container,
    read_samples,
    write_container,
    write_samples,
)
from .training import train
from .validate import run_validation

log = logging.getLogger("cascadeflow")


def _emit(record: dict, fh=None) -> None:
    line = json.dumps(record, sort_keys=True)
    print(line)
    if fh is not None:
        fh.write(line + "\n")


def _downsample_months(array: np.ndarray, months_per_frame: int) -> np.ndarray:
    c, m = array.shape[:2]
    if months_per_frame == 1:
        return array
    return array.reshape(c, m // months_per_frame, months_per_frame, *array.shape[2:]).mean(axis=2)


def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    data = cfg["data"]
    years = args.years or data["years"]
    n_lat, n_lon = (args.grid or (data["n_lat"], data["n_lon"]))
    seed = cfg["seed"] if args.seed is None else args.seed
    if args.scenario:
        spec = ScenarioSpec(args.scenario, years=years, members=args.members or 3,
                            n_lat=n_lat, n_lon=n_lon)
        dataset = generate(spec, seed, role=args.role)
    else:
        dataset = default_dataset(seed, years=years, n_lat=n_lat, n_lon=n_lon)
    write_container(dataset, args.out)
    persist_config(cfg, args.out)
    _emit({"command": "synth", "out": str(args.out),
           "scenarios": sorted(dataset.scenarios), "seed": seed})
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.steps is not None:
        cfg["train"]["steps"] = args.steps
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.single_path:
        cfg["train"]["multi_timescale"] = False
    dataset = read_container(args.data)
    schedule = schedule_from_config(cfg)
    model = model_from_config(cfg)
    train_cfg = train_config_from(cfg)
    out = Path(args.out)
    report = train(model, dataset, schedule, train_cfg, out_dir=out)
    persist_config(cfg, out)
    _emit({
        "command": "train",
        "steps": report.steps,
        "final_moving_average": report.moving_average,
        "wall_seconds": report.wall_seconds,
        "checkpoint": report.checkpoint_path,
    })
    return 0


def cmd_sample(args) -> int:
    cfg = load_config(args.config)
    schedule = schedule_from_config(cfg)
    model = load_checkpoint(args.checkpoint)
    dataset = read_container(args.data)
    scenario = dataset.scenario(args.scenario)
    seed = cfg["seed"] if args.seed is None else args.seed
    request = SampleRequest(
        timescale=args.timescale,
        forcings=scenario.forcings,
        lat_degrees=dataset.lat_degrees,
        period=tuple(args.period) if args.period else None,
        ensemble=args.ensemble or cfg["sample"]["ensemble"],
        steps=args.steps or cfg["sample"]["steps"],
        seed=seed,
    )
    members = sample(model, schedule, request)
    preds = np.stack([m.data for m in members])
    meta = {
        "scenario": args.scenario,
        "timescale": args.timescale,
        "period": list(args.period) if args.period else None,
        "steps": request.steps,
        "seed": seed,
    }
    write_samples(args.out, preds, dataset.lat_degrees, args.timescale, meta)
    persist_config(cfg, args.out)
    _emit({"command": "sample", "out": str(args.out), "members": len(members),
           "shape": list(preds.shape), **meta})
    return 0


def cmd_validate(args) -> int:
    cfg = load_config(args.config)
    schedule = schedule_from_config(cfg)
    reports = run_validation(schedule, draws=args.draws, seed=args.seed or cfg["seed"])
    fh = None
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        fh = open(args.out, "w")
    try:
        failed = []
        for report in reports:
            _emit(report, fh)
            if not report["pass"]:
                failed.append(report["check"])
    finally:
        if fh is not None:
            fh.close()
    if failed:
        log.error("certification failures: %s", failed)
        print(json.dumps({"command": "validate", "failed": failed}), file=sys.stderr)
        return 3
    return 0


def cmd_eval(args) -> int:
    dataset = read_container(args.data)
    preds, lat, manifest = read_samples(args.pred)
    scenario = dataset.scenario(args.scenario)
    timescale = args.timescale or manifest["timescale"]
    # targets: held-out member 0, block-averaged to the evaluated timescale
    month_factors = {"monthly": 1, "yearly": 12, "decadal": 120}
    if timescale not in month_factors:
        raise ConfigError(f"unknown timescale {timescale!r}")
    target = _downsample_months(scenario.targets[0], month_factors[timescale])
    if preds.shape[1:] != target.shape:
        raise ConfigError(
            f"prediction shape {preds.shape[1:]} does not match target {target.shape}"
        )
    scores = evaluate_ensemble(preds, target, dataset.lat_degrees)
    rows = ["timescale,variable,CRPS,RMSE,Bias"]
    channel_names = {"0": "temperature", "1": "precipitation", "overall": "overall"}
    for key, vals in scores.items():
        rows.append(
            f"{timescale},{channel_names.get(key, key)},"
            f"{vals['crps']:.6f},{vals['rmse']:.6f},{vals['bias']:.6f}"
        )
    text = "\n".join(rows) + "\n"
    print(text, end="")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    return 0


def cmd_bench(args) -> int:
    cfg = load_config(args.config)
    schedule = schedule_from_config(cfg)
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
    else:
        model = model_from_config(cfg)  # untrained weights: eval counts are weight-free
    dataset = read_container(args.data)
    scenario = dataset.scenario(args.scenario or sorted(dataset.scenarios)[0])
    seed = args.seed if args.seed is not None else cfg["seed"]
    steps = args.steps or cfg["sample"]["steps"]
    fh = None
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        fh = open(args.out, "w")
    try:
        span = scenario.forcings.shape[1]
        for ts in [st.timescale_label for st in schedule.stages[::-1]]:
            request = SampleRequest(ts, scenario.forcings, dataset.lat_degrees,
                                    ensemble=1, steps=steps, seed=seed)
            record = measure_direct(model, schedule, request)
            record["analytic_evals"] = analytic_eval_counts(schedule, span, ts, steps)["total"]
            _emit({"command": "bench", **record}, fh)
        finest = schedule.stages[0].timescale_label
        request = SampleRequest(finest, scenario.forcings, dataset.lat_degrees,
                                ensemble=1, steps=steps, seed=seed)
        _emit({"command": "bench", **measure_cached_vs_uncached(model, schedule, request)}, fh)
    finally:
        if fh is not None:
            fh.close()
    return 0


def _parse_grid(text: str) -> tuple[int, int]:
    try:
        a, b = text.lower().split("x")
        return int(a), int(b)
    except ValueError as exc:
        raise ConfigError(f"grid must look like 24x36, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cascadeflow",
        description="Multi-timescale pyramid flow matching for climate-field emulation",
    )
    parser.add_argument("--config", default=None, help="JSON run config (merged over defaults)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scenario dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--years", type=int, default=None)
    p.add_argument("--grid", type=_parse_grid, default=None, metavar="LATxLON")
    p.add_argument("--members", type=int, default=None)
    p.add_argument("--scenario", default=None, help="generate a single named scenario")
    p.add_argument("--role", default="train", choices=["train", "heldout"])
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a velocity model on a dataset container")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--single-path", action="store_true",
                   help="disable multi-timescale path sampling")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate an ensemble from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--scenario", required=True)
    p.add_argument("--timescale", required=True)
    p.add_argument("--period", type=int, nargs="*", default=None,
                   help="coarse-to-fine window indices (e.g. decade year)")
    p.add_argument("--ensemble", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("validate", help="run the Monte Carlo certification suite")
    p.add_argument("--draws", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="also write reports to this JSONL file")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("eval", help="score an ensemble against held-out truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--scenario", required=True)
    p.add_argument("--timescale", default=None)
    p.add_argument("--out", default=None, help="CSV output path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="model-evaluation counts across timescales")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--scenario", default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("CASCADEFLOW_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except ConfigError as exc:
        print(json.dumps({"error": "config", "message": str(exc)}), file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except ConfigError as exc:
        print(json.dumps({"error": "config", "message": str(exc)}), file=sys.stderr)
        return 2
    except CascadeflowError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - defensive
        log.exception("unexpected failure")
        print(json.dumps({"error": "internal", "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
