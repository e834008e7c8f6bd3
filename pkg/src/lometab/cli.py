"""Command-line entry point: ``lometab <command> [options]``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import expressivity, harness, metrics
from .layers import fit_ple
from .model import init_model, save_checkpoint
from .numkernel import make_rng
from .trainer import evaluate, fit, target_scaler_for

log = logging.getLogger("lometab")


def _parse_seeds(text: str) -> list[int]:
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        elif part:
            seeds.append(int(part))
    return seeds


def _dataset_from_flag(data: str, schema: str | None) -> dict:
    """``--data synthetic:<kind>[:n]`` or a CSV path (needs ``--schema``)."""
    if data.startswith("synthetic:"):
        parts = data.split(":")
        spec = {"synthetic": parts[1]}
        if len(parts) > 2:
            spec["n"] = int(parts[2])
        return spec
    if schema is None:
        raise harness.ConfigError("--data with a CSV file needs --schema")
    return {"csv": data, "schema": schema}


def load_config(args) -> harness.ExperimentConfig:
    raw = {}
    if args.config:
        with open(args.config) as fh:
            raw = json.load(fh)
    if args.data:
        raw["dataset"] = _dataset_from_flag(args.data, args.schema)
    if "dataset" not in raw:
        raise harness.ConfigError("no dataset: pass --data or a config with a 'dataset' section")
    if args.seeds:
        raw["seeds"] = _parse_seeds(args.seeds)
    return harness.ExperimentConfig.from_dict(raw)


def _out_path(args, default_name: str) -> Path:
    out = Path(args.out or ".")
    if out.suffix:
        return out
    out.mkdir(parents=True, exist_ok=True)
    ext = ".csv" if args.format == "csv" else ".jsonl"
    return out / f"{default_name}{ext}"


def _emit(records, args, name):
    paths = harness.export_results(records, _out_path(args, name), args.format)
    for kind, p in paths.items():
        print(f"{kind}: {p}")
    return paths


def cmd_train(args) -> int:
    cfg = load_config(args)
    seed = cfg.seeds[0]
    ds = harness.load_dataset(cfg.dataset)
    mcfg = dataclasses.replace(cfg.model, task=ds.task, n_classes=ds.n_classes, seed=seed,
                               variant=cfg.variants[0])
    tcfg = dataclasses.replace(cfg.train, seed=seed)
    ple = fit_ple(ds.split("train")[0], mcfg.n_bins, ds.cat_cardinalities)
    model = init_model(mcfg, ple, make_rng(seed))
    model, report = fit(model, ds, tcfg)
    scaler = target_scaler_for(ds)
    pred, y = evaluate(model, ds, "test", scaler)
    var = ds.train_target_variance() if ds.task == "regression" else None
    rep = metrics.diversity_report(ds.task, pred.members, y, var or None)

    out = Path(args.out or "run")
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "model.npz")
    report.dump(out / "train_report.jsonl")
    np.savez(out / "predictions.npz", task=np.array(ds.task), members=pred.members, y=y,
             target_variance=np.array(var if var is not None else np.nan))
    (out / "metrics.jsonl").write_text(rep.to_json() + "\n")
    print(rep.to_json())
    return 0


def cmd_grid(args) -> int:
    cfg = load_config(args)
    if not cfg.axes:
        cfg.axes = harness.default_grid_axes()
    records, aggs = harness.run_grid(cfg, args.workers)
    paths = _emit(records, args, "grid")
    agg_path = harness.write_aggregates(aggs, paths["records"].with_name(paths["records"].stem + ".aggregate.csv"))
    print(f"aggregate: {agg_path}")
    return 0


def cmd_axis_sweep(args) -> int:
    cfg = harness.axis_sweep_config(load_config(args), args.axis,
                                    [float(v) if args.axis == "sigma_init" else int(v) for v in args.values.split(",")]
                                    if args.values else None)
    records, aggs = harness.run_grid(cfg, args.workers)
    paths = _emit(records, args, f"sweep_{args.axis}")
    harness.write_aggregates(aggs, paths["records"].with_name(paths["records"].stem + ".aggregate.csv"))
    return 0


def cmd_gap(args) -> int:
    cfg = load_config(args)
    if args.trace_every:
        cfg.trace_every = args.trace_every
    records = harness.run_gap_experiment(cfg, args.workers)
    _emit(records, args, "gap")
    print(json.dumps({"end_of_training_kl": harness.gap_summary(records)}))
    return 0


def cmd_hpo(args) -> int:
    cfg = load_config(args)
    best, trials = harness.run_hpo(cfg, budget=args.budget, seed=args.hpo_seed, workers=args.workers)
    out = _out_path(args, "hpo")
    out = out.with_suffix(".jsonl")
    with open(out, "w") as fh:
        for t in trials:
            fh.write(json.dumps(t) + "\n")
    print(json.dumps({"best": best, "trial_log": str(out)}))
    return 0


def cmd_expressivity(args) -> int:
    failed = 0
    for verdict in expressivity.check_trials(args.trials, args.check_seed, args.rank):
        failed += not verdict["ok"]
        print(json.dumps(verdict))
    print(json.dumps({"summary": True, "trials": args.trials, "failed": failed}))
    return 1 if failed else 0


def cmd_metrics(args) -> int:
    if not args.data:
        raise harness.ConfigError("metrics needs --data <predictions.npz>")
    with np.load(args.data, allow_pickle=False) as z:
        task = str(z["task"])
        var = float(z["target_variance"]) if "target_variance" in z else float("nan")
        rep = metrics.diversity_report(task, z["members"], z["y"], None if np.isnan(var) else var)
    line = rep.to_json()
    if args.out:
        Path(args.out).write_text(line + "\n")
    print(line)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lometab", description="Low-rank multiplicative implicit ensembles for tabular data.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--data", help="CSV file, predictions dump, or synthetic:<kind>[:n]")
        sp.add_argument("--schema", help="JSON schema sidecar for a CSV file")
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--seeds", help="comma list or range, e.g. 0,1,2 or 0-14")
        sp.add_argument("--out", help="output directory or file")
        sp.add_argument("--format", choices=("csv", "json-lines"), default="csv")
        sp.add_argument("--workers", type=int, default=1)
        return sp

    common(sub.add_parser("train", help="single run")).set_defaults(func=cmd_train)
    common(sub.add_parser("grid", help="(r, sigma_init) diversity grid")).set_defaults(func=cmd_grid)
    sp = common(sub.add_parser("axis-sweep", help="single-axis sweep over r or sigma_init"))
    sp.add_argument("--axis", choices=("r", "sigma_init"), required=True)
    sp.add_argument("--values", help="comma list overriding the default axis values")
    sp.set_defaults(func=cmd_axis_sweep)
    sp = common(sub.add_parser("gap", help="multiplicative vs additive KL traces"))
    sp.add_argument("--trace-every", type=int)
    sp.set_defaults(func=cmd_gap)
    sp = common(sub.add_parser("hpo", help="random search over the tuning space"))
    sp.add_argument("--budget", type=int, default=100)
    sp.add_argument("--hpo-seed", type=int, default=0)
    sp.set_defaults(func=cmd_hpo)
    sp = common(sub.add_parser("expressivity-check", help="randomized inclusion/strictness verdicts"))
    sp.add_argument("--trials", type=int, default=100)
    sp.add_argument("--rank", type=int, default=2)
    sp.add_argument("--check-seed", type=int, default=0)
    sp.set_defaults(func=cmd_expressivity)
    common(sub.add_parser("metrics", help="recompute metrics from a predictions dump")).set_defaults(func=cmd_metrics)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (harness.ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
