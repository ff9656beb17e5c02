"""Command-line entry point: register, evaluate, warp, sweep, selfcheck."""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .chebyshev import BasisConfig
from .engine import RegistrationConfig, run_seeds
from .io import (
    OUTPUT_DIR_ENV,
    load_manifest,
    read_field,
    read_labels,
    read_landmarks,
    read_volume,
    write_volume,
)
from .metrics import MetricsReport
from .network import load_checkpoint
from .pipeline import Case, evaluate, export_result, load_case, synthetic_case
from .sampler import Mask, Volume, dense_displacement, warp_dense

log = logging.getLogger("kanreg")

SWEEP_PARAMS = ("D", "lambda", "gamma", "k", "K", "kK")


def _add_run_options(p: argparse.ArgumentParser):
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("manifest", nargs="?", type=Path, help="YAML run manifest")
    src.add_argument("--synthetic", type=int, metavar="SIZE", help="use a synthetic SIZE^3 pair instead")
    p.add_argument("--seeds", type=str, help="comma-separated seeds (overrides the manifest)")
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--widths", type=str, help="e.g. 3-70-70-3")
    p.add_argument("--precision", choices=("float64", "float32"))
    p.add_argument("--workers", type=int, default=1, help="parallel seed runs")
    p.add_argument("-o", "--output-dir", type=Path)


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _setup(args) -> tuple[Case, RegistrationConfig, Path]:
    if args.synthetic is not None:
        case = synthetic_case(args.synthetic)
        cfg = RegistrationConfig()
        out = Path(os.environ.get(OUTPUT_DIR_ENV) or "output")
    else:
        manifest = load_manifest(args.manifest)
        case = load_case(manifest)
        cfg = manifest.config
        out = manifest.output_dir
    kw = {}
    if args.seeds:
        kw["seeds"] = _int_list(args.seeds)
    if args.iterations:
        kw["iterations"] = args.iterations
    if args.batch_size:
        kw["batch_size"] = args.batch_size
    if args.widths:
        kw["widths"] = tuple(int(w) for w in args.widths.split("-"))
    if args.precision:
        kw["precision"] = args.precision
    if args.output_dir:
        out = args.output_dir
    return case, replace(cfg, **kw), out


def cmd_register(args) -> int:
    case, cfg, out = _setup(args)
    out.mkdir(parents=True, exist_ok=True)
    report = MetricsReport(extra={"basis": cfg.basis.to_dict(), "case": case.name})

    def metrics(result):
        export_result(result, case, out)
        row = {k: v for k, v in result.final.items() if k != "iteration"}
        row.update(evaluate(case, result.model, result.field))
        row["duration"] = result.duration
        return row

    run = run_seeds(case.fixed, case.moving, case.mask, cfg, metrics_fn=metrics, workers=args.workers)
    for seed in run.seeds:
        if seed in run.metrics:
            report.add(seed, **run.metrics[seed])
        else:
            report.add(seed, error=run.errors[seed])
    report.write_csv(out / "metrics.csv")
    report.write_json(out / "metrics.json")
    for seed, err in run.errors.items():
        print(f"seed {seed} failed: {err}", file=sys.stderr)
    agg = run.aggregate()
    for key, stats in agg.items():
        print(f"{key}: {stats['mean']:.4f} ({stats['std']:.4f})")
    return 1 if run.errors else 0


def cmd_evaluate(args) -> int:
    fixed = read_volume(args.fixed)
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
        field = dense_displacement(model, fixed.dims)
    else:
        model = None
        field, _ = read_field(args.field)
    mask = Mask(read_volume(args.mask).data > 0) if args.mask else Mask.full(fixed.dims)
    case = Case(fixed, fixed, mask)
    if args.fixed_landmarks:
        if model is None:
            raise SystemExit("landmark evaluation needs --checkpoint")
        case.fixed_landmarks = read_landmarks(args.fixed_landmarks, fixed.spacing)
        case.moving_landmarks = read_landmarks(args.moving_landmarks, fixed.spacing)
    if args.fixed_labels:
        if model is None:
            raise SystemExit("label evaluation needs --checkpoint")
        case.fixed_labels, _ = read_labels(args.fixed_labels)
        case.moving_labels, _ = read_labels(args.moving_labels)
    row = evaluate(case, model, field)
    report = MetricsReport()
    report.add(args.seed, **row)
    out = args.output_dir or Path(os.environ.get(OUTPUT_DIR_ENV) or ".")
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "evaluation.csv")
    report.write_json(out / "evaluation.json")
    for key, value in row.items():
        print(f"{key}: {value:.4f}")
    return 0


def cmd_warp(args) -> int:
    model = load_checkpoint(args.checkpoint)
    vol = read_volume(args.volume)
    warped = warp_dense(vol, model, args.interp)
    write_volume(Volume(warped.data.astype(np.float64), warped.spacing), args.output)
    print(f"wrote {args.output}")
    return 0


def _sweep_configs(cfg: RegistrationConfig, param: str, values: list[str]):
    for raw in values:
        if param == "D":
            yield raw, replace(cfg, basis=BasisConfig.fixed(int(raw)))
        elif param == "lambda":
            yield raw, replace(cfg, weights=replace(cfg.weights, lam=float(raw)))
        elif param == "gamma":
            yield raw, replace(cfg, weights=replace(cfg.weights, gamma=float(raw)))
        elif param in ("k", "K"):
            b = cfg.basis
            if b.mode == "fixed":
                b = BasisConfig.randomized(12, 84)
            kw = {param: int(raw)}
            yield raw, replace(cfg, basis=replace(b, **kw))
        elif param == "kK":
            k, K = (int(v) for v in raw.split(":"))
            mode = cfg.basis.mode if cfg.basis.mode != "fixed" else "randomized"
            yield raw, replace(cfg, basis=BasisConfig(mode, k=k, K=K))


def cmd_sweep(args) -> int:
    case, cfg, out = _setup(args)
    out.mkdir(parents=True, exist_ok=True)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise SystemExit("--values is empty")
    rows, summary = [], []
    for raw, c in _sweep_configs(cfg, args.param, values):
        log.info("sweep %s=%s (%s)", args.param, raw, c.basis.label())

        def metrics(result):
            row = {k: v for k, v in result.final.items() if k != "iteration"}
            row.update(evaluate(case, result.model, result.field))
            row["duration"] = result.duration
            return row

        run = run_seeds(case.fixed, case.moving, case.mask, c, metrics_fn=metrics, workers=args.workers)
        for seed in run.seeds:
            rows.append({"param": args.param, "value": raw, "basis": c.basis.label(), "seed": seed,
                         **run.metrics.get(seed, {"error": run.errors.get(seed)})})
        agg = run.aggregate()
        srow = {"param": args.param, "value": raw, "basis": c.basis.label(), "seeds": len(run.metrics)}
        for key, stats in agg.items():
            srow[f"{key}_mean"] = stats["mean"]
            srow[f"{key}_std"] = stats["std"]
        summary.append(srow)
        print(", ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in srow.items()))
    _write_rows(rows, out / "sweep.csv")
    _write_rows(summary, out / "sweep_summary.csv")
    return 0


def _write_rows(rows, path):
    cols = []
    for r in rows:
        cols.extend(k for k in r if k not in cols)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        w.writerows(rows)


def cmd_selfcheck(args) -> int:
    from .selfcheck import run_all

    checks = run_all(args.seed)
    for c in checks:
        print(c)
    failed = [c for c in checks if not c.ok]
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kanreg", description="KAN-based deformable image registration")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("register", help="register a pair described by a manifest")
    _add_run_options(p)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("evaluate", help="score a model or field against references")
    p.add_argument("--fixed", type=Path, required=True, help="fixed image (defines the grid)")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", type=Path)
    src.add_argument("--field", type=Path)
    p.add_argument("--mask", type=Path)
    p.add_argument("--fixed-landmarks", type=Path)
    p.add_argument("--moving-landmarks", type=Path)
    p.add_argument("--fixed-labels", type=Path)
    p.add_argument("--moving-labels", type=Path)
    p.add_argument("--seed", type=int, default=0, help="seed label for the report row")
    p.add_argument("-o", "--output-dir", type=Path)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("warp", help="resample a volume with a trained model")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--volume", type=Path, required=True)
    p.add_argument("--output", type=Path, required=True)
    p.add_argument("--interp", choices=("trilinear", "nearest"), default="trilinear")
    p.set_defaults(func=cmd_warp)

    p = sub.add_parser("sweep", help="grid over one hyperparameter, one row per config and seed")
    _add_run_options(p)
    p.add_argument("--param", choices=SWEEP_PARAMS, required=True)
    p.add_argument("--values", required=True, help="comma-separated; kK takes k:K pairs")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("selfcheck", help="gradient checks and polynomial identities")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_selfcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command in ("evaluate",) and bool(args.fixed_landmarks) != bool(args.moving_landmarks):
        parser.error("--fixed-landmarks and --moving-landmarks go together")
    try:
        return args.func(args)
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
