"""Command line front end.

Exit codes: 0 success, 1 usage problems, 2 malformed inputs or config,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

from .errors import NumericalFailure, SchemaError
from .estimator import write_estimates_csv
from .nsga2 import NsgaOptions, cnn_search_problem, evolve, write_front_csv
from .pipeline import (
    AGING_BOUNDS,
    PipelineConfig,
    SortReport,
    emit,
    estimate_with_retry,
    ingest,
    load_config,
    regressor_target,
    run_sort,
    synth_cohort,
    train_regressor,
    write_ocv_csv,
)
from .regressor import save_model
from .signals import OcvCurve, extract_feature_points, ic_segment, incremental_capacity


def _seed(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError("seed must be non-negative")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return value


def _config_for(args) -> PipelineConfig:
    config = load_config(args.config) if args.config else PipelineConfig()
    if getattr(args, "workers", None):
        config = replace(config, workers=args.workers)
    return config


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(args) -> int:
    config = _config_for(args)
    spec = config.cohort
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    cells = synth_cohort(spec)
    out = _out_dir(args)
    path = out / "cohort.csv"
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(
            ["cell_id", "module", "q_pe_mAh", "q_ne_mAh", "q_offset_mAh", "capacity_mAh"]
        )
        for cell in cells:
            writer.writerow(
                [
                    cell.index,
                    cell.module,
                    repr(float(cell.truth.q_pe)),
                    repr(float(cell.truth.q_ne)),
                    repr(float(cell.truth.q_offset)),
                    repr(float(cell.capacity_mAh)),
                ]
            )
    if args.curves:
        for cell in cells:
            write_ocv_csv(out / f"pseudo_{cell.index:04d}.csv", cell.pseudo_ocv)
            write_ocv_csv(out / f"charge1c_{cell.index:04d}.csv", cell.charge_1c)
    print(f"wrote {path} ({len(cells)} cells, seed {spec.seed})")
    return 0


def cmd_train(args) -> int:
    config = _config_for(args)
    if args.seed is not None:
        config = replace(config, training_seed=args.seed)
    fitted = train_regressor(config)
    out = _out_dir(args)
    model_path = out / "model.json"
    save_model(model_path, fitted.network, fitted.scaler)
    print(
        f"wrote {model_path} (val RMSE {fitted.val_rmse_mAh:.3f} mAh, "
        f"best epoch {fitted.best_epoch}/{fitted.epochs})"
    )
    return 0


def cmd_tune(args) -> int:
    config = _config_for(args)
    spec = replace(config.training, n_cells=config.tune_cells)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    cells = synth_cohort(spec)
    inputs = []
    for cell in cells:
        ic = incremental_capacity(cell.charge_1c)
        inputs.append(ic_segment(ic, 3.5, 4.0))
    targets = [regressor_target(cell) for cell in cells]
    problem = cnn_search_problem(inputs, targets)
    options = NsgaOptions(
        population=config.tune_population,
        generations=config.tune_generations,
        seed=args.seed if args.seed is not None else 0,
    )
    result = evolve(problem, options)
    out = _out_dir(args)
    path = out / "front.csv"
    write_front_csv(path, result, problem)
    print(f"wrote {path} ({len(result.front)} non-dominated configs)")
    return 0


def cmd_estimate(args) -> int:
    config = _config_for(args)
    parsed = ingest(args.input)
    if not isinstance(parsed, OcvCurve):
        raise SchemaError(
            f"{args.input}: estimation needs an OCV curve file "
            "(columns charge_mAh,voltage_V)"
        )
    increments = extract_feature_points(parsed).dq_fp_mAh
    options = config.estimator
    if args.seed is not None:
        options = replace(options, seed=args.seed)
    result, attempts = estimate_with_retry(
        increments, options, config.estimator_retries, bounds=AGING_BOUNDS
    )
    if result is None:
        raise NumericalFailure(
            f"estimator failed to leave the infeasible plateau in {attempts} runs"
        )
    out = _out_dir(args)
    path = out / "eaps.csv"
    write_estimates_csv(path, [(Path(args.input).stem, result)])
    print(
        f"q_pe {result.eaps.q_pe:.2f} mAh, q_ne {result.eaps.q_ne:.2f} mAh, "
        f"q_offset {result.eaps.q_offset:.2f} mAh, "
        f"capacity {result.capacity_mAh:.2f} mAh, loss {result.loss:.3e} V^2"
    )
    print(f"wrote {path}")
    return 0


def cmd_sort(args) -> int:
    config = _config_for(args)
    if args.seed is not None:
        config = replace(config, cohort=replace(config.cohort, seed=args.seed))
    report = run_sort(config)
    paths = emit(report, _out_dir(args))
    print(
        f"sorted {report.n_cells} cells into {report.k} clusters "
        f"(silhouette {report.avg_silhouette:.3f}, "
        f"{report.n_quarantined} quarantined)"
    )
    for method in ("adap", "kmc", "fcmc", "ahc"):
        entry = report.avg_sd[method]
        print(
            f"  {method:5s} sd: qcell {entry['sd_qcell_mAh']:.2f}  "
            f"qpe {entry['sd_qpe_mAh']:.2f}  qne {entry['sd_qne_mAh']:.2f}  "
            f"qoffset {entry['sd_qoffset_mAh']:.2f}"
        )
    for path in paths:
        print(f"wrote {path}")
    return 0


def cmd_report(args) -> int:
    try:
        text = Path(args.report).read_text()
    except OSError as err:
        raise SchemaError(f"cannot read report {args.report}: {err}") from err
    report = SortReport.from_json(text)
    paths = emit(report, _out_dir(args))
    for path in paths:
        print(f"wrote {path}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="batsort",
        description="Electrode-level battery triage: simulate, estimate, sort.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--seed", type=_seed, default=None, help="override the stage seed")
    common.add_argument("--out", default="batsort-out", help="output directory")
    common.add_argument("--workers", type=_positive, default=None, help="worker count")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic cohort")
    p.add_argument("--curves", action="store_true", help="also write per-cell curve files")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train the increment regressor")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("tune", parents=[common], help="architecture search for the regressor")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("estimate", parents=[common], help="estimate aging parameters for one curve")
    p.add_argument("input", help="OCV curve CSV (charge_mAh,voltage_V)")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("sort", parents=[common], help="full sorting run with report")
    p.set_defaults(func=cmd_sort)

    p = sub.add_parser("report", parents=[common], help="re-emit artifacts from a stored report")
    p.add_argument("report", help="path to a report.json")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    if not hasattr(args, "func"):
        parser.print_help()
        return 1
    try:
        return args.func(args)
    except SchemaError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except NumericalFailure as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
