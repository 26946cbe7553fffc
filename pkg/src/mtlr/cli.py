"""Command-line entry point: sweep / fit / cv / diagnose / har subcommands,
HAR-style data ingestion, and bit-exact result emission with a manifest.
"""

from __future__ import annotations

import argparse
import datetime
import json
import sys

import numpy as np

from . import __version__
from .config import ExperimentConfig, parse_config
from .errors import (
    IoError,
    MtlrError,
    NonNumericField,
    RowCountMismatch,
    UnknownSubjectId,
)
from .evaluation import MetricsTable, MetricsRow, kfold_cv_q, run_har_protocol, run_sweep
from .solver_glm import GlmSpec
from .spectral import balancedness_emp, comparability_nu
from .synthetic import generate_problem
from .task_data import MultiTaskDataset, TaskDataset, second_moment

__all__ = [
    "ExperimentConfig",
    "parse_config",
    "ingest_har_csv",
    "emit_results",
    "subcommand_diagnose",
    "main",
]


def _fmt(value) -> str:
    """17-significant-digit text for floats (round-trip exact)."""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        val = float(value)
        if np.isnan(val):
            return "nan"
        return format(val, ".17g")
    return str(value)


def emit_results(table: MetricsTable, path: str, format: str = "csv", manifest: dict | None = None) -> None:
    """Write the metrics table plus a sidecar manifest.

    Row order is preserved from the table; floats carry 17 significant
    digits so identical runs produce byte-identical files. The manifest
    records the full config, seed and tool version; its timestamp field is
    excluded from any determinism comparison by construction.
    """
    try:
        if format == "csv":
            lines = [",".join(table.columns)]
            for row in table.rows:
                lines.append(",".join(_fmt(v) for v in row.as_tuple()))
            payload = "\n".join(lines) + "\n"
        elif format == "json":
            records = [
                {col: _json_value(v) for col, v in zip(table.columns, row.as_tuple())} for row in table.rows
            ]
            payload = json.dumps({"columns": list(table.columns), "rows": records}, indent=2, sort_keys=True)
            payload += "\n"
        else:
            raise MtlrError(f"unknown output format {format!r}")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(payload)
        if manifest is not None:
            manifest_path = path + ".manifest.json"
            with open(manifest_path, "w", encoding="utf-8") as fh:
                json.dump(manifest, fh, indent=2, sort_keys=True)
                fh.write("\n")
    except OSError as exc:
        raise IoError(f"could not write results to {path}: {exc}") from exc


def _json_value(v):
    if isinstance(v, (bool, str)):
        return v
    if isinstance(v, (int, np.integer)):
        return int(v)
    val = float(v)
    return "nan" if np.isnan(val) else float(_fmt(val))


def build_manifest(exp: ExperimentConfig) -> dict:
    return {
        "config": exp.to_dict(),
        "seed": exp.seed,
        "version": __version__,
        "timestamp_excluded_from_hash": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }


def _zero_runtimes(table: MetricsTable) -> MetricsTable:
    rows = [
        MetricsRow(**{**{c: getattr(r, c) for c in table.columns}, "runtime_seconds": 0.0})
        for r in table.rows
    ]
    return MetricsTable(rows=rows)


def ingest_har_csv(
    features_path: str,
    labels_path: str,
    subjects_path: str,
    positive_label: int = 5,
) -> MultiTaskDataset:
    """Load the three plain-numeric HAR-layout files into per-subject tasks.

    Rows are grouped by subject id (one task per subject, ascending id);
    the activity code equal to ``positive_label`` maps to response 1 and
    every other activity to 0. No dimensionality reduction or scaling is
    applied here.
    """
    try:
        features = np.loadtxt(features_path, dtype=np.float64, ndmin=2)
        labels = np.loadtxt(labels_path, dtype=np.float64).ravel()
        subjects = np.loadtxt(subjects_path, dtype=np.float64).ravel()
    except ValueError as exc:
        raise NonNumericField(f"non-numeric field in input files: {exc}") from exc
    except OSError as exc:
        raise IoError(str(exc)) from exc
    if not (features.shape[0] == labels.shape[0] == subjects.shape[0]):
        raise RowCountMismatch(
            f"row counts disagree: features {features.shape[0]}, labels {labels.shape[0]}, "
            f"subjects {subjects.shape[0]}"
        )
    if not np.all(np.isfinite(subjects)) or np.any(subjects != np.round(subjects)) or np.any(subjects < 1):
        raise UnknownSubjectId("subject ids must be positive integers")
    subject_ids = np.unique(subjects.astype(np.int64))
    responses = (labels == positive_label).astype(np.float64)
    tasks = []
    for sid in subject_ids:
        mask = subjects.astype(np.int64) == sid
        tasks.append(TaskDataset(features[mask], responses[mask], task_id=int(sid)))
    return MultiTaskDataset(tuple(tasks), model_kind="logistic")


def subcommand_diagnose(ds: MultiTaskDataset, population_covariances: np.ndarray | None = None) -> dict:
    """Per-task spectral summary plus the balancedness diagnostic.

    When population covariances are available (synthetic mode) the per-task
    empirical-to-population comparability measure is reported as well.
    """
    geoms = [second_moment(t) for t in ds.tasks]
    report: dict = {
        "m": ds.m,
        "d": ds.d,
        "tasks": [],
        "balancedness_emp": balancedness_emp(geoms),
    }
    for j, g in enumerate(geoms):
        entry = {
            "task_id": ds.tasks[j].task_id,
            "n": ds.tasks[j].n,
            "rank": g.rank,
            "op_norm": g.op_norm,
        }
        if population_covariances is not None:
            entry["comparability_nu"] = comparability_nu(g, population_covariances[j])
        report["tasks"].append(entry)
    return report


def _print_diagnose(report: dict) -> None:
    print(f"tasks: {report['m']}  features: {report['d']}")
    print(f"balancedness_emp: {_fmt(report['balancedness_emp'])}")
    for entry in report["tasks"]:
        line = (
            f"  task {entry['task_id']}: n={entry['n']} rank={entry['rank']} "
            f"op_norm={_fmt(entry['op_norm'])}"
        )
        if "comparability_nu" in entry:
            line += f" nu={_fmt(entry['comparability_nu'])}"
        print(line)


def _add_common_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="key=value config file; flags override file values")
    sub.add_argument("--seed", type=int)
    sub.add_argument("--reps", type=int)
    sub.add_argument("--n", type=int)
    sub.add_argument("--m", type=int)
    sub.add_argument("--d", type=int)
    sub.add_argument("--delta", type=float)
    sub.add_argument("--eps", type=float)
    sub.add_argument("--alpha", type=float)
    sub.add_argument("--noise-sd", dest="noise_sd", type=float)
    sub.add_argument("--xi", type=float)
    sub.add_argument("--q", type=float)
    sub.add_argument("--q-grid", dest="q_grid")
    sub.add_argument("--sweep-grid", dest="sweep_grid")
    sub.add_argument("--k-folds", dest="k_folds", type=int)
    sub.add_argument("--methods")
    sub.add_argument("--workers", type=int)
    sub.add_argument("--out", dest="output_path")
    sub.add_argument("--format", choices=("csv", "json"))
    sub.add_argument(
        "--emit-runtime",
        action="store_true",
        default=None,
        help="emit measured wall times instead of deterministic zeros",
    )


def _collect_overrides(args: argparse.Namespace, mode: str | None) -> dict:
    keys = (
        "seed",
        "reps",
        "n",
        "m",
        "d",
        "delta",
        "eps",
        "alpha",
        "noise_sd",
        "xi",
        "q",
        "q_grid",
        "sweep_grid",
        "k_folds",
        "methods",
        "workers",
        "output_path",
        "format",
        "har_features",
        "har_labels",
        "har_subjects",
        "har_standardize",
        "har_positive_label",
        "har_test_fraction",
    )
    overrides = {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}
    if mode is not None:
        overrides["mode"] = mode
    if getattr(args, "emit_runtime", None):
        overrides["deterministic_output"] = False
    return overrides


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="mtlr", description="Matrix-weighted multi-task regression experiments"
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    p_sweep = subparsers.add_parser("sweep", help="run a Monte-Carlo sweep and emit a metrics table")
    p_sweep.add_argument(
        "--sweep", choices=("delta", "eps", "alpha", "balancedness"), default=None, help="swept quantity"
    )
    _add_common_flags(p_sweep)

    p_fit = subparsers.add_parser("fit", help="fit all methods on one synthetic draw")
    _add_common_flags(p_fit)

    p_cv = subparsers.add_parser("cv", help="cross-validate the multiplier on one synthetic draw")
    p_cv.add_argument("--method", choices=("mtlr", "armul"), default="mtlr")
    _add_common_flags(p_cv)

    p_diag = subparsers.add_parser("diagnose", help="spectral diagnostics for a dataset")
    p_diag.add_argument("--har-features", dest="har_features")
    p_diag.add_argument("--har-labels", dest="har_labels")
    p_diag.add_argument("--har-subjects", dest="har_subjects")
    p_diag.add_argument("--har-positive-label", dest="har_positive_label", type=int)
    p_diag.add_argument("--json-out", dest="json_out")
    _add_common_flags(p_diag)

    p_har = subparsers.add_parser("har", help="per-subject logistic protocol on locally supplied data")
    p_har.add_argument("--har-features", dest="har_features")
    p_har.add_argument("--har-labels", dest="har_labels")
    p_har.add_argument("--har-subjects", dest="har_subjects")
    p_har.add_argument("--har-positive-label", dest="har_positive_label", type=int)
    p_har.add_argument("--har-standardize", dest="har_standardize", action="store_true", default=None)
    p_har.add_argument("--har-test-fraction", dest="har_test_fraction", type=float)
    _add_common_flags(p_har)

    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except MtlrError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _dispatch(args: argparse.Namespace) -> int:
    command = args.command
    if command == "sweep":
        mode = f"sweep_{args.sweep}" if args.sweep else None
        exp = parse_config(args.config, _collect_overrides(args, mode))
        if not exp.mode.startswith("sweep_"):
            exp.mode = "sweep_delta"
        table = run_sweep(exp)
        _finish(exp, table)
        return 0
    if command == "fit":
        exp = parse_config(args.config, _collect_overrides(args, "fit"))
        exp.reps = max(1, exp.reps)
        table = run_sweep(exp)
        _finish(exp, table)
        return 0
    if command == "cv":
        exp = parse_config(args.config, _collect_overrides(args, "cv"))
        problem = generate_problem_from_exp(exp)
        q_best, scores = kfold_cv_q(
            problem.dataset, args.method, exp.effective_q_grid(), exp.k_folds, exp.seed
        )
        print(f"q_best: {_fmt(q_best)}")
        for q, s in zip(exp.effective_q_grid(), scores):
            print(f"  q={_fmt(q)} score={_fmt(s)}")
        return 0
    if command == "diagnose":
        exp = parse_config(args.config, _collect_overrides(args, "diagnose"))
        if exp.har_features:
            ds = ingest_har_csv(exp.har_features, exp.har_labels, exp.har_subjects, exp.har_positive_label)
            report = subcommand_diagnose(ds)
        else:
            problem = generate_problem_from_exp(exp)
            report = subcommand_diagnose(problem.dataset, problem.population_covariances)
        _print_diagnose(report)
        json_out = getattr(args, "json_out", None)
        if json_out:
            with open(json_out, "w", encoding="utf-8") as fh:
                json.dump(report, fh, indent=2, sort_keys=True)
                fh.write("\n")
        return 0
    if command == "har":
        exp = parse_config(args.config, _collect_overrides(args, "har"))
        if not (exp.har_features and exp.har_labels and exp.har_subjects):
            raise MtlrError("har mode needs --har-features, --har-labels and --har-subjects")
        ds = ingest_har_csv(exp.har_features, exp.har_labels, exp.har_subjects, exp.har_positive_label)
        table = run_har_protocol(exp, ds)
        _finish(exp, table)
        for method in exp.methods:
            print(f"{method}: mean error {_fmt(table.mean('error_rate', method))}")
        return 0
    raise MtlrError(f"unknown command {command!r}")


def generate_problem_from_exp(exp: ExperimentConfig):
    from .synthetic import SynthConfig

    mode = "spiked_balancedness" if exp.mode == "sweep_balancedness" else "decay_sphere"
    return generate_problem(
        SynthConfig(
            n=exp.n,
            m=exp.m,
            d=exp.d,
            delta=exp.delta,
            eps=exp.eps,
            alpha=exp.alpha,
            r_out=exp.r_out,
            noise_sd=exp.noise_sd,
            seed=exp.seed,
            mode=mode,
            W=exp.W,
        )
    )


def _finish(exp: ExperimentConfig, table: MetricsTable) -> None:
    out_table = _zero_runtimes(table) if exp.deterministic_output else table
    emit_results(out_table, exp.output_path, exp.format, manifest=build_manifest(exp))
    print(f"wrote {exp.output_path} ({len(table.rows)} rows)")


if __name__ == "__main__":
    raise SystemExit(main())
