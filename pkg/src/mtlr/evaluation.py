"""Metrics, cross-validation of the regularization multiplier, and the
Monte-Carlo sweep runner that produces per-method, per-split error tables.
"""

from __future__ import annotations

import concurrent.futures
import time
from dataclasses import dataclass, field

import numpy as np

from .baselines import _fit_armul_precomputed, fit_armul, fit_dp, fit_itl
from .config import ExperimentConfig, derive_seed
from .errors import MtlrError, TooFewSamples
from .solver_glm import GlmSpec, _fit_glm_common, fit_mtlr_glm
from .solver_linear import FitResult, Hyperparameters, _fit_linear_precomputed, _LinearProblem, fit_mtlr_linear
from .synthetic import SynthConfig, SynthProblem, generate_problem
from .task_data import MultiTaskDataset, TaskDataset, TaskGeometry, second_moment, seminorm

METRIC_COLUMNS = (
    "method",
    "sweep_value",
    "replicate",
    "mse_all",
    "mse_related",
    "mse_outlier",
    "insample_all",
    "error_rate",
    "runtime_seconds",
    "chosen_q",
    "converged",
)


@dataclass(frozen=True)
class MetricsRow:
    method: str
    sweep_value: float
    replicate: int
    mse_all: float = float("nan")
    mse_related: float = float("nan")
    mse_outlier: float = float("nan")
    insample_all: float = float("nan")
    error_rate: float = float("nan")
    runtime_seconds: float = 0.0
    chosen_q: float = float("nan")
    converged: bool = True

    def as_tuple(self) -> tuple:
        return tuple(getattr(self, c) for c in METRIC_COLUMNS)


@dataclass
class MetricsTable:
    """Rows keyed by (method, sweep_value, replicate), in emission order."""

    rows: list[MetricsRow] = field(default_factory=list)
    columns: tuple[str, ...] = METRIC_COLUMNS

    def filtered(self, method: str | None = None, sweep_value: float | None = None) -> "MetricsTable":
        rows = self.rows
        if method is not None:
            rows = [r for r in rows if r.method == method]
        if sweep_value is not None:
            rows = [r for r in rows if r.sweep_value == sweep_value]
        return MetricsTable(rows=list(rows))

    def mean(self, column: str, method: str, sweep_value: float | None = None) -> float:
        vals = [
            getattr(r, column)
            for r in self.rows
            if r.method == method and (sweep_value is None or r.sweep_value == sweep_value)
        ]
        return float(np.mean(vals)) if vals else float("nan")


def in_sample_mse(geom: TaskGeometry, theta_hat: np.ndarray, theta_star: np.ndarray) -> float:
    """Squared seminorm error in the task's empirical second moment."""
    return seminorm(geom, np.asarray(theta_hat) - np.asarray(theta_star)) ** 2


def population_mse(population_cov: np.ndarray, theta_hat: np.ndarray, theta_star: np.ndarray) -> float:
    diff = np.asarray(theta_hat, dtype=np.float64) - np.asarray(theta_star, dtype=np.float64)
    return float(max(0.0, diff @ np.asarray(population_cov) @ diff))


def classification_error(spec: GlmSpec, theta: np.ndarray, design: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of thresholded predictions disagreeing with the labels.

    Ties at probability exactly one half predict the positive class.
    """
    probs = spec.link_value(np.asarray(design) @ np.asarray(theta))
    preds = (probs >= 0.5).astype(np.float64)
    return float(np.mean(preds != np.asarray(labels, dtype=np.float64)))


def _fold_indices(ds: MultiTaskDataset, k: int, seed: int) -> list[list[np.ndarray]]:
    """Per-task index blocks: task j's samples shuffled by stream (seed, j)."""
    out = []
    for j, task in enumerate(ds.tasks):
        if task.n < k:
            raise TooFewSamples(f"task {task.task_id} has {task.n} samples; need at least k={k}")
        rng = np.random.default_rng([seed, j])
        perm = rng.permutation(task.n)
        out.append(np.array_split(perm, k))
    return out


def _subset_dataset(ds: MultiTaskDataset, keep: list[np.ndarray]) -> MultiTaskDataset:
    tasks = [
        TaskDataset(t.design[idx], t.responses[idx], task_id=t.task_id) for t, idx in zip(ds.tasks, keep)
    ]
    return MultiTaskDataset(tuple(tasks), model_kind=ds.model_kind)


def _fit_by_method(
    method: str,
    ds: MultiTaskDataset,
    q: float,
    spec: GlmSpec | None,
    problem: _LinearProblem | None = None,
    xi: float = 10.0,
) -> FitResult:
    if ds.model_kind == "linear":
        if method in ("mtlr", "armul"):
            hp = Hyperparameters.for_dataset(q, ds)
            if problem is None:
                problem = _LinearProblem.from_dataset(ds)
            if method == "mtlr":
                thetas, beta, hist, iters, conv = _fit_linear_precomputed(problem, hp)
            else:
                thetas, beta, hist, iters, conv = _fit_armul_precomputed(problem, hp)
            return FitResult(thetas, beta, float(hist[-1]), iters, conv, np.zeros(ds.m), hist)
        if method == "itl":
            return fit_itl(ds)
        if method == "dp":
            return fit_dp(ds)
    else:
        if spec is None:
            spec = GlmSpec.logistic(xi)
        if method == "mtlr":
            return fit_mtlr_glm(ds, spec, Hyperparameters.for_dataset(q, ds))
        if method == "armul":
            return fit_armul(ds, Hyperparameters.for_dataset(q, ds), spec)
        if method == "itl":
            return fit_itl(ds, spec)
        if method == "dp":
            return fit_dp(ds, spec)
    raise MtlrError(f"unknown method {method!r}")


def _heldout_score(ds_val_task: TaskDataset, theta: np.ndarray, kind: str, spec: GlmSpec | None) -> float:
    x, y = ds_val_task.design, ds_val_task.responses
    if kind == "linear":
        resid = y - x @ theta
        return float(resid @ resid) / ds_val_task.n
    z = x @ theta
    psi = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))
    return float(np.mean(psi - y * z))


def kfold_cv_q(
    ds: MultiTaskDataset,
    method: str,
    q_grid,
    k: int,
    seed: int,
    spec: GlmSpec | None = None,
    xi: float = 10.0,
) -> tuple[float, np.ndarray]:
    """Pick the multiplier by k-fold CV stratified within each task.

    The score for q is the mean (over folds, then tasks) held-out per-task
    prediction loss: squared error for linear tasks, negative log-likelihood
    for logistic ones. Ties break toward the smallest q.
    """
    q_grid = [float(q) for q in q_grid]
    if not q_grid:
        raise MtlrError("q_grid must be nonempty")
    folds = _fold_indices(ds, k, seed)
    fold_scores = np.zeros((len(q_grid), k))
    for f in range(k):
        keep = [np.sort(np.concatenate([blocks[g] for g in range(k) if g != f])) for blocks in folds]
        val = [np.sort(blocks[f]) for blocks in folds]
        train_ds = _subset_dataset(ds, keep)
        val_ds = _subset_dataset(ds, val)
        problem = _LinearProblem.from_dataset(train_ds) if ds.model_kind == "linear" else None
        for qi, q in enumerate(q_grid):
            fit = _fit_by_method(method, train_ds, q, spec, problem=problem, xi=xi)
            per_task = [
                _heldout_score(val_ds.tasks[j], fit.thetas[j], ds.model_kind, spec) for j in range(ds.m)
            ]
            fold_scores[qi, f] = float(np.mean(per_task))
    cv_scores = fold_scores.mean(axis=1)
    best = 0
    for qi in range(1, len(q_grid)):
        if cv_scores[qi] < cv_scores[best]:
            best = qi
    return q_grid[best], cv_scores


def _synth_config_for(exp: ExperimentConfig, sweep_value: float, problem_seed: int) -> SynthConfig:
    if exp.mode == "sweep_balancedness":
        return SynthConfig(
            n=exp.n,
            m=exp.m,
            d=exp.d,
            delta=exp.delta,
            eps=exp.eps,
            alpha=exp.alpha,
            r_out=exp.r_out,
            noise_sd=exp.noise_sd,
            seed=problem_seed,
            mode="spiked_balancedness",
            W=float(sweep_value),
        )
    overrides = {"sweep_delta": "delta", "sweep_eps": "eps", "sweep_alpha": "alpha"}.get(exp.mode)
    kwargs = dict(
        n=exp.n,
        m=exp.m,
        d=exp.d,
        delta=exp.delta,
        eps=exp.eps,
        alpha=exp.alpha,
        r_out=exp.r_out,
        noise_sd=exp.noise_sd,
        seed=problem_seed,
        mode="decay_sphere",
    )
    if overrides is not None:
        kwargs[overrides] = float(sweep_value)
    return SynthConfig(**kwargs)


def _split_means(values: np.ndarray, inlier_mask: np.ndarray) -> tuple[float, float, float]:
    all_mean = float(np.mean(values))
    related = float(np.mean(values[inlier_mask])) if np.any(inlier_mask) else float("nan")
    outlier = float(np.mean(values[~inlier_mask])) if np.any(~inlier_mask) else float("nan")
    return all_mean, related, outlier


def _evaluate_cell(exp: ExperimentConfig, sweep_index: int, sweep_value: float, rep: int) -> list[MetricsRow]:
    """All method rows for one (sweep value, replicate) cell."""
    problem_seed = derive_seed(exp.seed, sweep_index, rep)
    problem = generate_problem(_synth_config_for(exp, sweep_value, problem_seed))
    ds = problem.dataset
    geoms = [second_moment(t) for t in ds.tasks]
    lin_problem = _LinearProblem.from_dataset(ds)
    q_grid = exp.effective_q_grid()
    rows = []
    for method in exp.methods:
        t0 = time.perf_counter()
        chosen_q = float("nan")
        if method in ("mtlr", "armul"):
            cv_seed = derive_seed(exp.seed, sweep_index, rep, 7 + ("mtlr", "armul").index(method))
            chosen_q, _ = kfold_cv_q(ds, method, q_grid, exp.k_folds, cv_seed)
            fit = _fit_by_method(method, ds, chosen_q, None, problem=lin_problem)
        else:
            fit = _fit_by_method(method, ds, float("nan"), None, problem=lin_problem)
        elapsed = time.perf_counter() - t0
        pop = np.array(
            [
                population_mse(problem.population_covariances[j], fit.thetas[j], problem.true_thetas[j])
                for j in range(ds.m)
            ]
        )
        ins = np.array(
            [in_sample_mse(geoms[j], fit.thetas[j], problem.true_thetas[j]) for j in range(ds.m)]
        )
        mse_all, mse_rel, mse_out = _split_means(pop, problem.inlier_mask)
        rows.append(
            MetricsRow(
                method=method,
                sweep_value=float(sweep_value),
                replicate=rep,
                mse_all=mse_all,
                mse_related=mse_rel,
                mse_outlier=mse_out,
                insample_all=float(np.mean(ins)),
                error_rate=float("nan"),
                runtime_seconds=elapsed,
                chosen_q=chosen_q,
                converged=bool(fit.converged),
            )
        )
    return rows


def _cell_worker(args) -> tuple[tuple[int, int], list[MetricsRow]]:
    exp_dict, sweep_index, sweep_value, rep = args
    exp = ExperimentConfig.from_dict(exp_dict)
    return (sweep_index, rep), _evaluate_cell(exp, sweep_index, sweep_value, rep)


def run_sweep(exp: ExperimentConfig) -> MetricsTable:
    """Evaluate every method over the sweep grid with Monte-Carlo replicates.

    Rows are emitted in the order (method, sweep_value, replicate) and are
    bit-identical for a fixed config regardless of the worker count; solver
    non-convergence is recorded in the row, never raised.
    """
    if exp.mode not in ("sweep_delta", "sweep_eps", "sweep_alpha", "sweep_balancedness", "fit"):
        raise MtlrError(f"run_sweep does not handle mode {exp.mode!r}")
    grid = exp.effective_sweep_grid() if exp.mode != "fit" else (exp.delta,)
    cells = [(si, sv, rep) for si, sv in enumerate(grid) for rep in range(exp.reps)]
    results: dict[tuple[int, int], list[MetricsRow]] = {}
    if exp.workers > 1:
        exp_dict = exp.to_dict()
        jobs = [(exp_dict, si, sv, rep) for si, sv, rep in cells]
        with concurrent.futures.ProcessPoolExecutor(max_workers=exp.workers) as pool:
            for key, rows in pool.map(_cell_worker, jobs):
                results[key] = rows
    else:
        for si, sv, rep in cells:
            results[(si, rep)] = _evaluate_cell(exp, si, sv, rep)
    table = MetricsTable()
    for method in exp.methods:
        for si, sv in enumerate(grid):
            for rep in range(exp.reps):
                for row in results[(si, rep)]:
                    if row.method == method:
                        table.rows.append(row)
    return table


def run_har_protocol(exp: ExperimentConfig, ds: MultiTaskDataset) -> MetricsTable:
    """Per-subject logistic protocol: random per-task test splits, CV-tuned
    multipliers, classification error per method averaged over tasks.
    """
    if ds.model_kind != "logistic":
        raise MtlrError("the HAR protocol expects a logistic dataset")
    spec = GlmSpec.logistic(exp.xi)
    q_grid = exp.effective_q_grid()
    table = MetricsTable()
    rows_by_method: dict[str, list[MetricsRow]] = {mth: [] for mth in exp.methods}
    for split in range(exp.reps):
        split_seed = derive_seed(exp.seed, 1009, split)
        train_keep, test_keep = [], []
        for j, task in enumerate(ds.tasks):
            rng = np.random.default_rng([split_seed, j])
            perm = rng.permutation(task.n)
            n_test = max(1, int(round(exp.har_test_fraction * task.n)))
            test_keep.append(np.sort(perm[:n_test]))
            train_keep.append(np.sort(perm[n_test:]))
        train_ds = _subset_dataset(ds, train_keep)
        test_ds = _subset_dataset(ds, test_keep)
        if exp.har_standardize:
            train_ds, test_ds = _standardize_pair(train_ds, test_ds)
        for method in exp.methods:
            t0 = time.perf_counter()
            chosen_q = float("nan")
            if method in ("mtlr", "armul"):
                cv_seed = derive_seed(exp.seed, 1013, split, ("mtlr", "armul").index(method))
                chosen_q, _ = kfold_cv_q(train_ds, method, q_grid, exp.k_folds, cv_seed, spec=spec, xi=exp.xi)
                fit = _fit_by_method(method, train_ds, chosen_q, spec, xi=exp.xi)
            else:
                fit = _fit_by_method(method, train_ds, float("nan"), spec, xi=exp.xi)
            elapsed = time.perf_counter() - t0
            errors = [
                classification_error(spec, fit.thetas[j], test_ds.tasks[j].design, test_ds.tasks[j].responses)
                for j in range(ds.m)
            ]
            rows_by_method[method].append(
                MetricsRow(
                    method=method,
                    sweep_value=0.0,
                    replicate=split,
                    error_rate=float(np.mean(errors)),
                    runtime_seconds=elapsed,
                    chosen_q=chosen_q,
                    converged=bool(fit.converged),
                )
            )
    for method in exp.methods:
        table.rows.extend(rows_by_method[method])
    return table


def _standardize_pair(train_ds: MultiTaskDataset, test_ds: MultiTaskDataset):
    """Per-feature standardization with statistics from training rows only."""
    x_train = np.concatenate([t.design for t in train_ds.tasks], axis=0)
    mean = x_train.mean(axis=0)
    std = x_train.std(axis=0)
    std[std == 0] = 1.0

    def apply(ds):
        tasks = [
            TaskDataset((t.design - mean) / std, t.responses, task_id=t.task_id) for t in ds.tasks
        ]
        return MultiTaskDataset(tuple(tasks), model_kind=ds.model_kind)

    return apply(train_ds), apply(test_ds)
