"""Comparison methods: independent-task learning, data pooling, and the
isotropic-penalty multi-task estimator (ARMUL-style objective).
"""

from __future__ import annotations

import numpy as np

from . import _kernels
from .errors import MtlrError
from .solver_glm import GlmSpec, _fit_glm_common, _GlmTask
from .solver_linear import FitResult, Hyperparameters, _LinearProblem
from .task_data import MultiTaskDataset, TaskDataset, validate_dataset


def _deviation_seminorms(problem: _LinearProblem, thetas, beta) -> np.ndarray:
    diffs = np.ascontiguousarray(thetas - beta[np.newaxis, :])
    return np.sqrt(_kernels.batch_seminorm_sq(problem.sigmas, diffs))


def _glm_ball_mle(task: TaskDataset, xi: float) -> np.ndarray:
    gt = _GlmTask(task, penalty="euclidean")
    zero = np.zeros(task.d)
    theta, _, _, _ = gt.step(zero, 0.0, 1e-10, xi, zero)
    return theta


def fit_itl(ds: MultiTaskDataset, spec: GlmSpec | None = None) -> FitResult:
    """Independent per-task estimation; the center is reported only."""
    validate_dataset(ds)
    if ds.model_kind == "linear":
        problem = _LinearProblem.from_dataset(ds)
        thetas = problem.ols.copy()
        beta = thetas.mean(axis=0)
        objective = float(np.sum(problem.f_ols))
        devs = _deviation_seminorms(problem, thetas, beta)
    else:
        if spec is None:
            spec = GlmSpec.logistic()
        thetas = np.stack([_glm_ball_mle(t, spec.xi) for t in ds.tasks])
        beta = thetas.mean(axis=0)
        tasks = [_GlmTask(t, "euclidean") for t in ds.tasks]
        objective = float(sum(gt.loss(thetas[j]) for j, gt in enumerate(tasks)))
        devs = np.array(
            [
                float(np.sqrt(max(0.0, (thetas[j] - beta) @ tasks[j].sigma @ (thetas[j] - beta))))
                for j in range(ds.m)
            ]
        )
    return FitResult(
        thetas=thetas,
        beta=beta,
        objective=objective,
        iterations=1,
        converged=True,
        per_task_deviation_seminorm=devs,
        objective_history=np.array([objective]),
    )


def fit_dp(ds: MultiTaskDataset, spec: GlmSpec | None = None) -> FitResult:
    """Data pooling: one parameter fit on the concatenated samples."""
    validate_dataset(ds)
    x_all = np.concatenate([t.design for t in ds.tasks], axis=0)
    y_all = np.concatenate([t.responses for t in ds.tasks])
    pooled_task = TaskDataset(x_all, y_all, task_id=-1)
    if ds.model_kind == "linear":
        pooled_problem = _LinearProblem([x_all], [y_all])
        pooled = pooled_problem.ols[0]
    else:
        if spec is None:
            spec = GlmSpec.logistic()
        pooled = _glm_ball_mle(pooled_task, spec.xi)
    thetas = np.tile(pooled, (ds.m, 1))
    if ds.model_kind == "linear":
        problem = _LinearProblem.from_dataset(ds)
        objective = float(
            sum(
                0.5 * float((problem.ys[j] - problem.xs[j] @ pooled) @ (problem.ys[j] - problem.xs[j] @ pooled))
                / problem.n_js[j]
                for j in range(ds.m)
            )
        )
    else:
        tasks = [_GlmTask(t, "euclidean") for t in ds.tasks]
        objective = float(sum(gt.loss(pooled) for gt in tasks))
    return FitResult(
        thetas=thetas,
        beta=pooled.copy(),
        objective=objective,
        iterations=1,
        converged=True,
        per_task_deviation_seminorm=np.zeros(ds.m),
        objective_history=np.array([objective]),
    )


def _fit_armul_precomputed(problem: _LinearProblem, hp: Hyperparameters):
    """Isotropic-penalty fit via L-BFGS on the center-reduced objective."""
    lambdas = np.ascontiguousarray(hp.lambdas)
    weights = np.ascontiguousarray(hp.weights)
    beta0 = np.average(problem.ols, axis=0, weights=weights * problem.n_js)
    beta, hist, iters, converged = _kernels.armul_center_lbfgs(
        problem.eigvals,
        problem.eigvecs,
        problem.b_eig,
        problem.c,
        lambdas,
        weights,
        np.ascontiguousarray(beta0),
        float(hp.rel_obj_tol),
        int(hp.max_iters),
    )
    thetas = np.empty((problem.m, problem.d))
    _kernels.armul_block_solve(problem.eigvals, problem.eigvecs, problem.b_eig, lambdas, beta, thetas)
    for j in range(problem.m):
        if lambdas[j] <= 0:
            thetas[j] = problem.ols[j]
    return thetas, beta, hist[: iters + 1].copy(), iters, converged


def armul_objective(ds: MultiTaskDataset, hp: Hyperparameters, thetas, beta) -> float:
    """Exact isotropic-penalty objective (Euclidean deviation norms)."""
    thetas = np.asarray(thetas, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    total = 0.0
    for j, task in enumerate(ds.tasks):
        resid = task.responses - task.design @ thetas[j]
        total += hp.weights[j] * (
            0.5 * float(resid @ resid) / task.n + hp.lambdas[j] * float(np.linalg.norm(thetas[j] - beta))
        )
    return total


def fit_armul(ds: MultiTaskDataset, hp: Hyperparameters, spec: GlmSpec | None = None) -> FitResult:
    """Multi-task fit with the isotropic Euclidean deviation penalty.

    Same schedule and tolerances as the matrix-weighted fit; the objective
    field holds this estimator's own (Euclidean-penalty) objective.
    """
    validate_dataset(ds)
    if len(hp.lambdas) != ds.m or len(hp.weights) != ds.m:
        raise MtlrError("hyperparameter arrays must have one entry per task")
    if ds.model_kind == "logistic":
        if spec is None:
            spec = GlmSpec.logistic()
        result = _fit_glm_common(ds, spec, hp, penalty="euclidean")
        return result
    problem = _LinearProblem.from_dataset(ds)
    thetas, beta, history, iters, converged = _fit_armul_precomputed(problem, hp)
    objective = float(
        sum(
            hp.weights[j]
            * (
                0.5
                * float(
                    (problem.ys[j] - problem.xs[j] @ thetas[j]) @ (problem.ys[j] - problem.xs[j] @ thetas[j])
                )
                / problem.n_js[j]
                + hp.lambdas[j] * float(np.linalg.norm(thetas[j] - beta))
            )
            for j in range(ds.m)
        )
    )
    return FitResult(
        thetas=thetas,
        beta=beta,
        objective=objective,
        iterations=iters,
        converged=converged,
        per_task_deviation_seminorm=_deviation_seminorms(problem, thetas, beta),
        objective_history=history,
    )
