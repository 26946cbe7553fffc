"""Matrix-weighted multi-task fitting for generalized linear models.

Only the logistic family ships built in; the spec object is the extension
point for other exponential families. All parameters live in the Euclidean
ball of radius ``xi``, matching the bounded-domain formulation.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import _kernels
from .errors import MtlrError
from .solver_linear import FitResult, Hyperparameters
from .task_data import MultiTaskDataset, TaskDataset, second_moment, validate_dataset

THETA_STEP_TOL = 1e-10
THETA_STEP_MAX_ITER = 4000


@dataclass(frozen=True)
class GlmSpec:
    """Cumulant function, link, curvature and the ball radius.

    ``curvature_bounds`` holds (alpha_l, alpha_u), the min and max of the
    link derivative over the realized predictor interval; they are
    diagnostics, never assumptions the solver relies on.
    """

    family: str = "logistic"
    xi: float = 10.0
    curvature_bounds: tuple[float, float] | None = None
    psi: Callable | None = None
    link: Callable | None = None
    curvature: Callable | None = None

    def __post_init__(self):
        if self.xi <= 0:
            raise MtlrError("xi must be positive")
        if self.family != "logistic" and (self.psi is None or self.link is None or self.curvature is None):
            raise MtlrError("non-logistic families must supply psi, link and curvature callables")

    @classmethod
    def logistic(cls, xi: float = 10.0) -> "GlmSpec":
        return cls(family="logistic", xi=xi)

    def psi_value(self, z):
        if self.family == "logistic":
            z = np.asarray(z, dtype=np.float64)
            return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))
        return self.psi(z)

    def link_value(self, z):
        if self.family == "logistic":
            z = np.asarray(z, dtype=np.float64)
            out = np.empty_like(z)
            pos = z >= 0
            out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
            ez = np.exp(z[~pos])
            out[~pos] = ez / (1.0 + ez)
            return out
        return self.link(z)

    def curvature_value(self, z):
        if self.family == "logistic":
            mz = self.link_value(z)
            return mz * (1.0 - mz)
        return self.curvature(z)

    def with_curvature_for(self, ds: MultiTaskDataset) -> "GlmSpec":
        """Compute (alpha_l, alpha_u) over the realized predictor interval.

        With every parameter in the ball of radius xi, predictors lie in
        [-M, M] with M = xi * max_i ||x_i||; the bounds are the extremes of
        the curvature there.
        """
        big = 0.0
        for t in ds.tasks:
            norms = np.linalg.norm(t.design, axis=1)
            big = max(big, float(norms.max()) if norms.size else 0.0)
        big *= self.xi
        zs = np.linspace(-big, big, 4097)
        curv = np.asarray(self.curvature_value(zs), dtype=np.float64)
        return replace(self, curvature_bounds=(float(curv.min()), float(curv.max())))

    @property
    def alpha_u(self) -> float:
        if self.curvature_bounds is not None:
            return self.curvature_bounds[1]
        return 0.25 if self.family == "logistic" else float("nan")


def glm_loss_grad(task: TaskDataset, spec: GlmSpec, theta: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its gradient for one task."""
    theta = np.asarray(theta, dtype=np.float64)
    if not np.all(np.isfinite(theta)):
        raise MtlrError("theta must be finite")
    if spec.family == "logistic":
        x = np.ascontiguousarray(task.design)
        xt = np.ascontiguousarray(task.design.T)
        grad = np.empty(task.d)
        val = _kernels.logistic_value_grad(x, xt, task.responses, theta, grad)
        return float(val), grad
    z = task.design @ theta
    val = float(np.mean(spec.psi_value(z) - task.responses * z))
    grad = task.design.T @ (spec.link_value(z) - task.responses) / task.n
    return val, grad


class _GlmTask:
    """Contiguous per-task arrays plus penalty geometry for the kernels."""

    def __init__(self, task: TaskDataset, penalty: str):
        self.x = np.ascontiguousarray(task.design, dtype=np.float64)
        self.xt = np.ascontiguousarray(self.x.T)
        self.y = np.ascontiguousarray(task.responses, dtype=np.float64)
        self.n = task.n
        geom = second_moment(task)
        self.geom = geom
        self.sigma = np.ascontiguousarray(geom.sigma)
        self.sig_opn = geom.op_norm
        d = task.d
        if penalty == "matrix":
            self.pen = self.sigma
            self.pen_opn = self.sig_opn
        else:
            self.pen = np.ascontiguousarray(np.eye(d))
            self.pen_opn = 1.0

    def loss(self, theta: np.ndarray) -> float:
        grad = np.empty(theta.shape[0])
        return float(_kernels.logistic_value_grad(self.x, self.xt, self.y, theta, grad))

    def loss_grad(self, theta: np.ndarray) -> tuple[float, np.ndarray]:
        grad = np.empty(theta.shape[0])
        val = _kernels.logistic_value_grad(self.x, self.xt, self.y, theta, grad)
        return float(val), grad

    def pen_seminorm(self, v: np.ndarray) -> float:
        return float(np.sqrt(max(0.0, float(v @ self.pen @ v))))

    def step(self, beta, lam, eps, xi, theta0):
        theta, iters, conv, kkt = _kernels.glm_theta_step(
            self.x,
            self.xt,
            self.y,
            self.pen,
            self.pen_opn,
            self.sig_opn,
            np.ascontiguousarray(beta),
            float(lam),
            float(eps),
            float(xi),
            np.ascontiguousarray(theta0),
            THETA_STEP_MAX_ITER,
            THETA_STEP_TOL,
        )
        return theta, int(iters), bool(conv), float(kkt)


def _project_ball(v: np.ndarray, xi: float) -> np.ndarray:
    nrm = float(np.linalg.norm(v))
    if nrm > xi and nrm > 0:
        return v * (xi / nrm)
    return v.copy()


def theta_step_glm(
    task: TaskDataset,
    spec: GlmSpec,
    geom,
    beta: np.ndarray,
    lam: float,
    hp: Hyperparameters,
    theta0: np.ndarray | None = None,
    return_info: bool = False,
):
    """Ball-constrained block solve for one GLM task at a fixed center.

    Runs projected spectral gradient on the smoothed objective and snaps to
    the center when the center attains an exact objective at least as good
    (the invariant-region case). With ``return_info`` the KKT residual of
    the smoothed problem and iteration counts are returned as well.
    """
    if spec.family != "logistic":
        raise MtlrError("only the logistic family has a built-in block solver")
    beta = np.asarray(beta, dtype=np.float64)
    xi = spec.xi if spec.xi is not None else hp.xi
    if np.linalg.norm(beta) > xi * (1.0 + 1e-9):
        raise MtlrError("center must lie in the feasible ball")
    gt = _GlmTask(task, penalty="matrix")
    start = beta if theta0 is None else np.asarray(theta0, dtype=np.float64)
    theta, iters, conv, kkt = gt.step(beta, lam, hp.smoothing_floor, xi, start)
    if return_info:
        return theta, {"iterations": iters, "converged": conv, "kkt_residual": kkt}
    return theta


def _glm_exact_objective(tasks: list[_GlmTask], hp: Hyperparameters, thetas, beta) -> float:
    total = 0.0
    for j, gt in enumerate(tasks):
        total += hp.weights[j] * (gt.loss(thetas[j]) + hp.lambdas[j] * gt.pen_seminorm(thetas[j] - beta))
    return total


def _penalty_value(tasks, hp, thetas, beta) -> float:
    total = 0.0
    for j, gt in enumerate(tasks):
        total += hp.weights[j] * hp.lambdas[j] * gt.pen_seminorm(thetas[j] - beta)
    return total


def _weiszfeld_matrix(tasks, hp, thetas, beta0):
    m = len(tasks)
    d = thetas.shape[1]
    coefs = hp.weights * hp.lambdas
    active = [j for j in range(m) if coefs[j] > 0 and tasks[j].geom.rank > 0]
    if not active:
        return beta0.copy()
    avg = np.mean([tasks[j].sigma for j in active], axis=0)
    w, q = np.linalg.eigh(avg)
    keep = w > 1e-12 * w[-1]
    basis = np.ascontiguousarray(q[:, keep])
    r = basis.shape[1]
    sig_u = np.empty((m, r, r))
    t_u = np.empty((m, r))
    a = np.empty(m)
    for j in range(m):
        st = tasks[j].sigma @ thetas[j]
        sig_u[j] = basis.T @ tasks[j].sigma @ basis
        t_u[j] = basis.T @ st
        a[j] = float(thetas[j] @ st)
    u0 = np.ascontiguousarray(basis.T @ beta0)
    u, _ = _kernels.weiszfeld_center(
        sig_u, t_u, a, np.ascontiguousarray(coefs), float(hp.smoothing_floor), u0, 1e-12, 500
    )
    return basis @ u


def _weiszfeld_euclidean(tasks, hp, thetas, beta0, eps):
    coefs = hp.weights * hp.lambdas
    if not np.any(coefs > 0):
        return beta0.copy()
    beta = beta0.copy()
    for _ in range(500):
        dist = np.sqrt(np.sum((thetas - beta) ** 2, axis=1) + eps * eps)
        cj = np.where(coefs > 0, coefs / np.maximum(dist, 1e-300), 0.0)
        total = cj.sum()
        if total <= 0:
            break
        beta_new = (cj[:, None] * thetas).sum(axis=0) / total
        delta = np.abs(beta_new - beta).max()
        beta = beta_new
        if delta <= 1e-12 * max(1.0, np.abs(beta).max()):
            break
    return beta


def _envelope_gradient(tasks, hp, thetas, beta, eps):
    """Gradient of the center-reduced objective at freshly solved blocks."""
    d = beta.shape[0]
    grad = np.zeros(d)
    snap_tol = max(100.0 * eps, 1e-10)
    for j, gt in enumerate(tasks):
        dev = beta - thetas[j]
        s = gt.pen_seminorm(dev)
        if s > snap_tol:
            grad += hp.weights[j] * hp.lambdas[j] * (gt.pen @ dev) / s
        else:
            _, gf = gt.loss_grad(beta)
            grad += hp.weights[j] * gf
    return grad


def _fit_glm_common(
    ds: MultiTaskDataset, spec: GlmSpec, hp: Hyperparameters, penalty: str, center_refine: bool = True
) -> FitResult:
    validate_dataset(ds)
    if ds.model_kind != "logistic":
        raise MtlrError("GLM fitting requires a logistic dataset")
    if spec.family != "logistic":
        raise MtlrError("only the logistic family has a built-in solver")
    xi = spec.xi
    eps = hp.smoothing_floor
    m, d = ds.m, ds.d
    tasks = [_GlmTask(t, penalty) for t in ds.tasks]

    # per-task ball-constrained MLEs seed both blocks and center
    thetas = np.empty((m, d))
    zero = np.zeros(d)
    for j, gt in enumerate(tasks):
        theta, _, _, _ = gt.step(zero, 0.0, eps, xi, zero)
        thetas[j] = theta
    beta = _project_ball(np.average(thetas, axis=0, weights=hp.weights * ds.n_js), xi)
    for j, gt in enumerate(tasks):
        if hp.lambdas[j] > 0:
            theta, _, _, _ = gt.step(beta, hp.lambdas[j], eps, xi, thetas[j])
            if gt.loss(theta) + hp.lambdas[j] * gt.pen_seminorm(theta - beta) <= gt.loss(
                thetas[j]
            ) + hp.lambdas[j] * gt.pen_seminorm(thetas[j] - beta):
                thetas[j] = theta

    obj = _glm_exact_objective(tasks, hp, thetas, beta)
    history = [obj]
    converged = False
    iters = 0
    refine_step = 1.0
    max_outer = int(hp.max_iters)
    for outer in range(max_outer):
        iters = outer + 1
        # block pass, guarded so the exact objective never increases
        for j, gt in enumerate(tasks):
            if hp.lambdas[j] <= 0:
                continue
            theta_new, _, _, _ = gt.step(beta, hp.lambdas[j], eps, xi, thetas[j])
            old_val = gt.loss(thetas[j]) + hp.lambdas[j] * gt.pen_seminorm(thetas[j] - beta)
            new_val = gt.loss(theta_new) + hp.lambdas[j] * gt.pen_seminorm(theta_new - beta)
            if new_val <= old_val:
                thetas[j] = theta_new
        # center pass (penalty Weiszfeld), guarded the same way
        if np.any(hp.weights * hp.lambdas > 0):
            if penalty == "matrix":
                beta_w = _weiszfeld_matrix(tasks, hp, thetas, beta)
            else:
                beta_w = _weiszfeld_euclidean(tasks, hp, thetas, beta, eps)
            beta_w = _project_ball(beta_w, xi)
            if _penalty_value(tasks, hp, thetas, beta_w) <= _penalty_value(tasks, hp, thetas, beta):
                beta = beta_w
        new_obj = _glm_exact_objective(tasks, hp, thetas, beta)
        if obj - new_obj > hp.rel_obj_tol * (1.0 + abs(obj)):
            history.append(new_obj)
            obj = new_obj
            continue
        # alternation stalled: try a descent step on the center-reduced
        # objective (blocks re-solved at each trial center)
        improved = False
        if center_refine and np.any(hp.weights * hp.lambdas > 0):
            grad = _envelope_gradient(tasks, hp, thetas, beta, eps)
            gn2 = float(grad @ grad)
            if gn2 > 0:
                step = refine_step
                for _ in range(40):
                    beta_try = _project_ball(beta - step * grad, xi)
                    thetas_try = np.empty_like(thetas)
                    for j, gt in enumerate(tasks):
                        if hp.lambdas[j] <= 0:
                            thetas_try[j] = thetas[j]
                            continue
                        t_new, _, _, _ = gt.step(beta_try, hp.lambdas[j], eps, xi, thetas[j])
                        thetas_try[j] = t_new
                    obj_try = _glm_exact_objective(tasks, hp, thetas_try, beta_try)
                    if obj_try < new_obj - 1e-4 * step * gn2 or obj_try < new_obj - hp.rel_obj_tol * (
                        1.0 + abs(new_obj)
                    ):
                        beta = beta_try
                        thetas = thetas_try
                        refine_step = step * 2.0
                        improved = True
                        new_obj = obj_try
                        break
                    step *= 0.5
        history.append(new_obj)
        if not improved:
            converged = True
            obj = new_obj
            break
        obj = new_obj

    dev_norms = np.array(
        [float(np.sqrt(max(0.0, (thetas[j] - beta) @ tasks[j].sigma @ (thetas[j] - beta)))) for j in range(m)]
    )
    return FitResult(
        thetas=thetas,
        beta=beta,
        objective=obj,
        iterations=iters,
        converged=converged,
        per_task_deviation_seminorm=dev_norms,
        objective_history=np.asarray(history),
    )


def fit_mtlr_glm(ds: MultiTaskDataset, spec: GlmSpec, hp: Hyperparameters) -> FitResult:
    """Matrix-weighted fit for a logistic dataset over the xi-ball."""
    return _fit_glm_common(ds, spec, hp, penalty="matrix")
