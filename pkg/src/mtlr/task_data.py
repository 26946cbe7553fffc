"""Multi-task data model: per-task datasets, validation, second moments.

A task is a fixed design ``X`` (n rows, d columns) with responses ``Y``.
The per-task geometry object caches the eigendecomposition of the
empirical second moment ``sigma = X'X / n``, which every solver and
diagnostic in the package works from.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, InconsistentD, NonBinaryLabel, NonFiniteEntry

RANK_TOL = 1e-10


@dataclass(frozen=True)
class TaskDataset:
    """One task: design matrix, response vector and a task index."""

    design: np.ndarray
    responses: np.ndarray
    task_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "design", np.atleast_2d(np.asarray(self.design, dtype=np.float64)))
        object.__setattr__(self, "responses", np.asarray(self.responses, dtype=np.float64).ravel())

    @property
    def n(self) -> int:
        return self.design.shape[0]

    @property
    def d(self) -> int:
        return self.design.shape[1]


@dataclass(frozen=True)
class MultiTaskDataset:
    """An ordered collection of tasks sharing the feature dimension."""

    tasks: tuple[TaskDataset, ...]
    model_kind: str = "linear"  # "linear" or "logistic"

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))

    @property
    def m(self) -> int:
        return len(self.tasks)

    @property
    def d(self) -> int:
        return self.tasks[0].d

    @property
    def n_js(self) -> np.ndarray:
        return np.array([t.n for t in self.tasks], dtype=np.int64)


@dataclass(frozen=True)
class TaskGeometry:
    """Empirical second moment with cached spectral data.

    ``eigenvalues`` are nonincreasing and clamped to be nonnegative;
    ``rank`` counts eigenvalues above ``RANK_TOL * max_eigenvalue``.
    """

    sigma: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    rank: int
    n: int = 0
    task_id: int = field(default=0, compare=False)

    @classmethod
    def from_matrix(cls, sigma: np.ndarray, n: int = 0, task_id: int = 0) -> "TaskGeometry":
        """Build geometry from a (near-)PSD matrix, symmetrizing first."""
        sigma = np.asarray(sigma, dtype=np.float64)
        if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
            raise DimensionMismatch(f"second moment must be square, got shape {sigma.shape}")
        if not np.all(np.isfinite(sigma)):
            raise NonFiniteEntry("second moment contains non-finite entries")
        scale = np.abs(sigma).max()
        if scale > 0 and np.abs(sigma - sigma.T).max() > 1e-12 * scale:
            raise NonFiniteEntry("second moment is not symmetric to 1e-12 relative")
        sym = 0.5 * (sigma + sigma.T)
        w, q = np.linalg.eigh(sym)
        wmax = w[-1] if w.size else 0.0
        if w.size and w[0] < -1e-12 * max(wmax, 0.0) - 1e-300:
            raise NonFiniteEntry(f"matrix has negative eigenvalue {w[0]:.3e}; not PSD")
        w = np.clip(w, 0.0, None)
        # descending order
        w = w[::-1].copy()
        q = q[:, ::-1].copy()
        rank = int(np.count_nonzero(w > RANK_TOL * wmax)) if wmax > 0 else 0
        return cls(sigma=sym, eigenvalues=w, eigenvectors=q, rank=rank, n=n, task_id=task_id)

    @property
    def d(self) -> int:
        return self.sigma.shape[0]

    @property
    def op_norm(self) -> float:
        return float(self.eigenvalues[0]) if self.eigenvalues.size else 0.0


def validate_dataset(ds: MultiTaskDataset) -> None:
    """Check every dataset invariant; raise on the first violation.

    Raises DimensionMismatch, InconsistentD, NonBinaryLabel or
    NonFiniteEntry naming the offending task.
    """
    if ds.m < 1:
        raise DimensionMismatch("dataset must contain at least one task")
    d0 = ds.tasks[0].d
    for t in ds.tasks:
        if t.design.ndim != 2 or t.n < 1 or t.d < 1:
            raise DimensionMismatch(f"task {t.task_id}: design must be nonempty 2-d, got shape {t.design.shape}")
        if t.responses.shape[0] != t.n:
            raise DimensionMismatch(
                f"task {t.task_id}: design has {t.n} rows but responses has length {t.responses.shape[0]}"
            )
        if t.d != d0:
            raise InconsistentD(f"task {t.task_id}: d={t.d} differs from task {ds.tasks[0].task_id} (d={d0})")
        if not np.all(np.isfinite(t.design)):
            raise NonFiniteEntry(f"task {t.task_id}: design contains non-finite entries")
        if not np.all(np.isfinite(t.responses)):
            raise NonFiniteEntry(f"task {t.task_id}: responses contain non-finite entries")
        if ds.model_kind == "logistic":
            bad = (t.responses != 0.0) & (t.responses != 1.0)
            if np.any(bad):
                idx = int(np.argmax(bad))
                raise NonBinaryLabel(
                    f"task {t.task_id}: response {t.responses[idx]!r} at row {idx} is not in {{0, 1}}"
                )


def second_moment(task: TaskDataset) -> TaskGeometry:
    """Empirical second moment ``X'X / n`` with cached eigendecomposition."""
    x = task.design
    sigma = x.T @ x / task.n
    if not np.all(np.isfinite(sigma)):
        raise NonFiniteEntry(f"task {task.task_id}: second moment overflowed")
    return TaskGeometry.from_matrix(sigma, n=task.n, task_id=task.task_id)


def seminorm(geom: TaskGeometry, v: np.ndarray) -> float:
    """Matrix-weighted seminorm ``sqrt(v' sigma v)``, clamped at zero."""
    v = np.asarray(v, dtype=np.float64)
    return float(np.sqrt(max(0.0, float(v @ geom.sigma @ v))))
