"""Spectral utilities: whitening, balancedness and comparability diagnostics,
and the seminorm-ball projection used when lifting in-sample guarantees to
population risk.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .task_data import RANK_TOL, TaskGeometry

# Relative eigenmass of a task allowed outside the reference range before the
# diagnostic is declared infinite.
RANGE_LEAK_TOL = 1e-8


@dataclass(frozen=True)
class WhitenedBasis:
    """Square-root factors of a PSD matrix restricted to its range.

    ``half`` maps whitened range coordinates back to the original space,
    ``half_pinv`` maps vectors into whitened coordinates, and
    ``range_projector`` is the orthogonal projector onto the range.
    """

    half: np.ndarray
    half_pinv: np.ndarray
    range_projector: np.ndarray

    @property
    def rank(self) -> int:
        return self.half.shape[1]

    def whiten(self, v: np.ndarray) -> np.ndarray:
        return self.half_pinv @ v


def whitened_basis(geom: TaskGeometry) -> WhitenedBasis:
    """Rank-restricted square root and pseudo-inverse square root of sigma."""
    r = geom.rank
    q = geom.eigenvectors[:, :r]
    sqrt_w = np.sqrt(geom.eigenvalues[:r])
    half = q * sqrt_w[np.newaxis, :]
    if r > 0:
        half_pinv = (q / sqrt_w[np.newaxis, :]).T
    else:
        half_pinv = np.zeros((0, geom.d))
    projector = q @ q.T
    return WhitenedBasis(half=half, half_pinv=half_pinv, range_projector=projector)


def _as_geometry(mat_or_geom) -> TaskGeometry:
    if isinstance(mat_or_geom, TaskGeometry):
        return mat_or_geom
    return TaskGeometry.from_matrix(np.asarray(mat_or_geom, dtype=np.float64))


def _range_leak(geom: TaskGeometry, projector: np.ndarray) -> float:
    """Fraction of a task's eigenmass outside the reference range."""
    total = float(np.trace(geom.sigma))
    if total <= 0.0:
        return 0.0
    resid = geom.sigma - projector @ geom.sigma @ projector
    return max(0.0, float(np.trace(resid))) / total


def balancedness_emp(geoms: list[TaskGeometry], inliers: list[int] | np.ndarray | None = None) -> float:
    """Largest whitened eigenvalue of any task against the average geometry.

    The reference is the plain average of all task second moments; pass
    ``inliers`` to average over a known subset instead (useful on synthetic
    data where the true inlier set is available). Returns ``inf`` when a
    task has eigenmass outside the reference range beyond RANGE_LEAK_TOL.
    """
    if len(geoms) < 1:
        raise ValueError("need at least one task")
    if inliers is None:
        ref_set = list(range(len(geoms)))
    else:
        ref_set = [int(i) for i in np.atleast_1d(np.asarray(inliers)).tolist()]
    d = geoms[0].d
    avg = np.zeros((d, d))
    for i in ref_set:
        avg += geoms[i].sigma
    avg /= len(ref_set)
    ref = TaskGeometry.from_matrix(avg)
    basis = whitened_basis(ref)
    best = 0.0
    for g in geoms:
        if _range_leak(g, basis.range_projector) > RANGE_LEAK_TOL:
            return float("inf")
        w = basis.half_pinv @ g.sigma @ basis.half_pinv.T
        if w.size == 0:
            continue
        ev = np.linalg.eigvalsh(0.5 * (w + w.T))
        best = max(best, float(ev[-1]) if ev.size else 0.0)
    return best


def comparability_nu(empirical: TaskGeometry, population: np.ndarray | TaskGeometry) -> float:
    """Smallest nu with ``nu^-1 * emp <= pop <= nu * emp`` in Loewner order.

    Returns ``inf`` when the two ranges disagree, in which case no finite
    two-sided comparison exists.
    """
    emp = _as_geometry(empirical)
    pop = _as_geometry(population)
    if emp.rank != pop.rank:
        return float("inf")
    if emp.rank == 0:
        return 1.0
    pop_basis = whitened_basis(pop)
    emp_basis = whitened_basis(emp)
    if _range_leak(emp, pop_basis.range_projector) > RANGE_LEAK_TOL:
        return float("inf")
    if _range_leak(pop, emp_basis.range_projector) > RANGE_LEAK_TOL:
        return float("inf")
    w = pop_basis.half_pinv @ emp.sigma @ pop_basis.half_pinv.T
    ev = np.linalg.eigvalsh(0.5 * (w + w.T))
    lam_max = float(ev[-1])
    lam_min = float(ev[0])
    if lam_min <= 0.0:
        return float("inf")
    return max(lam_max, 1.0 / lam_min)


def seminorm_ball_project(geom: TaskGeometry, theta: np.ndarray, xi: float, tol: float = 1e-10) -> np.ndarray:
    """Project onto the Euclidean ball of radius xi in the sigma-seminorm.

    Among seminorm-ties (the null space of sigma is free), returns the point
    of minimum Euclidean distance to ``theta``.
    """
    if xi <= 0:
        raise ValueError("xi must be positive")
    theta = np.asarray(theta, dtype=np.float64)
    if np.linalg.norm(theta) <= xi:
        return theta.copy()
    r = geom.rank
    q = geom.eigenvectors
    lam = geom.eigenvalues
    z = q.T @ theta
    z_range, z_null = z[:r], z[r:]
    range_norm = np.linalg.norm(z_range)
    out = np.zeros_like(z)
    if range_norm <= xi:
        # Seminorm distance can be driven to zero; spend the leftover radius
        # on the null component, shrunk toward theta's.
        out[:r] = z_range
        budget = np.sqrt(max(0.0, xi**2 - range_norm**2))
        null_norm = np.linalg.norm(z_null)
        if null_norm > 0.0:
            out[r:] = z_null * min(1.0, budget / null_norm)
    else:
        # Constraint binds in the range: solve ||(lam/(lam+mu)) z_range|| = xi
        # for the multiplier mu by bisection. Null component must be zero.
        lam_r = lam[:r]

        def norm_at(mu: float) -> float:
            return float(np.linalg.norm(lam_r * z_range / (lam_r + mu)))

        lo, hi = 0.0, 1.0
        while norm_at(hi) > xi:
            hi *= 2.0
            if hi > 1e300:
                break
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if norm_at(mid) > xi:
                lo = mid
            else:
                hi = mid
            if hi - lo <= tol * max(1.0, hi):
                break
        mu = 0.5 * (lo + hi)
        out[:r] = lam_r * z_range / (lam_r + mu)
        nrm = np.linalg.norm(out[:r])
        if nrm > 0:
            out[:r] *= xi / nrm
    return q @ out


def rank_tolerance() -> float:
    """Relative eigenvalue threshold used for all rank decisions."""
    return RANK_TOL
