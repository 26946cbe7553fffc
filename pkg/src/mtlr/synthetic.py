"""Deterministic synthetic problem generators.

Two data-generating processes: sphere covariates with coordinatewise
eigendecay (shared geometry across tasks), and a two-group spiked-covariance
family whose population balancedness is calibrated to a target level. Both
are fully determined by the config seed; every task draws from its own
stream so generation order and worker counts cannot change the data.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .task_data import MultiTaskDataset, TaskDataset

DECAY_MODE = "decay_sphere"
SPIKED_MODE = "spiked_balancedness"


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for one synthetic problem draw."""

    n: int = 100
    m: int = 30
    d: int = 30
    delta: float = 0.2
    eps: float = 0.1
    alpha: float = 1.0
    r_out: float = 10.0
    noise_sd: float = 1.0
    seed: int = 0
    mode: str = DECAY_MODE
    W: float = 5.0

    def __post_init__(self):
        if self.mode not in (DECAY_MODE, SPIKED_MODE):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.n < 1 or self.m < 1 or self.d < 1:
            raise ConfigError("n, m, d must be positive")
        if not 0.0 <= self.eps < 1.0:
            raise ConfigError("eps must lie in [0, 1)")
        if self.delta < 0 or self.alpha < 0 or self.noise_sd < 0:
            raise ConfigError("delta, alpha, noise_sd must be nonnegative")
        if self.n_outliers >= self.m:
            raise ConfigError("outlier count must leave at least one inlier")
        if self.mode == SPIKED_MODE:
            if self.W < 1:
                raise ConfigError("W must be at least 1")
            if self.d < 2:
                raise ConfigError("spiked mode needs d >= 2")

    @property
    def n_outliers(self) -> int:
        return int(np.floor(self.eps * self.m))


@dataclass(frozen=True)
class SynthProblem:
    """A generated dataset plus the ground truth needed for evaluation."""

    dataset: MultiTaskDataset
    true_thetas: np.ndarray
    inlier_mask: np.ndarray
    population_covariances: np.ndarray
    theta_star: np.ndarray
    config: SynthConfig = field(repr=False, default=None)


def _params_rng(config: SynthConfig) -> np.random.Generator:
    return np.random.default_rng([config.seed, 0])


def _task_rng(config: SynthConfig, task_index: int) -> np.random.Generator:
    return np.random.default_rng([config.seed, 1 + task_index])


def _unit_sphere(rng: np.random.Generator, d: int) -> np.ndarray:
    while True:
        u = rng.standard_normal(d)
        nrm = np.linalg.norm(u)
        if nrm > 0:
            return u / nrm


def _upper_sphere(rng: np.random.Generator, d: int) -> np.ndarray:
    """Uniform on the unit sphere restricted to last coordinate >= 0."""
    u = _unit_sphere(rng, d)
    u[-1] = abs(u[-1])
    return u


def sample_decay_covariates(n: int, d: int, alpha: float, rng: np.random.Generator):
    """Unit-sphere rows with coordinate k scaled by k^-alpha (1-indexed).

    The exact population covariance is diag(k^-2alpha) / d because uniform
    sphere samples have second moment I/d.
    """
    if n < 1 or d < 1:
        raise ConfigError("n and d must be positive")
    z = rng.standard_normal((n, d))
    norms = np.linalg.norm(z, axis=1)
    norms[norms == 0] = 1.0
    design = z / norms[:, None]
    scales = np.arange(1, d + 1, dtype=np.float64) ** (-alpha)
    design = design * scales[None, :]
    population_cov = np.diag(scales**2) / d
    return design, population_cov


def sample_task_params(config: SynthConfig, rng: np.random.Generator):
    """Centroid, per-task true parameters, and the inlier mask.

    Inliers sit at exact distance delta from the centroid along upper-
    hemisphere directions; outliers sit at Euclidean radius r_out.
    """
    m, d = config.m, config.d
    theta_star = _unit_sphere(rng, d)
    n_out = config.n_outliers
    outlier_idx = rng.choice(m, size=n_out, replace=False) if n_out > 0 else np.empty(0, dtype=np.int64)
    inlier_mask = np.ones(m, dtype=bool)
    inlier_mask[outlier_idx] = False
    true_thetas = np.empty((m, d))
    for j in range(m):
        direction = _upper_sphere(rng, d)
        if inlier_mask[j]:
            true_thetas[j] = theta_star + config.delta * direction
        else:
            true_thetas[j] = config.r_out * direction
    return theta_star, true_thetas, inlier_mask


def spiked_eta(W: float, inlier_count: int):
    """Spiked-covariance floor calibrated to a target balancedness level.

    Returns (eta, p, r) with r = floor(|S|/W), p = r/|S| and
    eta = clip((1/W - p)/(1 - p), 0, 1). At p = 1 the formula degenerates
    and eta = 0 by convention.
    """
    if inlier_count < 1:
        raise ConfigError("need at least one inlier")
    if W < 1:
        raise ConfigError("W must be at least 1")
    r = int(np.floor(inlier_count / W))
    p = r / inlier_count
    if p >= 1.0:
        return 0.0, p, r
    eta = (1.0 / W - p) / (1.0 - p)
    return float(np.clip(eta, 0.0, 1.0)), p, r


def generate_problem(config: SynthConfig) -> SynthProblem:
    """Draw a full synthetic problem; bit-identical for a fixed config."""
    rng = _params_rng(config)
    theta_star, true_thetas, inlier_mask = sample_task_params(config, rng)
    m, n, d = config.m, config.n, config.d
    pop_covs = np.empty((m, d, d))
    tasks = []
    if config.mode == DECAY_MODE:
        for j in range(m):
            trng = _task_rng(config, j)
            design, pop = sample_decay_covariates(n, d, config.alpha, trng)
            noise = config.noise_sd * trng.standard_normal(n)
            responses = design @ true_thetas[j] + noise
            tasks.append(TaskDataset(design, responses, task_id=j))
            pop_covs[j] = pop
    else:
        inlier_idx = np.nonzero(inlier_mask)[0]
        eta, _, r = spiked_eta(config.W, len(inlier_idx))
        minority = rng.choice(inlier_idx, size=r, replace=False) if r > 0 else np.empty(0, dtype=np.int64)
        spike_coord = np.zeros(m, dtype=np.int64)  # index of e_g
        spike_coord[minority] = 1
        for j in range(m):
            trng = _task_rng(config, j)
            g = spike_coord[j]
            z = trng.standard_normal((n, d))
            design = np.sqrt(eta) * z
            design[:, g] = z[:, g]
            pop = eta * np.eye(d)
            pop[g, g] = 1.0
            noise = config.noise_sd * trng.standard_normal(n)
            responses = design @ true_thetas[j] + noise
            tasks.append(TaskDataset(design, responses, task_id=j))
            pop_covs[j] = pop
    dataset = MultiTaskDataset(tuple(tasks), model_kind="linear")
    return SynthProblem(
        dataset=dataset,
        true_thetas=true_thetas,
        inlier_mask=inlier_mask,
        population_covariances=pop_covs,
        theta_star=theta_star,
        config=config,
    )
