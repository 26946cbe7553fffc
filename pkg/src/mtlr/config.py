"""Experiment configuration shared by the sweep runner and the CLI.

Configs arrive either as a flat ``key=value`` file or as command-line
flags; flags win. Every knob that affects results round-trips through
``to_dict``/``from_dict`` so a run can be replayed from its manifest.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .errors import ConfigError, ConfigParseError, UnknownKey

SWEEP_MODES = ("sweep_delta", "sweep_eps", "sweep_alpha", "sweep_balancedness")
MODES = SWEEP_MODES + ("fit", "cv", "diagnose", "har")

DELTA_GRID = (0.2, 0.4, 0.8, 1.6, 3.2)
EPS_GRID = (0.05, 0.1, 0.2, 0.3, 0.4)
ALPHA_GRID = (0.0, 0.5, 1.0, 1.5, 2.0)
W_GRID = (5.0, 10.0, 15.0, 20.0)
Q_GRID_SYNTH = (0.1, 0.4, 0.7, 1.0, 2.0, 4.0, 8.0, 16.0)
Q_GRID_HAR = (0.05, 0.10, 0.15, 0.20, 0.25, 0.30, 0.35, 0.40, 0.45, 0.50)

ALL_METHODS = ("mtlr", "armul", "itl", "dp")


@dataclass
class ExperimentConfig:
    """Declarative description of one experiment run."""

    mode: str = "sweep_delta"
    n: int = 100
    m: int = 30
    d: int = 30
    delta: float = 0.2
    eps: float = 0.1
    alpha: float = 1.0
    r_out: float = 10.0
    noise_sd: float | None = None
    W: float = 5.0
    xi: float = 10.0
    sweep_grid: tuple[float, ...] | None = None
    q_grid: tuple[float, ...] | None = None
    k_folds: int = 5
    reps: int = 30
    seed: int = 0
    output_path: str = "results.csv"
    format: str = "csv"
    methods: tuple[str, ...] = ALL_METHODS
    workers: int = 1
    deterministic_output: bool = True
    q: float = 1.0
    har_features: str = ""
    har_labels: str = ""
    har_subjects: str = ""
    har_standardize: bool = False
    har_test_fraction: float = 0.2
    har_positive_label: int = 5

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.mode not in MODES:
            raise ConfigParseError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.reps < 1:
            raise ConfigParseError("reps must be at least 1")
        if self.k_folds < 2:
            raise ConfigParseError("k_folds must be at least 2")
        if self.workers < 1:
            raise ConfigParseError("workers must be at least 1")
        if self.format not in ("csv", "json"):
            raise ConfigParseError(f"unknown format {self.format!r}")
        bad = [mth for mth in self.methods if mth not in ALL_METHODS]
        if bad:
            raise ConfigParseError(f"unknown methods {bad}; expected subset of {ALL_METHODS}")
        if not self.methods:
            raise ConfigParseError("methods must be nonempty")
        needs_q = self.mode in SWEEP_MODES + ("cv", "har")
        if needs_q and self.effective_q_grid() is not None and len(self.effective_q_grid()) == 0:
            raise ConfigParseError("q_grid must be nonempty for modes that tune")
        if not 0 < self.har_test_fraction < 1:
            raise ConfigParseError("har_test_fraction must lie in (0, 1)")

    def effective_sweep_grid(self) -> tuple[float, ...]:
        if self.sweep_grid is not None:
            return tuple(self.sweep_grid)
        return {
            "sweep_delta": DELTA_GRID,
            "sweep_eps": EPS_GRID,
            "sweep_alpha": ALPHA_GRID,
            "sweep_balancedness": W_GRID,
        }.get(self.mode, (0.0,))

    def effective_q_grid(self) -> tuple[float, ...]:
        if self.q_grid is not None:
            return tuple(self.q_grid)
        return Q_GRID_HAR if self.mode == "har" else Q_GRID_SYNTH

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = list(v)
            out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, value in data.items():
            if key not in known:
                raise UnknownKey(f"unknown config key {key!r}")
            kwargs[key] = _coerce(key, value, known[key].type)
        return cls(**kwargs)


_BOOL_FIELDS = ("deterministic_output", "har_standardize")
_INT_FIELDS = ("n", "m", "d", "k_folds", "reps", "seed", "workers", "har_positive_label")
_FLOAT_FIELDS = (
    "delta",
    "eps",
    "alpha",
    "r_out",
    "noise_sd",
    "W",
    "xi",
    "q",
    "har_test_fraction",
)
_LIST_FLOAT_FIELDS = ("sweep_grid", "q_grid")
_LIST_STR_FIELDS = ("methods",)


def _coerce(key: str, value, _type) -> object:
    try:
        if key in _BOOL_FIELDS:
            if isinstance(value, bool):
                return value
            return str(value).strip().lower() in ("1", "true", "yes", "on")
        if key in _INT_FIELDS:
            return int(value)
        if key in _FLOAT_FIELDS:
            return float(value)
        if key in _LIST_FLOAT_FIELDS:
            if value is None:
                return None
            if isinstance(value, str):
                value = [v for v in value.split(",") if v.strip()]
            return tuple(float(v) for v in value)
        if key in _LIST_STR_FIELDS:
            if isinstance(value, str):
                value = [v for v in value.split(",") if v.strip()]
            return tuple(str(v).strip() for v in value)
        return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigParseError(f"could not parse config value for {key!r}: {value!r}") from exc


def parse_config(path: str | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Build a config from an optional key=value file plus flag overrides.

    File keys must name config fields exactly; unknown keys raise. Flag
    overrides take precedence over file values.
    """
    data: dict = {}
    if path is not None:
        known = {f.name for f in fields(ExperimentConfig)}
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ConfigParseError(f"{path}:{lineno}: expected key=value, got {line!r}")
                key, _, value = line.partition("=")
                key = key.strip()
                if key not in known:
                    raise UnknownKey(f"{path}:{lineno}: unknown config key {key!r}")
                data[key] = value.strip()
    if overrides:
        for key, value in overrides.items():
            if value is not None:
                data[key] = value
    return ExperimentConfig.from_dict(data)


def derive_seed(*parts: int) -> int:
    """Well-mixed 64-bit stream seed from integer components."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, np.uint64)[0])
