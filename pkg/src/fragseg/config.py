"""Pipeline configuration: defaults, TOML loading, CLI overrides."""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

# Every tuned constant lives here and nowhere else.
DEFAULT_TAU = 0.7            # binarization: keep cells >= tau * mean
DEFAULT_THETA1 = 0.3         # min mean activation for a fragment
DEFAULT_THETA2 = 3.0         # max bbox_area / area for a fragment
DEFAULT_SIM_THRESHOLD = 0.15  # image-text similarity gate
K_FLOOR = 20                 # lower bound on cluster count
DEFAULT_KMEANS_MAX_ITER = 100
DEFAULT_KMEANS_REL_TOL = 1e-4
SIGMA_DIVISOR = 8            # seed heatmap sigma = max(H, W) / SIGMA_DIVISOR
DEFAULT_PATCH_SIZE = 16

WORKERS_ENV_VAR = "FRAGSEG_WORKERS"


@dataclass
class PipelineConfig:
    """Flat bag of knobs consumed by the pipeline stages.

    Field names double as the TOML keys and the CLI flag names.
    """

    categories: list[str] = field(default_factory=list)
    tau: float = DEFAULT_TAU
    theta1: float = DEFAULT_THETA1
    theta2: float = DEFAULT_THETA2
    sim_threshold: float = DEFAULT_SIM_THRESHOLD
    k_floor: int = K_FLOOR
    kmeans_max_iter: int = DEFAULT_KMEANS_MAX_ITER
    kmeans_rel_tol: float = DEFAULT_KMEANS_REL_TOL
    sigma_divisor: float = SIGMA_DIVISOR
    patch_size: int = DEFAULT_PATCH_SIZE
    rng_seed: int = 0
    workers: int = 1

    def validate(self) -> None:
        if self.tau < 0:
            raise ValueError("tau must be non-negative")
        if not 0 <= self.theta1 <= 1:
            raise ValueError("theta1 must lie in [0, 1]")
        if self.theta2 < 1:
            raise ValueError("theta2 must be >= 1 (boundary scores are >= 1)")
        if self.k_floor < 1:
            raise ValueError("k_floor must be >= 1")
        if self.kmeans_max_iter < 1:
            raise ValueError("kmeans_max_iter must be >= 1")
        if self.kmeans_rel_tol < 0:
            raise ValueError("kmeans_rel_tol must be >= 0")
        if self.sigma_divisor <= 0:
            raise ValueError("sigma_divisor must be positive")
        if self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


_FIELDS = {f.name: f.type for f in dataclasses.fields(PipelineConfig)}


def load_config(path: str | Path) -> PipelineConfig:
    """Read a TOML file with flat keys matching PipelineConfig fields."""
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    unknown = sorted(set(data) - set(_FIELDS))
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    cfg = PipelineConfig(**data)
    cfg.validate()
    return cfg


def apply_overrides(cfg: PipelineConfig, overrides: dict) -> PipelineConfig:
    """Return a copy of cfg with non-None override values applied."""
    clean = {k: v for k, v in overrides.items() if v is not None}
    unknown = sorted(set(clean) - set(_FIELDS))
    if unknown:
        raise ValueError(f"unknown config overrides: {', '.join(unknown)}")
    out = dataclasses.replace(cfg, **clean)
    out.validate()
    return out


def worker_count(cfg: PipelineConfig) -> int:
    """Resolve the worker count; the environment variable wins over config."""
    env = os.environ.get(WORKERS_ENV_VAR)
    if env is not None:
        n = int(env)
        if n < 1:
            raise ValueError(f"{WORKERS_ENV_VAR} must be >= 1, got {n}")
        return n
    return cfg.workers
