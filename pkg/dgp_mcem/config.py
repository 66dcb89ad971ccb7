import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np

from dgp_mcem.errors import ConfigError
from dgp_mcem.mcem import McemConfig, TPrior
from dgp_mcem.simstudy import METHODS, SyntheticSpec

TASKS = ("fit", "simstudy", "multisubject", "summarize")


def _parse_floats(text: str, what: str) -> Tuple[float, ...]:
    try:
        values = tuple(float(v) for v in str(text).split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"could not parse {what} '{text}' as comma-separated numbers")
    if not all(np.isfinite(values)):
        raise ConfigError(f"{what} must be finite, got '{text}'")
    return values


@dataclass
class RunConfig:
    task: str = "fit"
    data: Optional[str] = None
    out: Optional[str] = None
    interval: Optional[Tuple[float, float]] = None
    prior: str = "uniform"
    mode: str = "single"
    seed: int = 0
    D: int = 2000
    J: int = 200
    tol: float = 1e-4
    max_iter: int = 100
    a_sigma: float = 0.5
    b_sigma: float = 0.5
    final_draws: int = 4000
    burn_in: int = 1000
    thin: int = 2
    alpha: float = 0.05
    curve_points: int = 200
    max_paths: int = 500
    gmm_runs: int = 10
    emit_draws: bool = True
    emit_hpd: bool = True
    emit_curves: bool = True
    emit_gmm: bool = True
    workers: Optional[int] = None
    # simulation study
    replicates: int = 100
    n: int = 50
    sigma: float = 0.25
    methods: str = ",".join(METHODS)
    # multisubject: header fields that define a pooled unit
    pool_by: str = "group,condition"

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got '{self.task}'")
        if self.task in ("fit", "multisubject", "summarize"):
            if not self.data:
                raise ConfigError(f"task '{self.task}' needs a data path")
            if not Path(self.data).exists():
                raise ConfigError(f"data path '{self.data}' does not exist")
        if self.interval is not None:
            if isinstance(self.interval, str):
                self.interval = _parse_floats(self.interval, "interval")
            self.interval = tuple(float(v) for v in self.interval)
            if len(self.interval) != 2 or not self.interval[0] < self.interval[1]:
                raise ConfigError(f"interval must be 'a,b' with a < b, got {self.interval}")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")
        if self.curve_points < 2 or self.max_paths < 1 or self.gmm_runs < 1:
            raise ConfigError("curve_points >= 2, max_paths >= 1 and gmm_runs >= 1 are required")
        if self.workers is not None and self.workers < 1:
            raise ConfigError("workers must be at least 1")
        unknown = set(self.method_list) - set(METHODS)
        if unknown:
            raise ConfigError(f"unknown methods {sorted(unknown)}, expected a subset of {METHODS}")
        if not set(self.pool_keys) <= {"group", "condition"}:
            raise ConfigError(f"pool_by may only name 'group' and 'condition', got '{self.pool_by}'")
        # fail early on malformed strings
        self.mode_spec()
        TPrior.parse(self.prior, (0.0, 1.0))

    @classmethod
    def from_sources(cls, json_path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> "RunConfig":
        """Settings from a JSON file, then every non-None override on top."""
        values: Dict[str, Any] = {}
        if json_path:
            try:
                with open(json_path, "r", encoding="utf-8") as fh:
                    values = json.load(fh)
            except (OSError, json.JSONDecodeError) as e:
                raise ConfigError(f"could not read config file '{json_path}': {e}")
            if not isinstance(values, dict):
                raise ConfigError("config file must hold a JSON object")
        values.update({k: v for k, v in (overrides or {}).items() if v is not None})
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values)

    @property
    def method_list(self) -> Tuple[str, ...]:
        return tuple(m.strip() for m in self.methods.split(",") if m.strip())

    @property
    def pool_keys(self) -> Tuple[str, ...]:
        return tuple(k.strip() for k in self.pool_by.split(",") if k.strip())

    def mode_spec(self) -> Tuple[str, Tuple[float, ...]]:
        """'single', 'gpr', 'multiple:<breaks>' or 'oracle:<points>' as (kind, numbers)."""
        kind, _, rest = self.mode.partition(":")
        if kind in ("single", "gpr"):
            if rest:
                raise ConfigError(f"mode '{kind}' takes no arguments")
            return kind, ()
        if kind == "multiple":
            breaks = _parse_floats(rest, "breaks")
            if not breaks or np.any(np.diff(breaks) <= 0):
                raise ConfigError("multiple mode needs increasing breaks, e.g. 'multiple:1.0'")
            return kind, breaks
        if kind == "oracle":
            return kind, _parse_floats(rest, "oracle points")
        raise ConfigError(f"mode must be single, gpr, multiple:<breaks> or oracle:<points>, got '{self.mode}'")

    def resolved_interval(self, x) -> Tuple[float, float]:
        lo, hi = float(np.min(x)), float(np.max(x))
        if self.interval is None:
            return lo, hi
        a, b = self.interval
        if a < lo or b > hi:
            raise ConfigError(f"interval ({a}, {b}) lies outside the data range ({lo}, {hi})")
        return a, b

    @property
    def out_dir(self) -> Path:
        return Path(self.out or "runs")

    def mcem_common(self, interval: Tuple[float, float]) -> Dict[str, Any]:
        return dict(
            D=self.D, J=self.J, tol=self.tol, max_iter=self.max_iter,
            a_sigma=self.a_sigma, b_sigma=self.b_sigma,
            final_draws=self.final_draws, burn_in=self.burn_in, thin=self.thin,
            seed=self.seed, t_prior=TPrior.parse(self.prior, interval),
        )

    def mcem_config(self, interval: Tuple[float, float]) -> McemConfig:
        kind, numbers = self.mode_spec()
        common = self.mcem_common(interval)
        if kind == "single":
            return McemConfig(mode="single", **common)
        if kind == "gpr":
            return McemConfig(mode="oracle", oracle_t=(), **common)
        if kind == "oracle":
            return McemConfig(mode="oracle", oracle_t=numbers, **common)
        a, b = interval
        if numbers[0] <= a or numbers[-1] >= b:
            raise ConfigError(f"breaks {numbers} must lie strictly inside the interval ({a}, {b})")
        edges = (a,) + numbers + (b,)
        return McemConfig(mode="multiple", intervals=tuple(zip(edges[:-1], edges[1:])), **common)

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(n=self.n, sigma=self.sigma, replicates=self.replicates, seed=self.seed)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)
