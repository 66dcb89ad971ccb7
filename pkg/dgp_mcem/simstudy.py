"""Synthetic benchmark: one known curve with two stationary points, fitted by GPR and three DGP variants."""

from __future__ import annotations

import logging
import os
import traceback
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from numpy.typing import ArrayLike, NDArray
from tabulate import tabulate

from dgp_mcem.errors import ConfigError, SimulationError
from dgp_mcem.mcem import Dataset, McemConfig, TPrior, run_mcem
from dgp_mcem.summarize import DensityGrid, HpdRegion, curve_bands, summarize_draws

__all__ = [
    "TRUE_STATIONARY",
    "MATCH_INTERVALS",
    "METHODS",
    "SyntheticSpec",
    "ReplicateResult",
    "MethodSummary",
    "RmseReport",
    "f_true",
    "f_true_deriv",
    "generate_dataset",
    "method_config",
    "stationary_estimates",
    "fit_replicate",
    "run_replicates",
    "rmse_curve",
    "build_report",
    "generate_erp_table",
]

TRUE_STATIONARY = (0.436, 1.459)
MATCH_INTERVALS = ((0.0, 1.0), (1.0, 2.0))
METHODS = ("gpr", "single", "multiple", "oracle")
MAX_FAILURE_RATE = 0.05
BAND_PROBE_X = 1.0


def f_true(x: ArrayLike) -> NDArray[np.float64]:
    x = np.asarray(x, dtype=float)
    return 0.3 + 0.4 * x + 0.5 * np.sin(3.2 * x) + 1.1 / (1.0 + x * x)


def f_true_deriv(x: ArrayLike) -> NDArray[np.float64]:
    x = np.asarray(x, dtype=float)
    return 0.4 + 1.6 * np.cos(3.2 * x) - 2.2 * x / (1.0 + x * x) ** 2


@dataclass
class SyntheticSpec:
    n: int = 50
    sigma: float = 0.25
    domain: Tuple[float, float] = (0.0, 2.0)
    replicates: int = 100
    seed: int = 0
    grid_length: int = 100

    def __post_init__(self):
        self.domain = (float(self.domain[0]), float(self.domain[1]))
        if self.n < 3:
            raise ConfigError(f"n must be at least 3, got {self.n}")
        if not self.sigma > 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")
        if not self.domain[0] < self.domain[1]:
            raise ConfigError(f"domain {self.domain} is empty")
        if self.replicates < 1 or self.grid_length < 2:
            raise ConfigError("need at least one replicate and a grid of length >= 2")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")

    @property
    def test_grid(self) -> NDArray[np.float64]:
        return np.linspace(self.domain[0], self.domain[1], self.grid_length)

    def replicate_seed(self, index: int) -> int:
        return int(np.random.SeedSequence([self.seed, index]).generate_state(1)[0])


def generate_dataset(spec: SyntheticSpec, index: int) -> Tuple[NDArray[np.float64], NDArray[np.float64]]:
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, index]))
    x = np.sort(rng.uniform(spec.domain[0], spec.domain[1], size=spec.n))
    y = f_true(x) + rng.normal(0.0, spec.sigma, size=spec.n)
    return x, y


def method_config(method: str, base: McemConfig, spec: SyntheticSpec, index: int) -> McemConfig:
    seed = spec.replicate_seed(index)
    if method == "gpr":
        return replace(base, mode="oracle", oracle_t=(), seed=seed)
    if method == "single":
        return replace(base, mode="single", t_prior=TPrior(domain=spec.domain), seed=seed)
    if method == "multiple":
        return replace(
            base, mode="multiple", t_prior=TPrior(domain=spec.domain), intervals=MATCH_INTERVALS, seed=seed
        )
    if method == "oracle":
        return replace(base, mode="oracle", oracle_t=TRUE_STATIONARY, seed=seed)
    raise ConfigError(f"unknown method '{method}', expected one of {METHODS}")


def stationary_estimates(
    region: HpdRegion,
    density: DensityGrid,
    intervals: Sequence[Tuple[float, float]] = MATCH_INTERVALS,
) -> List[float]:
    """Highest-density HPD mode inside each sub-interval, NaN where a sub-interval has none."""
    estimates = []
    for lo, hi in intervals:
        inside = [m for m in region.modes if lo < m < hi]
        if not inside:
            estimates.append(float("nan"))
            continue
        heights = np.interp(inside, density.grid, density.density)
        estimates.append(float(inside[int(np.argmax(heights))]))
    return estimates


@dataclass
class ReplicateResult:
    index: int
    method: str
    curve: Optional[NDArray[np.float64]] = None
    band_width: float = float("nan")
    t_hat: List[float] = field(default_factory=lambda: [float("nan")] * len(TRUE_STATIONARY))
    segments: List[Tuple[float, float]] = field(default_factory=list)
    converged: bool = False
    error: Optional[str] = None

    @property
    def m_hat(self) -> int:
        return len(self.segments)


def fit_replicate(
    spec: SyntheticSpec,
    index: int,
    method: str,
    base: Optional[McemConfig] = None,
    max_paths: int = 500,
    logger: Optional[logging.Logger] = None,
) -> ReplicateResult:
    logger = logger or logging.getLogger(__name__)
    config = method_config(method, base or McemConfig(), spec, index)
    x, y = generate_dataset(spec, index)
    data = Dataset.from_arrays(x, y, label=f"replicate-{index}")
    draws, state = run_mcem(config, data, logger=logger)

    grid = spec.test_grid
    curve = curve_bands(
        draws, data, grid,
        rng=np.random.default_rng(np.random.SeedSequence([config.seed, 5])),
        max_paths=max_paths, logger=logger,
    )
    result = ReplicateResult(
        index=index,
        method=method,
        curve=curve.mean,
        band_width=float(np.interp(BAND_PROBE_X, grid, curve.width)),
        converged=state.converged,
    )
    if method in ("single", "multiple"):
        density, region = summarize_draws(draws, spec.domain)
        result.t_hat = stationary_estimates(region, density)
        result.segments = region.segments
    return result


def _fit_safely(task) -> ReplicateResult:
    spec, index, method, base, max_paths = task
    logger = logging.getLogger(__name__)
    try:
        return fit_replicate(spec, index, method, base, max_paths=max_paths, logger=logger)
    except Exception as e:
        logger.error(f"replicate {index} ({method}) failed: {e}")
        logger.error(traceback.format_exc())
        return ReplicateResult(index=index, method=method, error=f"{type(e).__name__}: {e}")


def rmse_curve(truth: ArrayLike, estimates: ArrayLike) -> NDArray[np.float64]:
    """Pointwise root mean squared error across replicates; ``estimates`` is (replicates, grid)."""
    estimates = np.atleast_2d(np.asarray(estimates, dtype=float))
    return np.sqrt(np.mean((estimates - np.asarray(truth, dtype=float)[None, :]) ** 2, axis=0))


@dataclass
class MethodSummary:
    method: str
    replicates_ok: int
    failures: int
    rmse_curve: NDArray[np.float64]
    band_width_at_1: float
    convergence_rate: float
    rmse_t: Optional[List[float]] = None
    missing_modes: Optional[List[int]] = None
    hpd_endpoints: Optional[List[List[float]]] = None
    hpd_excluded_fraction: Optional[float] = None
    m_hat_histogram: Dict[str, int] = field(default_factory=dict)

    @property
    def mean_rmse(self) -> float:
        return float(np.mean(self.rmse_curve))

    def to_dict(self) -> Dict:
        out = asdict(self)
        out["rmse_curve"] = self.rmse_curve.tolist()
        out["mean_rmse"] = self.mean_rmse
        return out


@dataclass
class RmseReport:
    spec: SyntheticSpec
    grid: NDArray[np.float64]
    methods: Dict[str, MethodSummary]

    @property
    def flagged(self) -> bool:
        return any(s.failures or s.convergence_rate < 1.0 for s in self.methods.values())

    def to_dict(self) -> Dict:
        return {
            "spec": asdict(self.spec),
            "true_stationary": list(TRUE_STATIONARY),
            "grid": self.grid.tolist(),
            "methods": {name: summary.to_dict() for name, summary in self.methods.items()},
        }

    def curve_frame(self) -> pd.DataFrame:
        frames = [
            pd.DataFrame({"method": name, "x": self.grid, "rmse": summary.rmse_curve})
            for name, summary in self.methods.items()
        ]
        return pd.concat(frames, ignore_index=True)

    def summary_frame(self) -> pd.DataFrame:
        rows = []
        for name, s in self.methods.items():
            rmse_t = s.rmse_t or [float("nan")] * len(TRUE_STATIONARY)
            rows.append(
                {
                    "method": name,
                    "replicates_ok": s.replicates_ok,
                    "failures": s.failures,
                    "mean_rmse": s.mean_rmse,
                    "rmse_t1": rmse_t[0],
                    "rmse_t2": rmse_t[1],
                    "band_width_at_1": s.band_width_at_1,
                    "convergence_rate": s.convergence_rate,
                }
            )
        return pd.DataFrame(rows)

    def summary_table(self) -> str:
        return tabulate(self.summary_frame(), headers="keys", tablefmt="github", showindex=False, floatfmt=".4f")


def _stationary_rmse(ok: List[ReplicateResult]) -> Tuple[List[float], List[int]]:
    rmse, missing = [], []
    for k, (truth, (lo, hi)) in enumerate(zip(TRUE_STATIONARY, MATCH_INTERVALS)):
        estimates = np.array([r.t_hat[k] for r in ok], dtype=float)
        absent = np.isnan(estimates)
        # a sub-interval without a mode counts as an error of its full width
        errors = np.where(absent, hi - lo, estimates - truth)
        rmse.append(float(np.sqrt(np.mean(errors**2))))
        missing.append(int(absent.sum()))
    return rmse, missing


def build_report(
    spec: SyntheticSpec, methods: Sequence[str], results: Sequence[ReplicateResult]
) -> RmseReport:
    grid = spec.test_grid
    truth = f_true(grid)
    summaries: Dict[str, MethodSummary] = {}
    for method in methods:
        mine = sorted((r for r in results if r.method == method), key=lambda r: r.index)
        ok = [r for r in mine if r.error is None]
        failures = len(mine) - len(ok)
        if failures > MAX_FAILURE_RATE * spec.replicates:
            raise SimulationError(f"{failures} of {spec.replicates} '{method}' replicates failed")
        if not ok:
            raise SimulationError(f"no '{method}' replicate finished")
        summary = MethodSummary(
            method=method,
            replicates_ok=len(ok),
            failures=failures,
            rmse_curve=rmse_curve(truth, np.array([r.curve for r in ok])),
            band_width_at_1=float(np.mean([r.band_width for r in ok])),
            convergence_rate=float(np.mean([r.converged for r in ok])),
        )
        if method in ("single", "multiple"):
            summary.rmse_t, summary.missing_modes = _stationary_rmse(ok)
            two = [r.segments for r in ok if r.m_hat == 2]
            summary.hpd_excluded_fraction = 1.0 - len(two) / len(ok)
            if two:
                summary.hpd_endpoints = np.mean(np.array(two), axis=0).tolist()
            summary.m_hat_histogram = {
                str(k): v for k, v in sorted(Counter(r.m_hat for r in ok).items())
            }
        summaries[method] = summary
    return RmseReport(spec=spec, grid=grid, methods=summaries)


def run_replicates(
    spec: SyntheticSpec,
    methods: Sequence[str] = METHODS,
    base: Optional[McemConfig] = None,
    workers: Optional[int] = None,
    max_paths: int = 500,
    logger: Optional[logging.Logger] = None,
) -> RmseReport:
    """Fit every (replicate, method) pair, concurrently when ``workers`` > 1.

    Args:
        spec: synthetic design and replicate count.
        methods: subset of METHODS to compare.
        base: sampler settings shared by every fit; seeds are derived per replicate.
        workers: process count, defaulting to the CPU count.
        max_paths: curve paths per fit.
        logger: progress messages.

    Returns:
        Per-method RMSE curves and summaries over the replicates that finished.
    """
    logger = logger or logging.getLogger(__name__)
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise ConfigError(f"unknown methods {sorted(unknown)}, expected a subset of {METHODS}")
    tasks = [(spec, i, m, base, max_paths) for i in range(spec.replicates) for m in methods]
    workers = workers or os.cpu_count() or 1
    logger.info(f"simulation study: {spec.replicates} replicates x {len(methods)} methods on {workers} workers")

    if workers <= 1:
        results = [_fit_safely(task) for task in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_fit_safely, tasks))

    report = build_report(spec, methods, results)
    logger.info("simulation study finished\n" + report.summary_table())
    return report


def _erp_wave(x, dip, peak, dip_width=15.0, peak_width=20.0, dip_amp=1.0, peak_amp=1.5):
    return -dip_amp * np.exp(-0.5 * ((x - dip) / dip_width) ** 2) + peak_amp * np.exp(
        -0.5 * ((x - peak) / peak_width) ** 2
    )


def generate_erp_table(
    n_subjects: int = 10,
    seed: int = 0,
    dip: float = 100.0,
    peak: float = 170.0,
    spread: float = 4.0,
    step: float = 2.0,
    domain: Tuple[float, float] = (50.0, 250.0),
    snr: float = 2.0,
    groups: Sequence[str] = ("young", "older"),
    condition: str = "voiced",
) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """Multi-subject waveform table with one dip and one peak per subject.

    Returns the table (``x`` plus one ``<id>:<group>:<condition>`` column per subject)
    and the true latencies located on a fine grid.
    """
    if n_subjects < 1:
        raise ConfigError("n_subjects must be at least 1")
    if not snr > 0:
        raise ConfigError("snr must be positive")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    x = np.arange(domain[0], domain[1] + 0.5 * step, step)
    fine = np.linspace(domain[0], domain[1], 20001)

    columns = {"x": x}
    truth = []
    for s in range(n_subjects):
        d = dip + rng.uniform(-spread, spread)
        p = peak + rng.uniform(-spread, spread)
        wave = _erp_wave(x, d, p)
        noise_sd = float(np.std(wave)) / snr
        name = f"s{s + 1:02d}:{groups[s % len(groups)]}:{condition}"
        columns[name] = wave + rng.normal(0.0, noise_sd, size=x.size)
        fine_wave = _erp_wave(fine, d, p)
        truth.append(
            {
                "subject": name.split(":")[0],
                "dip": float(fine[np.argmin(fine_wave)]),
                "peak": float(fine[np.argmax(fine_wave)]),
                "noise_sd": noise_sd,
            }
        )
    return pd.DataFrame(columns), pd.DataFrame(truth)
