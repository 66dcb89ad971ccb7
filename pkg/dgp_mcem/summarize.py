"""Posterior summaries: KDE of t, HPD regions, two-component mixtures, curve bands."""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import integrate, stats
from sklearn.exceptions import ConvergenceWarning
from sklearn.mixture import GaussianMixture

from dgp_mcem.dgp import posterior_predictive
from dgp_mcem.errors import ConfigError, DegenerateDensityError, DgpError, McemError
from dgp_mcem.mcem import Dataset, PosteriorDraws

__all__ = [
    "DensityGrid",
    "HpdRegion",
    "GmmFit",
    "CurveEstimate",
    "silverman_bandwidth",
    "kde",
    "hpd",
    "summarize_draws",
    "min_segment_cells",
    "fit_gmm2",
    "average_gmm_fits",
    "curve_bands",
]

GRID_SIZE = 512
MIN_SEGMENT_CELLS = 2


@dataclass
class DensityGrid:
    grid: NDArray[np.float64]
    density: NDArray[np.float64]
    bandwidth: float

    @property
    def step(self) -> float:
        return float(self.grid[1] - self.grid[0])


def silverman_bandwidth(draws: ArrayLike) -> float:
    draws = np.asarray(draws, dtype=float).ravel()
    sd = float(np.std(draws, ddof=1))
    iqr = float(stats.iqr(draws))
    spread = min(sd, iqr / 1.34) if iqr > 0 else sd
    return 0.9 * spread * draws.size ** (-0.2)


def kde(draws: ArrayLike, domain: Tuple[float, float], grid_size: int = GRID_SIZE) -> DensityGrid:
    """Gaussian KDE with Silverman's bandwidth, renormalised to integrate to one on ``domain``."""
    draws = np.asarray(draws, dtype=float).ravel()
    if draws.size < 10:
        raise ConfigError(f"need at least 10 draws for a density estimate, got {draws.size}")
    if np.ptp(draws) == 0:
        raise DegenerateDensityError("all draws are identical")
    a, b = domain
    bandwidth = silverman_bandwidth(draws)
    estimator = stats.gaussian_kde(draws, bw_method=bandwidth / np.std(draws, ddof=1))
    grid = np.linspace(a, b, grid_size)
    density = estimator(grid)
    density /= integrate.trapezoid(density, grid)
    return DensityGrid(grid=grid, density=density, bandwidth=float(bandwidth))


@dataclass
class HpdRegion:
    alpha: float
    threshold: float
    segments: List[Tuple[float, float]]
    modes: List[float]
    mass: float

    @property
    def m_hat(self) -> int:
        return len(self.segments)

    def contains(self, t: float) -> bool:
        return any(lo <= t <= hi for lo, hi in self.segments)

    def to_dict(self) -> Dict:
        out = asdict(self)
        out["segments"] = [list(s) for s in self.segments]
        out["m_hat"] = self.m_hat
        return out


def _cell_counts(grid: NDArray[np.float64], draws: NDArray[np.float64]) -> NDArray[np.int64]:
    edges = 0.5 * (grid[1:] + grid[:-1])
    return np.bincount(np.searchsorted(edges, draws), minlength=grid.size)


def _runs(inside: NDArray[np.bool_]) -> List[Tuple[int, int]]:
    padded = np.concatenate([[False], inside, [False]]).astype(int)
    starts = np.flatnonzero(np.diff(padded) == 1)
    ends = np.flatnonzero(np.diff(padded) == -1) - 1
    return list(zip(starts.tolist(), ends.tolist()))


def min_segment_cells(density: DensityGrid) -> int:
    """Narrowest run kept as a segment: one bandwidth, and never under MIN_SEGMENT_CELLS cells."""
    return max(MIN_SEGMENT_CELLS, int(np.ceil(density.bandwidth / density.step - 1e-9)))


def _prune_runs(runs: List[Tuple[int, int]], min_cells: int = MIN_SEGMENT_CELLS) -> List[Tuple[int, int]]:
    """Merge runs shorter than ``min_cells`` into a neighbour within two cells, else drop them."""
    pruned: List[Tuple[int, int, bool]] = []
    for k, (start, end) in enumerate(runs):
        if end - start + 1 >= min_cells:
            if pruned and start - pruned[-1][1] <= MIN_SEGMENT_CELLS and pruned[-1][2]:
                pruned[-1] = (pruned[-1][0], end, False)
            else:
                pruned.append((start, end, False))
            continue
        if pruned and start - pruned[-1][1] <= MIN_SEGMENT_CELLS:
            pruned[-1] = (pruned[-1][0], end, pruned[-1][2])
        elif k + 1 < len(runs) and runs[k + 1][0] - end <= MIN_SEGMENT_CELLS:
            # absorbed by the following run
            pruned.append((start, end, True))
    return [(start, end) for start, end, _ in pruned]


def hpd(density: DensityGrid, draws: ArrayLike, alpha: float = 0.05) -> HpdRegion:
    """Highest-density region {t : g(t) >= g_alpha} holding at least 1 - alpha of the draws.

    Args:
        density: KDE of the draws on its grid.
        draws: the pooled t draws the KDE was built from.
        alpha: one minus the target coverage, in (0, 1).

    Returns:
        The region with its segments, the KDE maximum inside each segment and
        the fraction of draws it actually covers. Runs above the threshold that
        are narrower than ``min_segment_cells`` are merged or dropped.
    """
    if not 0 < alpha < 1:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
    draws = np.asarray(draws, dtype=float).ravel()
    grid, dens = density.grid, density.density
    counts = _cell_counts(grid, draws)

    order = np.argsort(-dens, kind="stable")
    cumulative = np.cumsum(counts[order])
    k = int(np.argmax(cumulative >= (1.0 - alpha) * draws.size))
    threshold = float(dens[order[k]])

    runs = _prune_runs(_runs(dens >= threshold), min_segment_cells(density))
    inside = np.zeros(grid.size, dtype=bool)
    for start, end in runs:
        inside[start : end + 1] = True
    modes = [float(grid[start + int(np.argmax(dens[start : end + 1]))]) for start, end in runs]
    return HpdRegion(
        alpha=alpha,
        threshold=threshold,
        segments=[(float(grid[start]), float(grid[end])) for start, end in runs],
        modes=modes,
        mass=float(counts[inside].sum() / draws.size),
    )


def summarize_draws(
    draws: PosteriorDraws, domain: Tuple[float, float], alpha: float = 0.05
) -> Tuple[DensityGrid, HpdRegion]:
    """KDE and HPD of all t coordinates pooled together."""
    density = kde(draws.t_pooled, domain)
    return density, hpd(density, draws.t_pooled, alpha)


@dataclass
class GmmFit:
    weights: NDArray[np.float64]
    means: NDArray[np.float64]
    sds: NDArray[np.float64]
    loglik: float
    converged: bool
    unimodal: bool = False
    loglik_trace: List[float] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "sds": self.sds.tolist(),
            "loglik": self.loglik,
            "converged": self.converged,
            "unimodal": self.unimodal,
        }


def _short_em_run(X, means_init, random_state: int, max_iter: int, tol: float):
    mixture = GaussianMixture(
        n_components=2,
        covariance_type="full",
        max_iter=1,
        tol=0.0,
        warm_start=True,
        means_init=means_init,
        random_state=random_state,
    )
    trace: List[float] = []
    converged = False
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        for _ in range(max_iter):
            mixture.fit(X)
            trace.append(float(mixture.score(X)) * X.shape[0])
            if len(trace) > 1 and trace[-1] - trace[-2] < tol:
                converged = True
                break
    return mixture, trace, converged


def fit_gmm2(
    draws: ArrayLike,
    seed: int = 0,
    n_runs: int = 10,
    max_iter: int = 50,
    tol: float = 1e-4,
) -> GmmFit:
    """Best of ``n_runs`` short EM runs started from random quantile pairs."""
    X = np.sort(np.asarray(draws, dtype=float).ravel()).reshape(-1, 1)
    if X.shape[0] < 20:
        raise ConfigError(f"need at least 20 draws for a mixture fit, got {X.shape[0]}")
    span = float(np.ptp(X))
    if span == 0:
        raise DegenerateDensityError("all draws are identical")
    rng = np.random.default_rng(seed)

    best = None
    for _ in range(n_runs):
        levels = np.sort(rng.uniform(0.05, 0.95, size=2))
        means_init = np.quantile(X[:, 0], levels).reshape(2, 1)
        if means_init[1, 0] - means_init[0, 0] < 1e-6 * span:
            means_init[1, 0] += 1e-3 * span
        mixture, trace, converged = _short_em_run(
            X, means_init, int(rng.integers(2**31 - 1)), max_iter, tol
        )
        sds = np.sqrt(mixture.covariances_.ravel())
        if sds.min() < 1e-6 * span:
            continue
        if best is None or trace[-1] > best[1][-1]:
            best = (mixture, trace, converged)

    if best is None:
        return GmmFit(
            weights=np.array([1.0, 0.0]),
            means=np.full(2, float(np.mean(X))),
            sds=np.full(2, float(np.std(X))),
            loglik=float("-inf"),
            converged=False,
        )

    mixture, trace, converged = best
    order = np.argsort(mixture.means_.ravel())
    means = mixture.means_.ravel()[order]
    sds = np.sqrt(mixture.covariances_.ravel())[order]
    weights = mixture.weights_[order]
    # Ashman's D below 2 means the two components do not separate
    unimodal = bool(abs(means[1] - means[0]) * np.sqrt(2.0) / np.sqrt(np.sum(sds**2)) < 2.0)
    return GmmFit(
        weights=weights,
        means=means,
        sds=sds,
        loglik=trace[-1],
        converged=converged and not unimodal,
        unimodal=unimodal,
        loglik_trace=trace,
    )


def average_gmm_fits(fits: Sequence[GmmFit], z: float = 1.96) -> Dict:
    """Across-subject averages of component means and standard deviations.

    ``intervals`` holds the group latency interval mean +/- z * sd for each
    component, built from the averaged mean and sd.
    """
    if not fits:
        return {"subjects": 0, "means": [], "sds": [], "intervals": [], "non_converged": 0}
    means = np.array([f.means for f in fits]).mean(axis=0)
    sds = np.array([f.sds for f in fits]).mean(axis=0)
    return {
        "subjects": len(fits),
        "means": means.tolist(),
        "sds": sds.tolist(),
        "sd_averaging": "mean of per-subject standard deviations",
        "intervals": [[float(m - z * s), float(m + z * s)] for m, s in zip(means, sds)],
        "non_converged": int(sum(not f.converged for f in fits)),
    }


@dataclass
class CurveEstimate:
    grid: NDArray[np.float64]
    mean: NDArray[np.float64]
    lower: NDArray[np.float64]
    upper: NDArray[np.float64]
    paths: Optional[NDArray[np.float64]] = None
    skipped: int = 0
    jitter: float = 0.0

    @property
    def width(self) -> NDArray[np.float64]:
        return self.upper - self.lower

    def at(self, points: ArrayLike) -> List[Dict[str, float]]:
        """Mean and band interpolated at ``points`` (e.g. HPD modes)."""
        points = np.atleast_1d(np.asarray(points, dtype=float))
        values = [np.interp(points, self.grid, band) for band in (self.mean, self.lower, self.upper)]
        return [
            {"t": float(p), "mean": float(m), "lower": float(lo), "upper": float(hi)}
            for p, m, lo, hi in zip(points, *values)
        ]


def curve_bands(
    draws: PosteriorDraws,
    data: Dataset,
    grid: ArrayLike,
    rng: Optional[np.random.Generator] = None,
    max_paths: int = 500,
    keep_paths: bool = False,
    logger: Optional[logging.Logger] = None,
) -> CurveEstimate:
    """Pointwise mean and 95% band from one conditional path per (thinned) posterior draw.

    Args:
        draws: posterior draws with the fitted theta.
        data: the centred series the draws came from.
        grid: points to evaluate the curve at.
        rng: stream for the path draws.
        max_paths: at most this many evenly spaced draws are used.
        keep_paths: keep the simulated paths on the result.
        logger: receives the skipped-draw warning.

    Returns:
        The curve on ``grid`` with the offset added back, the number of draws
        skipped because their covariance could not be factorised, and the
        largest Cholesky jitter the kept draws needed.

    Raises:
        McemError: more than 1% of the draws were skipped.
    """
    logger = logger or logging.getLogger(__name__)
    rng = rng if rng is not None else np.random.default_rng(0)
    grid = np.asarray(grid, dtype=float).ravel()
    picks = np.unique(np.linspace(0, len(draws) - 1, min(len(draws), max_paths)).round().astype(int))

    paths, skipped, jitter = [], 0, 0.0
    for d in picks:
        try:
            predictive = posterior_predictive(
                data.y, data.x, draws.t[d], draws.sigma_sq[d], draws.theta_star, grid
            )
        except DgpError:
            skipped += 1
            continue
        jitter = max(jitter, predictive.jitter)
        paths.append(predictive.sample(rng))
    if skipped:
        logger.warning(f"skipped {skipped} of {picks.size} draws while simulating curves")
    if skipped > 0.01 * picks.size:
        raise McemError(f"{skipped} of {picks.size} curve draws failed to factorise")

    paths = np.asarray(paths) + data.offset
    mean = paths.mean(axis=0)
    lower, upper = np.quantile(paths, [0.025, 0.975], axis=0)
    return CurveEstimate(
        grid=grid,
        mean=mean,
        # a skewed path sample can put the mean outside its own 95% quantiles
        lower=np.minimum(lower, mean),
        upper=np.maximum(upper, mean),
        paths=paths if keep_paths else None,
        skipped=skipped,
        jitter=jitter,
    )
