"""Derivative-constrained GP prior, marginal likelihood and posterior predictive."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import linalg

from dgp_mcem.errors import ConfigError, DgpError, NotPositiveDefiniteError
from dgp_mcem.kernel import (
    SEPARATION_FACTOR,
    KernelParams,
    build_cov_blocks,
    jittered_cholesky,
    se_cov,
    se_cov01,
    se_cov11,
)

__all__ = [
    "DgpPrior",
    "PredictiveDistribution",
    "LikelihoodTerms",
    "Theta",
    "center",
    "constrained_moments",
    "sample_dgp_paths",
    "marginal_cov_A",
    "likelihood_terms",
    "log_marginal_likelihood",
    "batch_likelihood_terms",
    "posterior_predictive",
]

LOG_2PI = float(np.log(2.0 * np.pi))
# batched K11 solves above this condition number go through the jittered path
BATCH_COND_LIMIT = 1e12

# (tau0, h) with tau = tau0 * sigma
Theta = Tuple[float, float]


def _vector(values: ArrayLike) -> NDArray[np.float64]:
    return np.atleast_1d(np.asarray(values, dtype=float)).ravel()


def center(y: ArrayLike) -> Tuple[NDArray[np.float64], float]:
    y = _vector(y)
    offset = float(np.mean(y))
    return y - offset, offset


@dataclass
class DgpPrior:
    mean: float
    params: KernelParams
    t: NDArray[np.float64] = field(default_factory=lambda: np.empty(0))

    def __post_init__(self):
        self.t = _vector(self.t)


def _constrained_cov(
    x: NDArray[np.float64],
    t: NDArray[np.float64],
    params: KernelParams,
    logger: Optional[logging.Logger] = None,
) -> Tuple[NDArray[np.float64], float]:
    blocks = build_cov_blocks(x, t, params)
    if t.size == 0:
        return blocks.K, 0.0
    factor = jittered_cholesky(blocks.K11, logger=logger)
    cov = blocks.K - blocks.K01 @ factor.solve(blocks.K10)
    return 0.5 * (cov + cov.T), factor.jitter


def constrained_moments(
    prior: DgpPrior, x: ArrayLike, logger: Optional[logging.Logger] = None
) -> Tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Mean and covariance of f(x) given f'(t) = 0.

    The mean is constant, so its derivative vanishes and the conditional mean is
    the prior mean itself.

    Args:
        prior: constant mean, kernel parameters and constraint points.
        x: inputs to evaluate at.
        logger: receives the jitter warning when K11 needs one.

    Returns:
        ``(mean, cov)`` with shapes (n,) and (n, n).
    """
    x = _vector(x)
    cov, _ = _constrained_cov(x, prior.t, prior.params, logger)
    return np.full(x.size, float(prior.mean)), cov


def sample_dgp_paths(
    prior: DgpPrior, grid: ArrayLike, count: int, rng: np.random.Generator
) -> NDArray[np.float64]:
    """Draw ``count`` prior sample paths on ``grid``; returns shape (count, len(grid))."""
    grid = _vector(grid)
    if count < 1:
        raise ConfigError(f"count must be at least 1, got {count}")
    if grid.size > 1 and np.any(np.diff(grid) <= 0):
        raise ConfigError("grid must be strictly increasing")
    mean, cov = constrained_moments(prior, grid)
    # eigh tolerates the rank deficiency of a dense SE grid without adding jitter noise
    return rng.multivariate_normal(mean, cov, size=count, method="eigh", check_valid="ignore")


def _marginal_cov(
    t: ArrayLike, theta: Theta, x: NDArray[np.float64], logger: Optional[logging.Logger] = None
) -> Tuple[NDArray[np.float64], float]:
    tau0, h = theta
    unit_cov, jitter = _constrained_cov(x, _vector(t), KernelParams.unit(h), logger)
    return tau0 * tau0 * unit_cov + np.eye(x.size), jitter


def marginal_cov_A(t: ArrayLike, theta: Theta, x: ArrayLike) -> NDArray[np.float64]:
    """A(t) = tau0^2 * K_c(t) + I, with K_c the unit-variance constrained covariance."""
    A, _ = _marginal_cov(t, theta, _vector(x))
    return A


@dataclass
class LikelihoodTerms:
    """Sufficient pieces of log N(y; 0, sigma^2 A(t)) that do not depend on sigma^2.

    ``jitter`` is the largest relative jitter either Cholesky (K11 or A) needed.
    """

    logdet: float
    quad: float
    n: int
    jitter: float = 0.0

    def loglik(self, sigma_sq: float) -> float:
        return (
            -0.5 * self.n * (LOG_2PI + np.log(sigma_sq))
            - 0.5 * self.logdet
            - 0.5 * self.quad / sigma_sq
        )


def likelihood_terms(
    y: ArrayLike,
    t: ArrayLike,
    theta: Theta,
    x: ArrayLike,
    logger: Optional[logging.Logger] = None,
) -> LikelihoodTerms:
    y = _vector(y)
    x = _vector(x)
    if y.size != x.size:
        raise ConfigError(f"y and x lengths differ ({y.size} vs {x.size})")
    A, k11_jitter = _marginal_cov(t, theta, x, logger)
    factor = jittered_cholesky(A, logger=logger)
    z = linalg.solve_triangular(factor.lower, y, lower=True, check_finite=False)
    return LikelihoodTerms(
        logdet=factor.logdet(), quad=float(z @ z), n=y.size, jitter=max(k11_jitter, factor.jitter)
    )


def log_marginal_likelihood(
    y: ArrayLike, t: ArrayLike, sigma_sq: float, theta: Theta, x: ArrayLike
) -> float:
    """log N(y; 0, sigma^2 A(t))."""
    if not sigma_sq > 0:
        raise ConfigError(f"sigma_sq must be positive, got {sigma_sq}")
    value = likelihood_terms(y, t, theta, x).loglik(sigma_sq)
    if not np.isfinite(value):
        raise DgpError("log marginal likelihood is not finite")
    return float(value)


def batch_likelihood_terms(
    y: ArrayLike,
    ts: ArrayLike,
    theta: Theta,
    x: ArrayLike,
    logger: Optional[logging.Logger] = None,
) -> Tuple[NDArray[np.float64], NDArray[np.float64]]:
    """log det A(t_j) and y' A(t_j)^-1 y for every row t_j of ``ts``.

    Well-conditioned rows are solved together; rows with an ill-conditioned K11
    fall back to ``likelihood_terms`` so they see the same jitter ladder as the
    sampler.

    Args:
        y: centred observations, shape (n,).
        ts: constraint points, shape (B, m) or (B,) for m = 1.
        theta: ``(tau0, h)``.
        x: inputs, shape (n,).
        logger: receives jitter warnings from the fallback rows.

    Returns:
        ``(logdet, quad)``, each of shape (B,). Rows whose constraint points
        violate the separation rule, or whose A cannot be factorised, are NaN.
    """
    logger = logger or logging.getLogger(__name__)
    y = _vector(y)
    x = _vector(x)
    tau0, h = theta
    ts = np.asarray(ts, dtype=float)
    if ts.ndim == 1:
        ts = ts[:, None]
    B, m = ts.shape
    n = x.size
    unit = KernelParams.unit(h)

    K = se_cov(x[:, None], x[None, :], unit)
    bad = np.zeros(B, dtype=bool)
    exact = np.zeros(B, dtype=bool)
    if m == 0:
        Kc = np.broadcast_to(K, (B, n, n))
    else:
        K01 = se_cov01(x[None, :, None], ts[:, None, :], unit)
        K11 = se_cov11(ts[:, :, None], ts[:, None, :], unit)
        if m > 1:
            gaps = np.diff(np.sort(ts, axis=1), axis=1).min(axis=1)
            bad = gaps < SEPARATION_FACTOR * h
            K11[bad] = np.eye(m) / (h * h)
            exact = ~bad & (np.linalg.cond(K11) > BATCH_COND_LIMIT)
            K11[exact] = np.eye(m) / (h * h)
        Kc = K[None, :, :] - K01 @ np.linalg.solve(K11, np.swapaxes(K01, 1, 2))
    A = tau0 * tau0 * Kc + np.eye(n)[None, :, :]
    A = 0.5 * (A + np.swapaxes(A, 1, 2))

    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        L = np.full_like(A, np.nan)
        for j in range(B):
            try:
                L[j] = jittered_cholesky(A[j], logger=logger).lower
            except NotPositiveDefiniteError:
                bad[j] = True
    with np.errstate(divide="ignore", invalid="ignore"):
        logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=1, axis2=2)), axis=1)
    rhs = np.broadcast_to(y[:, None], (B, n, 1))
    z = np.linalg.solve(np.nan_to_num(L, nan=1.0), rhs)[..., 0]
    quad = np.sum(z * z, axis=1)
    for j in np.flatnonzero(exact):
        try:
            terms = likelihood_terms(y, ts[j], theta, x, logger=logger)
            logdet[j], quad[j] = terms.logdet, terms.quad
        except DgpError:
            bad[j] = True
    logdet[bad] = np.nan
    quad[bad] = np.nan
    return logdet, quad


@dataclass
class PredictiveDistribution:
    grid: NDArray[np.float64]
    mean: NDArray[np.float64]
    cov: NDArray[np.float64]
    jitter: float = 0.0

    @property
    def variance(self) -> NDArray[np.float64]:
        return np.clip(np.diag(self.cov), 0.0, None)

    def sample(self, rng: np.random.Generator, size: Optional[int] = None) -> NDArray[np.float64]:
        return rng.multivariate_normal(
            self.mean, self.cov, size=size, method="eigh", check_valid="ignore"
        )


def posterior_predictive(
    y: ArrayLike,
    x: ArrayLike,
    t: ArrayLike,
    sigma_sq: float,
    theta: Theta,
    grid: ArrayLike,
    logger: Optional[logging.Logger] = None,
) -> PredictiveDistribution:
    """f(grid) given the noisy observations y and f'(t) = 0 jointly.

    ``y`` is expected centred; the caller adds the offset back.
    """
    y = _vector(y)
    x = _vector(x)
    t = _vector(t)
    grid = _vector(grid)
    if not np.all(np.isfinite(grid)):
        raise ConfigError("prediction grid must be finite")
    tau0, h = theta
    p = KernelParams.from_theta(tau0, h, sigma_sq)
    blocks = build_cov_blocks(x, t, p)

    G = blocks.stacked()
    G[: x.size, : x.size] += sigma_sq * np.eye(x.size)
    factor = jittered_cholesky(G, logger=logger)

    C = np.hstack(
        [
            se_cov(grid[:, None], x[None, :], p),
            np.reshape(se_cov01(grid[:, None], t[None, :], p), (grid.size, t.size)),
        ]
    )
    rhs = np.concatenate([y, np.zeros(t.size)])
    mean = C @ factor.solve(rhs)
    cov = se_cov(grid[:, None], grid[None, :], p) - C @ factor.solve(C.T)
    return PredictiveDistribution(
        grid=grid, mean=mean, cov=0.5 * (cov + cov.T), jitter=factor.jitter
    )
