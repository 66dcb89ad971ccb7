"""Squared-exponential covariance, its derivative kernels and the joint block assembly.

All functions broadcast over numpy arrays, so ``se_cov(x[:, None], x[None, :], p)``
gives the full Gram matrix.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import linalg

from dgp_mcem.errors import (
    DegenerateConstraintError,
    KernelInputError,
    NotPositiveDefiniteError,
)

__all__ = [
    "KernelParams",
    "CovBlocks",
    "JitteredFactor",
    "JITTER_LADDER",
    "SEPARATION_FACTOR",
    "se_cov",
    "se_cov01",
    "se_cov10",
    "se_cov11",
    "check_separation",
    "build_cov_blocks",
    "jittered_cholesky",
]

JITTER_LADDER = (0.0, 1e-10, 1e-8, 1e-6)
# constraint points closer than SEPARATION_FACTOR * h are rejected
SEPARATION_FACTOR = 1e-3

Scalar = Union[float, NDArray[np.float64]]


@dataclass(frozen=True)
class KernelParams:
    tau_sq: float
    h: float
    tau0: Optional[float] = None

    def __post_init__(self):
        for name in ("tau_sq", "h"):
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0:
                raise KernelInputError(f"{name} must be a positive finite number, got {value}")
        if self.tau0 is not None and (not np.isfinite(self.tau0) or self.tau0 <= 0):
            raise KernelInputError(f"tau0 must be a positive finite number, got {self.tau0}")

    @classmethod
    def from_theta(cls, tau0: float, h: float, sigma_sq: float) -> "KernelParams":
        """Build (tau^2, h) from the ratio parameterisation tau = tau0 * sigma."""
        if not np.isfinite(sigma_sq) or sigma_sq <= 0:
            raise KernelInputError(f"sigma_sq must be positive, got {sigma_sq}")
        return cls(tau_sq=tau0 * tau0 * sigma_sq, h=h, tau0=tau0)

    @classmethod
    def unit(cls, h: float) -> "KernelParams":
        return cls(tau_sq=1.0, h=h)


def _finite(*values: ArrayLike) -> list:
    arrays = [np.asarray(v, dtype=float) for v in values]
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise KernelInputError("kernel inputs must be finite")
    return arrays


def se_cov(xi: ArrayLike, xj: ArrayLike, p: KernelParams) -> Scalar:
    xi, xj = _finite(xi, xj)
    d = xi - xj
    return p.tau_sq * np.exp(-0.5 * d * d / (p.h * p.h))


def se_cov01(x: ArrayLike, t: ArrayLike, p: KernelParams) -> Scalar:
    """Cov(f(x), f'(t))."""
    x, t = _finite(x, t)
    d = x - t
    h_sq = p.h * p.h
    return p.tau_sq * np.exp(-0.5 * d * d / h_sq) * d / h_sq


def se_cov10(t: ArrayLike, x: ArrayLike, p: KernelParams) -> Scalar:
    """Cov(f'(t), f(x)); identical to se_cov01(x, t)."""
    return se_cov01(x, t, p)


def se_cov11(ti: ArrayLike, tj: ArrayLike, p: KernelParams) -> Scalar:
    """Cov(f'(ti), f'(tj))."""
    ti, tj = _finite(ti, tj)
    d = ti - tj
    h_sq = p.h * p.h
    return p.tau_sq * np.exp(-0.5 * d * d / h_sq) * (1.0 - d * d / h_sq) / h_sq


@dataclass
class CovBlocks:
    K: NDArray[np.float64]
    K01: NDArray[np.float64]
    K10: NDArray[np.float64]
    K11: NDArray[np.float64]

    def stacked(self) -> NDArray[np.float64]:
        return np.block([[self.K, self.K01], [self.K10, self.K11]])


def check_separation(t: ArrayLike, h: float) -> None:
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if t.size < 2:
        return
    gaps = np.diff(np.sort(t))
    min_gap = float(gaps.min())
    if min_gap < SEPARATION_FACTOR * h:
        raise DegenerateConstraintError(
            f"constraint points closer than {SEPARATION_FACTOR * h:.3g} (gap {min_gap:.3g})",
            min_gap=min_gap,
        )


def build_cov_blocks(x: ArrayLike, t: ArrayLike, p: KernelParams) -> CovBlocks:
    """Covariance of (f(x), f'(t)) under the SE kernel.

    An empty ``t`` is allowed and yields zero-width derivative blocks (plain GP).
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if x.size == 0:
        raise KernelInputError("x must contain at least one input")
    check_separation(t, p.h)
    K = se_cov(x[:, None], x[None, :], p)
    K01 = se_cov01(x[:, None], t[None, :], p).reshape(x.size, t.size)
    K11 = se_cov11(t[:, None], t[None, :], p).reshape(t.size, t.size)
    return CovBlocks(K=K, K01=K01, K10=K01.T.copy(), K11=K11)


@dataclass
class JitteredFactor:
    lower: NDArray[np.float64]
    jitter: float

    def solve(self, b: ArrayLike) -> NDArray[np.float64]:
        return linalg.cho_solve((self.lower, True), np.asarray(b, dtype=float), check_finite=False)

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.lower))))


def jittered_cholesky(M: ArrayLike, logger: Optional[logging.Logger] = None) -> JitteredFactor:
    """Cholesky of M + eta * mean(diag(M)) * I, walking eta up JITTER_LADDER."""
    logger = logger or logging.getLogger(__name__)
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise KernelInputError(f"expected a square matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise KernelInputError("matrix has non-finite entries")
    scale = float(np.mean(np.diag(M))) if M.size else 1.0
    if scale <= 0:
        scale = 1.0
    if not np.allclose(M, M.T, rtol=1e-10, atol=1e-12 * scale):
        raise KernelInputError("matrix is not symmetric")

    identity = np.eye(M.shape[0])
    for eta in JITTER_LADDER:
        try:
            lower = linalg.cholesky(M + eta * scale * identity, lower=True, check_finite=False)
        except linalg.LinAlgError:
            continue
        if eta > 0:
            logger.warning(f"Cholesky needed jitter eta={eta:g}")
        return JitteredFactor(lower=lower, jitter=eta)
    raise NotPositiveDefiniteError(
        f"matrix not positive definite even with jitter {JITTER_LADDER[-1]:g}",
        jitter=JITTER_LADDER[-1],
    )
