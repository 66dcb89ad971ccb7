"""Monte Carlo EM for derivative-constrained GP regression.

The E-step runs an independence Metropolis-Hastings sampler for the stationary
points t and a Gibbs update for sigma^2; the M-step maximises the averaged log
marginal likelihood over theta = (tau0, h) in log space.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from numpy.typing import ArrayLike, NDArray
from scipy import optimize, stats

from dgp_mcem.dgp import (
    LOG_2PI,
    LikelihoodTerms,
    Theta,
    batch_likelihood_terms,
    center,
    likelihood_terms,
)
from dgp_mcem.errors import ConfigError, DgpError, McemError

__all__ = [
    "TPrior",
    "McemConfig",
    "Dataset",
    "ChainState",
    "McemState",
    "EStepChain",
    "MhStep",
    "MStepResult",
    "PosteriorDraws",
    "mh_step_t",
    "sigma_sq_conditional",
    "gibbs_sigma_sq",
    "e_step",
    "q_hat",
    "m_step",
    "moment_matched_ig",
    "run_mcem",
    "run_mcem_multiple",
    "run_mcem_pooled",
]

MODES = ("single", "multiple", "oracle")

# stream keys; every random stream is SeedSequence([seed, subject, phase, ...])
_PRIOR, _ESTEP, _MSTEP, _RESTART, _FINAL = range(5)


def _stream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(k) for k in keys]]))


def _as_rows(values: ArrayLike, count: int) -> NDArray[np.float64]:
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return np.empty((count, 0))
    return values.reshape(count, -1)


@dataclass(frozen=True)
class TPrior:
    kind: str = "uniform"
    domain: Tuple[float, float] = (0.0, 1.0)
    beta_shapes: Tuple[float, float] = (3.0, 3.0)

    def __post_init__(self):
        if self.kind not in ("uniform", "beta"):
            raise ConfigError(f"unknown prior kind '{self.kind}'")
        a, b = self.domain
        if not (np.isfinite(a) and np.isfinite(b) and a < b):
            raise ConfigError(f"prior domain must satisfy a < b, got {self.domain}")
        if self.kind == "beta" and min(self.beta_shapes) <= 0:
            raise ConfigError(f"beta shapes must be positive, got {self.beta_shapes}")

    @classmethod
    def parse(cls, text: str, domain: Tuple[float, float]) -> "TPrior":
        """'uniform' or 'beta:<alpha>,<beta>'."""
        text = text.strip().lower()
        if text == "uniform":
            return cls("uniform", tuple(domain))
        if text.startswith("beta"):
            _, _, shapes = text.partition(":")
            try:
                alpha, beta = (float(v) for v in (shapes or "3,3").split(","))
            except ValueError:
                raise ConfigError(f"cannot parse beta prior '{text}'")
            return cls("beta", tuple(domain), (alpha, beta))
        raise ConfigError(f"cannot parse prior '{text}'")

    def restrict(self, interval: Tuple[float, float]) -> "TPrior":
        return replace(self, domain=tuple(interval))

    def logpdf(self, t: float) -> float:
        a, b = self.domain
        if not a <= t <= b:
            return -np.inf
        if self.kind == "uniform":
            return -float(np.log(b - a))
        alpha, beta = self.beta_shapes
        return float(stats.beta.logpdf((t - a) / (b - a), alpha, beta) - np.log(b - a))

    def sample(self, rng: np.random.Generator) -> float:
        a, b = self.domain
        if self.kind == "uniform":
            return float(rng.uniform(a, b))
        return float(a + (b - a) * rng.beta(*self.beta_shapes))

    def propose(self, rng: np.random.Generator) -> float:
        # the proposal is uniform on the domain for both prior kinds
        a, b = self.domain
        return float(rng.uniform(a, b))


@dataclass
class McemConfig:
    D: int = 2000
    J: int = 200
    tol: float = 1e-4
    a_sigma: float = 0.5
    b_sigma: float = 0.5
    t_prior: TPrior = field(default_factory=TPrior)
    mode: str = "single"
    intervals: Tuple[Tuple[float, float], ...] = ()
    oracle_t: Tuple[float, ...] = ()
    max_iter: int = 100
    theta_bounds: Optional[Tuple[Tuple[float, float], Tuple[float, float]]] = None
    theta_init: Optional[Tuple[float, float]] = None
    final_draws: int = 4000
    burn_in: int = 1000
    thin: int = 2
    seed: int = 0
    common_random_numbers: bool = True
    optimizer_maxiter: int = 400

    def __post_init__(self):
        self.intervals = tuple(tuple(float(v) for v in iv) for iv in self.intervals)
        self.oracle_t = tuple(float(v) for v in self.oracle_t)
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got '{self.mode}'")
        if not 1 <= self.J < self.D:
            raise ConfigError(f"need 1 <= J < D, got J={self.J}, D={self.D}")
        if not self.tol > 0:
            raise ConfigError("tol must be positive")
        if min(self.a_sigma, self.b_sigma) <= 0:
            raise ConfigError("inverse-gamma prior parameters must be positive")
        if self.max_iter < 1 or self.final_draws < 1 or self.thin < 1 or self.burn_in < 0:
            raise ConfigError("max_iter, final_draws and thin must be >= 1, burn_in >= 0")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.mode == "multiple":
            if not self.intervals:
                raise ConfigError("multiple mode needs at least one sub-interval")
            for lo, hi in self.intervals:
                if not lo < hi:
                    raise ConfigError(f"sub-interval ({lo}, {hi}) is empty")
            for (_, hi), (lo, _) in zip(self.intervals, self.intervals[1:]):
                if lo < hi:
                    raise ConfigError("sub-intervals must be disjoint and ordered")

    def coordinate_priors(self) -> List[TPrior]:
        if self.mode == "single":
            return [self.t_prior]
        if self.mode == "multiple":
            return [self.t_prior.restrict(iv) for iv in self.intervals]
        return []

    def resolved_bounds(self, x: NDArray[np.float64]) -> Tuple[Tuple[float, float], Tuple[float, float]]:
        if self.theta_bounds is not None:
            return self.theta_bounds
        span = float(np.ptp(x))
        return (-5.0, 5.0), (float(np.log(0.01 * span)), float(np.log(10.0 * span)))

    def resolved_theta_init(self, x: NDArray[np.float64]) -> Theta:
        theta = self.theta_init or (1.0, float(np.ptp(x)) / 10.0)
        return _clip_theta(theta, self.resolved_bounds(x))

    def to_dict(self) -> Dict:
        return asdict(self)


def _clip_theta(theta: Sequence[float], bounds) -> Theta:
    phi = np.log(np.asarray(theta, dtype=float))
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    tau0, h = np.exp(np.clip(phi, lo, hi))
    return float(tau0), float(h)


@dataclass
class Dataset:
    """Observations with y centred; ``offset`` is the removed sample mean."""

    x: NDArray[np.float64]
    y: NDArray[np.float64]
    offset: float = 0.0
    label: str = ""

    @classmethod
    def from_arrays(cls, x: ArrayLike, y: ArrayLike, label: str = "") -> "Dataset":
        x = np.asarray(x, dtype=float).ravel()
        y = np.asarray(y, dtype=float).ravel()
        if x.size != y.size:
            raise ConfigError(f"x and y lengths differ ({x.size} vs {y.size})")
        if x.size < 3:
            raise ConfigError("need at least 3 observations")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ConfigError("observations must be finite")
        yc, offset = center(y)
        return cls(x=x, y=yc, offset=offset, label=label)

    @property
    def n(self) -> int:
        return self.x.size


@dataclass
class ChainState:
    t: NDArray[np.float64]
    sigma_sq: float
    terms: Optional[LikelihoodTerms] = None
    n_proposed: int = 0
    n_accepted: int = 0
    n_failed: int = 0
    max_jitter: float = 0.0

    @classmethod
    def initial(cls, config: McemConfig, data: Dataset) -> "ChainState":
        if config.mode == "oracle":
            t = np.asarray(config.oracle_t, dtype=float)
        else:
            t = np.array([0.5 * (p.domain[0] + p.domain[1]) for p in config.coordinate_priors()])
        return cls(t=t, sigma_sq=float(np.var(data.y)) or 1.0)


@dataclass
class McemState:
    theta_hat: Theta
    chains: List[ChainState]
    iteration: int = 1
    theta_trace: List[Theta] = field(default_factory=list)
    converged: bool = False
    optimizer_flags: int = 0

    @property
    def last_t(self) -> NDArray[np.float64]:
        return self.chains[0].t

    @property
    def last_sigma_sq(self) -> float:
        return self.chains[0].sigma_sq

    @property
    def accept_rate(self) -> float:
        proposed = sum(c.n_proposed for c in self.chains)
        accepted = sum(c.n_accepted for c in self.chains)
        return accepted / proposed if proposed else 0.0


@dataclass
class EStepChain:
    t: NDArray[np.float64]
    sigma_sq: NDArray[np.float64]
    n_proposed: int = 0
    n_accepted: int = 0
    n_failed: int = 0

    def __len__(self) -> int:
        return self.sigma_sq.size


@dataclass
class PosteriorDraws:
    t: NDArray[np.float64]
    sigma_sq: NDArray[np.float64]
    theta_star: Theta
    metadata: Dict = field(default_factory=dict)

    def __post_init__(self):
        self.sigma_sq = np.asarray(self.sigma_sq, dtype=float).ravel()
        self.t = _as_rows(self.t, self.sigma_sq.size)
        if np.any(self.sigma_sq <= 0):
            raise McemError("sigma_sq draws must be positive")

    def __len__(self) -> int:
        return self.sigma_sq.size

    @property
    def t_pooled(self) -> NDArray[np.float64]:
        """All coordinates of t flattened into one sample."""
        return self.t.ravel()

    def to_frame(self) -> pd.DataFrame:
        columns = {f"t{k + 1}": self.t[:, k] for k in range(self.t.shape[1])}
        columns["sigma_sq"] = self.sigma_sq
        return pd.DataFrame(columns)


@dataclass
class MhStep:
    t: NDArray[np.float64]
    accepted: bool
    terms: LikelihoodTerms
    failed: bool = False


def mh_step_t(
    current_t: ArrayLike,
    sigma_sq: float,
    theta: Theta,
    data: Dataset,
    prior: TPrior,
    rng: np.random.Generator,
    coordinate: int = 0,
    current_terms: Optional[LikelihoodTerms] = None,
) -> MhStep:
    """One independence Metropolis-Hastings update of t[coordinate].

    A proposal whose likelihood cannot be evaluated is rejected and reported
    through ``failed``.
    """
    current_t = np.atleast_1d(np.asarray(current_t, dtype=float)).copy()
    if current_terms is None:
        current_terms = likelihood_terms(data.y, current_t, theta, data.x)
    proposal = current_t.copy()
    proposal[coordinate] = prior.propose(rng)
    log_u = np.log(rng.uniform())

    log_prior_ratio = prior.logpdf(proposal[coordinate]) - prior.logpdf(current_t[coordinate])
    if log_prior_ratio == -np.inf:
        return MhStep(current_t, False, current_terms)
    try:
        proposal_terms = likelihood_terms(data.y, proposal, theta, data.x)
    except DgpError:
        return MhStep(current_t, False, current_terms, failed=True)
    log_ratio = (
        proposal_terms.loglik(sigma_sq) - current_terms.loglik(sigma_sq) + log_prior_ratio
    )
    if log_u < log_ratio:
        return MhStep(proposal, True, proposal_terms)
    return MhStep(current_t, False, current_terms)


def sigma_sq_conditional(
    terms: LikelihoodTerms, a_sigma: float, b_sigma: float
) -> Tuple[float, float]:
    """(shape, scale) of the inverse-gamma full conditional of sigma^2."""
    return terms.n / 2.0 + a_sigma, 0.5 * terms.quad + b_sigma


def gibbs_sigma_sq(
    t: ArrayLike,
    theta: Theta,
    data: Dataset,
    a_sigma: float,
    b_sigma: float,
    rng: np.random.Generator,
    terms: Optional[LikelihoodTerms] = None,
) -> float:
    if terms is None:
        terms = likelihood_terms(data.y, t, theta, data.x)
    shape, scale = sigma_sq_conditional(terms, a_sigma, b_sigma)
    return float(stats.invgamma.rvs(shape, scale=scale, random_state=rng))


def _prior_draw(
    priors: Sequence[TPrior], chain: ChainState, theta: Theta, data: Dataset, rng, max_tries: int = 100
) -> Tuple[NDArray[np.float64], LikelihoodTerms, int]:
    failures = 0
    for _ in range(max_tries):
        t = np.array([p.sample(rng) for p in priors]) if priors else chain.t
        try:
            return t, likelihood_terms(data.y, t, theta, data.x), failures
        except DgpError:
            failures += 1
    raise McemError(f"no valid prior draw of t in {max_tries} attempts")


def _sample_chain(
    chain: ChainState,
    theta: Theta,
    config: McemConfig,
    data: Dataset,
    rng: np.random.Generator,
    length: int,
    from_prior: bool,
) -> EStepChain:
    priors = config.coordinate_priors()
    m = chain.t.size
    t_out = np.empty((length, m))
    s_out = np.empty(length)
    proposed = accepted = failed = 0

    if not from_prior or not priors:
        chain.terms = likelihood_terms(data.y, chain.t, theta, data.x)
    for d in range(length):
        if from_prior and priors:
            chain.t, chain.terms, misses = _prior_draw(priors, chain, theta, data, rng)
            failed += misses
        else:
            for k, prior in enumerate(priors):
                step = mh_step_t(
                    chain.t, chain.sigma_sq, theta, data, prior, rng,
                    coordinate=k, current_terms=chain.terms,
                )
                proposed += 1
                accepted += step.accepted
                failed += step.failed
                chain.t, chain.terms = step.t, step.terms
        chain.max_jitter = max(chain.max_jitter, chain.terms.jitter)
        chain.sigma_sq = gibbs_sigma_sq(
            chain.t, theta, data, config.a_sigma, config.b_sigma, rng, terms=chain.terms
        )
        t_out[d] = chain.t
        s_out[d] = chain.sigma_sq

    if proposed and failed == proposed:
        raise McemError("every Metropolis-Hastings proposal failed to factorise")
    if failed:
        logging.getLogger(__name__).warning(
            f"{failed} proposals for '{data.label}' failed to factorise and were rejected"
        )
    chain.n_proposed += proposed
    chain.n_accepted += accepted
    chain.n_failed += failed
    return EStepChain(t_out, s_out, proposed, accepted, failed)


def e_step(
    state: McemState,
    config: McemConfig,
    data: Dataset,
    rng: np.random.Generator,
    subject: int = 0,
) -> EStepChain:
    """D paired draws of (t, sigma^2) at the current theta.

    The first iteration draws t straight from its prior; later iterations run
    the Metropolis-within-Gibbs chain from where the previous one stopped.

    Args:
        state: current theta, iteration and one chain per subject.
        config: sampler settings; ``config.D`` is the chain length.
        data: the subject's centred observations.
        rng: stream for this subject and iteration.
        subject: which chain of ``state`` to advance.

    Returns:
        The draws with this step's proposal counts. The chain in ``state`` is
        left at the last draw.
    """
    return _sample_chain(
        state.chains[subject], state.theta_hat, config, data, rng,
        length=config.D, from_prior=state.iteration == 1,
    )


def q_hat(theta: Theta, t_draws: ArrayLike, sigma_draws: ArrayLike, data: Dataset) -> float:
    """Average log marginal likelihood over paired draws."""
    sigma_draws = np.asarray(sigma_draws, dtype=float).ravel()
    ts = _as_rows(t_draws, sigma_draws.size)
    if ts.shape[1] == 0:
        unique, inverse = ts[:1], np.zeros(sigma_draws.size, dtype=int)
    else:
        unique, inverse = np.unique(ts, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
    logdet, quad = batch_likelihood_terms(data.y, unique, theta, data.x)
    ll = (
        -0.5 * data.n * (LOG_2PI + np.log(sigma_draws))
        - 0.5 * logdet[inverse]
        - 0.5 * quad[inverse] / sigma_draws
    )
    if not np.all(np.isfinite(ll)):
        return -np.inf
    return float(np.mean(ll))


@dataclass
class MStepResult:
    theta: Theta
    q_value: float
    q_start: float
    optimizer_converged: bool


def _maximize(
    objective: Callable[[Theta], float],
    theta_current: Theta,
    bounds,
    rng: Optional[np.random.Generator],
    maxiter: int,
) -> MStepResult:
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    phi0 = np.clip(np.log(np.asarray(theta_current, dtype=float)), lo, hi)

    def negative(phi):
        value = objective(tuple(np.exp(np.clip(phi, lo, hi))))
        return -value if np.isfinite(value) else 1e300

    q_start = -negative(phi0)
    jitter = rng.normal(0.0, 0.25, size=2) if rng is not None else np.array([0.25, -0.25])
    starts = [phi0, np.clip(phi0 + jitter, lo, hi)]
    best, converged = None, True
    for start in starts:
        res = optimize.minimize(
            negative, start, method="Nelder-Mead", bounds=list(zip(lo, hi)),
            options={"xatol": 1e-7, "fatol": 1e-10, "maxiter": maxiter},
        )
        converged = converged and bool(res.success)
        if best is None or res.fun < best.fun:
            best = res

    if best.fun > -q_start:
        phi, q_value = phi0, q_start
    else:
        phi, q_value = np.clip(best.x, lo, hi), -best.fun
    tau0, h = np.exp(phi)
    return MStepResult((float(tau0), float(h)), float(q_value), float(q_start), converged)


def m_step(
    t_draws: Union[ArrayLike, Sequence[ArrayLike]],
    sigma_draws: Union[ArrayLike, Sequence[ArrayLike]],
    data: Union[Dataset, Sequence[Dataset]],
    theta_current: Theta,
    bounds,
    rng: Optional[np.random.Generator] = None,
    maxiter: int = 400,
) -> MStepResult:
    """argmax over theta of the averaged log marginal likelihood (Nelder-Mead in log space).

    With a sequence of datasets, ``t_draws`` and ``sigma_draws`` hold one
    entry per subject and the objective is the sum of the subjects' averages.
    """
    if isinstance(data, Dataset):
        samples = [(t_draws, sigma_draws, data)]
    else:
        samples = list(zip(t_draws, sigma_draws, data))
        if len(samples) != len(data):
            raise ConfigError("need one set of draws per subject")
    return _maximize(
        lambda theta: sum(q_hat(theta, t, s, d) for t, s, d in samples),
        theta_current, bounds, rng, maxiter,
    )


def moment_matched_ig(datasets: Sequence[Dataset], window: int = 5) -> Tuple[float, float]:
    """IG(a, b) whose mean and standard deviation both equal the pooled residual variance."""
    residuals = []
    for data in datasets:
        series = pd.Series(data.y)
        trend = series.rolling(window, center=True, min_periods=1).mean()
        residuals.append((series - trend).to_numpy())
    v = float(np.var(np.concatenate(residuals), ddof=1))
    if not v > 0:
        raise ConfigError("pooled residual variance is zero")
    # mean b/(a-1) = v and sd = mean  =>  a = 3, b = 2v
    return 3.0, 2.0 * v


def _key(config: McemConfig, iteration: int) -> Tuple[int, ...]:
    return () if config.common_random_numbers else (iteration,)


def _run_chains(
    config: McemConfig, datasets: Sequence[Dataset], logger: logging.Logger
) -> Tuple[List[PosteriorDraws], McemState]:
    x = datasets[0].x
    bounds = config.resolved_bounds(x)
    state = McemState(
        theta_hat=config.resolved_theta_init(x),
        chains=[ChainState.initial(config, data) for data in datasets],
    )
    state.theta_trace.append(state.theta_hat)
    logger.info(
        f"MCEM start: mode={config.mode} subjects={len(datasets)} n={x.size} "
        f"theta0=({state.theta_hat[0]:.4g}, {state.theta_hat[1]:.4g})"
    )

    for i in range(1, config.max_iter + 1):
        state.iteration = i
        t_picked, s_picked = [], []
        for s, data in enumerate(datasets):
            if i == 1:
                rng = _stream(config.seed, s, _PRIOR)
            else:
                rng = _stream(config.seed, s, _ESTEP, *_key(config, i))
            draws = e_step(state, config, data, rng, subject=s)
            pick = _stream(config.seed, s, _MSTEP, *_key(config, i)).choice(
                config.D, size=config.J, replace=False
            )
            t_picked.append(draws.t[pick])
            s_picked.append(draws.sigma_sq[pick])

        result = m_step(
            t_picked, s_picked, datasets, state.theta_hat, bounds,
            rng=_stream(config.seed, 0, _RESTART, *_key(config, i)),
            maxiter=config.optimizer_maxiter,
        )
        if not result.optimizer_converged:
            state.optimizer_flags += 1
            logger.warning(f"M-step optimizer hit its budget at iteration {i}")
        step = float(np.linalg.norm(np.subtract(result.theta, state.theta_hat)))
        state.theta_hat = result.theta
        state.theta_trace.append(result.theta)
        logger.info(
            f"MCEM iteration {i}: theta=({result.theta[0]:.6g}, {result.theta[1]:.6g}) "
            f"step={step:.3e} accept={state.accept_rate:.3f}"
        )
        if step < config.tol:
            state.converged = True
            break

    if not state.converged:
        logger.warning(f"MCEM did not converge within {config.max_iter} iterations")

    length = config.burn_in + config.final_draws * config.thin
    results = []
    for s, (chain, data) in enumerate(zip(state.chains, datasets)):
        final = _sample_chain(
            chain, state.theta_hat, config, data, _stream(config.seed, s, _FINAL),
            length, from_prior=False,
        )
        keep = slice(config.burn_in, None, config.thin)
        metadata = {
            "seed": config.seed,
            "subject_index": s,
            "label": data.label,
            "config": config.to_dict(),
            "converged": state.converged,
            "iterations": state.iteration,
            "acceptance_rate": final.n_accepted / final.n_proposed if final.n_proposed else None,
            "failed_proposals": chain.n_failed,
            "jitter": chain.max_jitter,
            "optimizer_flags": state.optimizer_flags,
            "theta_trace": [list(theta) for theta in state.theta_trace],
            "offset": data.offset,
        }
        results.append(
            PosteriorDraws(
                t=final.t[keep][: config.final_draws],
                sigma_sq=final.sigma_sq[keep][: config.final_draws],
                theta_star=state.theta_hat,
                metadata=metadata,
            )
        )
    return results, state


def run_mcem(
    config: McemConfig, data: Dataset, logger: Optional[logging.Logger] = None
) -> Tuple[PosteriorDraws, McemState]:
    logger = logger or logging.getLogger(__name__)
    draws, state = _run_chains(config, [data], logger)
    return draws[0], state


def run_mcem_multiple(
    config: McemConfig, data: Dataset, logger: Optional[logging.Logger] = None
) -> Tuple[PosteriorDraws, McemState]:
    """Coordinate-wise sampler over m ordered sub-intervals."""
    if config.mode != "multiple":
        raise ConfigError(f"run_mcem_multiple needs mode='multiple', got '{config.mode}'")
    return run_mcem(config, data, logger=logger)


def run_mcem_pooled(
    config: McemConfig,
    datasets: Sequence[Dataset],
    match_ig_moments: bool = False,
    logger: Optional[logging.Logger] = None,
) -> Tuple[List[PosteriorDraws], McemState]:
    """Per-subject (t, sigma^2) chains sharing one theta.

    Subject s draws from streams keyed by its index, so a single subject
    reproduces ``run_mcem`` exactly.

    Args:
        config: sampler settings shared by every subject.
        datasets: one centred series per subject, all on the same x.
        match_ig_moments: replace the sigma^2 prior with the moment-matched one.
        logger: progress and convergence messages.

    Returns:
        The draws of each subject, in input order, and the final MCEM state.
    """
    logger = logger or logging.getLogger(__name__)
    if not datasets:
        raise ConfigError("need at least one subject")
    x = datasets[0].x
    for data in datasets[1:]:
        if data.x.shape != x.shape or not np.array_equal(data.x, x):
            raise ConfigError(f"subject '{data.label}' does not share the common x grid")
    if match_ig_moments:
        a_sigma, b_sigma = moment_matched_ig(datasets)
        logger.info(f"moment-matched IG prior: a={a_sigma:.4g}, b={b_sigma:.4g}")
        config = replace(config, a_sigma=a_sigma, b_sigma=b_sigma)
    return _run_chains(config, datasets, logger)
