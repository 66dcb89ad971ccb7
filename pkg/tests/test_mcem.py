from dataclasses import replace

import numpy as np
import pandas as pd
import pytest
from scipy import stats

from dgp_mcem.dgp import DgpPrior, likelihood_terms, log_marginal_likelihood, sample_dgp_paths
from dgp_mcem.errors import ConfigError, McemError
from dgp_mcem.kernel import KernelParams
from dgp_mcem.mcem import (
    ChainState,
    Dataset,
    McemConfig,
    McemState,
    PosteriorDraws,
    TPrior,
    e_step,
    gibbs_sigma_sq,
    m_step,
    mh_step_t,
    moment_matched_ig,
    q_hat,
    run_mcem,
    run_mcem_multiple,
    run_mcem_pooled,
    sigma_sq_conditional,
)
from dgp_mcem.simstudy import SyntheticSpec, generate_dataset
from dgp_mcem.summarize import summarize_draws


def dataset(n, seed):
    x, y = generate_dataset(SyntheticSpec(n=n, seed=seed), 0)
    return Dataset.from_arrays(x, y)


def test_prior_parsing():
    assert TPrior.parse("uniform", (0, 2)) == TPrior("uniform", (0, 2))
    beta = TPrior.parse("beta:3,3", (50.0, 250.0))
    assert beta.kind == "beta" and beta.beta_shapes == (3.0, 3.0)
    with pytest.raises(ConfigError):
        TPrior.parse("normal", (0, 1))


def test_prior_densities():
    uniform = TPrior(domain=(0.0, 2.0))
    assert uniform.logpdf(1.3) == pytest.approx(-np.log(2.0))
    assert uniform.logpdf(2.5) == -np.inf
    beta = TPrior("beta", (50.0, 250.0), (3.0, 3.0))
    assert beta.logpdf(150.0) == pytest.approx(stats.beta.logpdf(0.5, 3, 3) - np.log(200.0))
    assert beta.logpdf(150.0) > beta.logpdf(60.0)


def test_prior_samples_stay_in_domain(rng):
    prior = TPrior("beta", (1.0, 3.0))
    draws = np.array([prior.sample(rng) for _ in range(500)])
    assert draws.min() >= 1.0 and draws.max() <= 3.0


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(J=300, D=200),
        dict(tol=0.0),
        dict(a_sigma=0.0),
        dict(mode="bogus"),
        dict(mode="multiple"),
        dict(mode="multiple", intervals=((0.0, 1.2), (1.0, 2.0))),
        dict(mode="multiple", intervals=((1.0, 1.0),)),
    ],
)
def test_invalid_configs_rejected(kwargs):
    with pytest.raises(ConfigError):
        McemConfig(**kwargs)


def test_default_bounds_and_start():
    x = np.linspace(0.0, 2.0, 11)
    config = McemConfig()
    (tau_lo, tau_hi), (h_lo, h_hi) = config.resolved_bounds(x)
    assert (tau_lo, tau_hi) == (-5.0, 5.0)
    assert h_lo == pytest.approx(np.log(0.02)) and h_hi == pytest.approx(np.log(20.0))
    assert config.resolved_theta_init(x) == pytest.approx((1.0, 0.2))


def test_dataset_is_centred():
    data = Dataset.from_arrays([0.0, 1.0, 2.0], [3.0, 5.0, 7.0], label="s")
    assert data.offset == 5.0
    np.testing.assert_array_equal(data.y, [-2.0, 0.0, 2.0])
    with pytest.raises(ConfigError):
        Dataset.from_arrays([0.0, 1.0], [1.0, 2.0])


def test_posterior_draws_frame():
    draws = PosteriorDraws(t=np.array([[0.4, 1.4], [0.5, 1.5]]), sigma_sq=[0.1, 0.2], theta_star=(1.0, 0.3))
    frame = draws.to_frame()
    assert list(frame.columns) == ["t1", "t2", "sigma_sq"]
    np.testing.assert_array_equal(draws.t_pooled, [0.4, 1.4, 0.5, 1.5])
    with pytest.raises(McemError):
        PosteriorDraws(t=[[0.4]], sigma_sq=[-1.0], theta_star=(1.0, 0.3))


def test_mh_targets_conditional_posterior():
    data = dataset(20, 8)
    theta, sigma_sq = (1.0, 0.3), 0.0625
    prior = TPrior(domain=(0.0, 2.0))
    rng = np.random.default_rng(3)
    t, terms = np.array([1.0]), None
    draws = np.empty(20000)
    for d in range(draws.size):
        step = mh_step_t(t, sigma_sq, theta, data, prior, rng, current_terms=terms)
        t, terms = step.t, step.terms
        draws[d] = t[0]

    edges = np.linspace(0.0, 2.0, 41)
    fine = np.linspace(0.0, 2.0, 4001)[:-1] + 0.00025
    logpost = np.array([log_marginal_likelihood(data.y, [v], sigma_sq, theta, data.x) for v in fine])
    weights = np.exp(logpost - logpost.max())
    target = np.histogram(fine, edges, weights=weights)[0]
    target /= target.sum()
    observed = np.histogram(draws, edges)[0] / draws.size
    assert 0.5 * np.abs(observed - target).sum() <= 0.05


@pytest.mark.slow
def test_mh_targets_conditional_posterior_long_run():
    data = dataset(20, 8)
    theta, sigma_sq = (1.0, 0.3), 0.0625
    prior = TPrior(domain=(0.0, 2.0))
    rng = np.random.default_rng(4)
    t, terms = np.array([1.0]), None
    draws = np.empty(100000)
    for d in range(draws.size):
        step = mh_step_t(t, sigma_sq, theta, data, prior, rng, current_terms=terms)
        t, terms = step.t, step.terms
        draws[d] = t[0]
    edges = np.linspace(0.0, 2.0, 201)
    centres = 0.5 * (edges[1:] + edges[:-1])
    logpost = np.array([log_marginal_likelihood(data.y, [v], sigma_sq, theta, data.x) for v in centres])
    target = np.exp(logpost - logpost.max())
    target /= target.sum()
    observed = np.histogram(draws, edges)[0] / draws.size
    assert 0.5 * np.abs(observed - target).sum() <= 0.05


def test_flat_likelihood_accepts_everything(small_dataset):
    prior = TPrior(domain=(0.0, 2.0))
    rng = np.random.default_rng(0)
    t, terms, accepted = np.array([1.0]), None, 0
    for _ in range(10000):
        step = mh_step_t(t, 0.1, (1e-8, 0.3), small_dataset, prior, rng, current_terms=terms)
        t, terms = step.t, step.terms
        accepted += step.accepted
    assert accepted == 10000


def test_failed_proposal_is_a_counted_rejection(small_dataset):
    prior = TPrior(domain=(0.99999, 1.00001))
    step = mh_step_t(
        [0.5, 1.0], 0.1, (1.0, 0.3), small_dataset, prior, np.random.default_rng(0), coordinate=0
    )
    assert step.failed and not step.accepted
    np.testing.assert_array_equal(step.t, [0.5, 1.0])


def test_sigma_conditional_parameters():
    data = Dataset.from_arrays(np.linspace(0, 2, 50), np.zeros(50))
    terms = likelihood_terms(data.y, [1.0], (1.0, 0.3), data.x)
    shape, scale = sigma_sq_conditional(terms, 0.5, 0.5)
    assert shape == 25.5
    assert scale == pytest.approx(0.5)


def test_gibbs_draws_match_inverse_gamma_mean(small_dataset):
    theta = (2.0, 0.4)
    terms = likelihood_terms(small_dataset.y, [0.5], theta, small_dataset.x)
    shape, scale = sigma_sq_conditional(terms, 0.5, 0.5)
    rng = np.random.default_rng(9)
    draws = np.array(
        [gibbs_sigma_sq([0.5], theta, small_dataset, 0.5, 0.5, rng, terms=terms) for _ in range(100000)]
    )
    mean = scale / (shape - 1)
    sd = mean / np.sqrt(shape - 2)
    assert abs(draws.mean() - mean) <= 3 * sd / np.sqrt(draws.size)


def test_first_e_step_samples_the_prior(small_dataset, quick_config):
    config = replace(quick_config, D=10000)
    state = McemState(theta_hat=(1.0, 0.3), chains=[ChainState.initial(config, small_dataset)])
    chain = e_step(state, config, small_dataset, np.random.default_rng(2))
    assert chain.t.shape == (10000, 1) and len(chain) == 10000
    assert stats.kstest(chain.t[:, 0], "uniform", args=(0.0, 2.0)).pvalue > 0.01


def test_e_step_count_and_determinism(small_dataset, quick_config):
    config = replace(quick_config, D=100, J=20)

    def run():
        state = McemState(theta_hat=(1.0, 0.3), chains=[ChainState.initial(config, small_dataset)], iteration=2)
        return e_step(state, config, small_dataset, np.random.default_rng(7))

    a, b = run(), run()
    assert len(a) == 100 and a.n_proposed == 100
    np.testing.assert_array_equal(a.t, b.t)
    np.testing.assert_array_equal(a.sigma_sq, b.sigma_sq)


def test_q_hat_is_average_log_likelihood(small_dataset):
    t = np.array([[0.4], [1.5], [0.4]])
    s = np.array([0.05, 0.08, 0.06])
    theta = (2.0, 0.35)
    expected = np.mean(
        [log_marginal_likelihood(small_dataset.y, t[j], s[j], theta, small_dataset.x) for j in range(3)]
    )
    assert q_hat(theta, t, s, small_dataset) == pytest.approx(expected, abs=1e-8)


def test_m_step_never_degrades(small_dataset, rng):
    t = rng.uniform(0, 2, size=(40, 1))
    s = rng.uniform(0.04, 0.09, size=40)
    bounds = McemConfig().resolved_bounds(small_dataset.x)
    start = (1.0, 0.2)
    result = m_step(t, s, small_dataset, start, bounds, rng=np.random.default_rng(1))
    assert q_hat(result.theta, t, s, small_dataset) >= q_hat(start, t, s, small_dataset) - 1e-9
    assert result.q_value >= result.q_start - 1e-9


def test_m_step_respects_bounds(small_dataset, rng):
    t = rng.uniform(0, 2, size=(10, 1))
    s = np.full(10, 0.06)
    bounds = ((-5.0, -4.9), (np.log(0.3), np.log(0.31)))
    result = m_step(t, s, small_dataset, (1.0, 0.5), bounds)
    tau0, h = result.theta
    assert np.exp(-5.0) - 1e-12 <= tau0 <= np.exp(-4.9) + 1e-12
    assert 0.3 - 1e-12 <= h <= 0.31 + 1e-12


def test_m_step_matches_grid_search_for_one_draw(small_dataset):
    t, s = np.array([[0.436]]), np.array([0.0625])
    bounds = McemConfig().resolved_bounds(small_dataset.x)
    result = m_step(t, s, small_dataset, (1.0, 0.3), bounds, rng=np.random.default_rng(0))

    def best_on(log_tau, log_h):
        values = np.array([[q_hat((np.exp(a), np.exp(b)), t, s, small_dataset) for b in log_h] for a in log_tau])
        i, j = np.unravel_index(np.argmax(values), values.shape)
        return log_tau[i], log_h[j]

    (tau_lo, tau_hi), (h_lo, h_hi) = bounds
    a, b = best_on(np.arange(tau_lo, tau_hi + 1e-9, 0.1), np.arange(h_lo, h_hi + 1e-9, 0.1))
    a, b = best_on(
        np.arange(max(a - 0.2, tau_lo), min(a + 0.2, tau_hi) + 1e-9, 0.01),
        np.arange(max(b - 0.2, h_lo), min(b + 0.2, h_hi) + 1e-9, 0.01),
    )
    assert np.log(result.theta[0]) == pytest.approx(a, abs=0.05)
    assert np.log(result.theta[1]) == pytest.approx(b, abs=0.05)


def test_run_mcem_outputs(small_dataset, quick_config):
    draws, state = run_mcem(quick_config, small_dataset)
    assert draws.t.shape == (quick_config.final_draws, 1)
    assert draws.sigma_sq.shape == (quick_config.final_draws,)
    assert np.all(draws.sigma_sq > 0)
    assert np.all((draws.t >= 0.0) & (draws.t <= 2.0))
    (tau_lo, tau_hi), (h_lo, h_hi) = quick_config.resolved_bounds(small_dataset.x)
    assert tau_lo - 1e-9 <= np.log(draws.theta_star[0]) <= tau_hi + 1e-9
    assert h_lo - 1e-9 <= np.log(draws.theta_star[1]) <= h_hi + 1e-9
    assert 1 <= state.iteration <= quick_config.max_iter
    assert len(draws.metadata["theta_trace"]) == state.iteration + 1
    assert 0.0 < draws.metadata["acceptance_rate"] <= 1.0
    assert draws.metadata["offset"] == small_dataset.offset


def test_run_mcem_is_deterministic(small_dataset, quick_config):
    config = replace(quick_config, max_iter=4)
    a, _ = run_mcem(config, small_dataset)
    b, _ = run_mcem(config, small_dataset)
    np.testing.assert_array_equal(a.t, b.t)
    np.testing.assert_array_equal(a.sigma_sq, b.sigma_sq)
    assert a.theta_star == b.theta_star


def test_oracle_mode_keeps_t_fixed(small_dataset, quick_config):
    config = replace(quick_config, mode="oracle", oracle_t=(0.436, 1.459), max_iter=4)
    draws, _ = run_mcem(config, small_dataset)
    assert np.all(draws.t == np.array([0.436, 1.459]))
    assert draws.metadata["acceptance_rate"] is None


def test_empty_oracle_is_gpr(small_dataset, quick_config):
    config = replace(quick_config, mode="oracle", oracle_t=(), max_iter=4)
    draws, _ = run_mcem(config, small_dataset)
    assert draws.t.shape == (quick_config.final_draws, 0)
    assert draws.t_pooled.size == 0


def test_single_interval_multiple_mode_reduces_to_single(small_dataset, quick_config):
    single = replace(quick_config, max_iter=3)
    multiple = replace(single, mode="multiple", intervals=((0.0, 2.0),))
    a, _ = run_mcem(single, small_dataset)
    b, _ = run_mcem_multiple(multiple, small_dataset)
    np.testing.assert_array_equal(a.t, b.t)
    np.testing.assert_array_equal(a.sigma_sq, b.sigma_sq)


def test_multiple_mode_keeps_coordinates_in_their_intervals(small_dataset, quick_config):
    config = replace(quick_config, mode="multiple", intervals=((0.0, 1.0), (1.0, 2.0)), max_iter=3)
    draws, _ = run_mcem_multiple(config, small_dataset)
    assert draws.t.shape == (config.final_draws, 2)
    assert np.all(draws.t[:, 0] <= 1.0) and np.all(draws.t[:, 1] >= 1.0)


def test_run_mcem_multiple_needs_multiple_mode(small_dataset, quick_config):
    with pytest.raises(ConfigError):
        run_mcem_multiple(quick_config, small_dataset)


def test_pooled_single_subject_reduces_to_run_mcem(small_dataset, quick_config):
    config = replace(quick_config, max_iter=3)
    a, _ = run_mcem(config, small_dataset)
    (b,), state = run_mcem_pooled(config, [small_dataset])
    np.testing.assert_array_equal(a.t, b.t)
    np.testing.assert_array_equal(a.sigma_sq, b.sigma_sq)
    assert state.theta_hat == a.theta_star


def test_pooled_subjects_share_theta(quick_config):
    x = np.linspace(0.0, 2.0, 25)
    rng = np.random.default_rng(5)
    subjects = [
        Dataset.from_arrays(x, np.sin(3 * x + shift) + rng.normal(0, 0.2, x.size), label=f"s{k}")
        for k, shift in enumerate((0.0, 0.3))
    ]
    draws, state = run_mcem_pooled(replace(quick_config, max_iter=3), subjects, match_ig_moments=True)
    assert [d.metadata["label"] for d in draws] == ["s0", "s1"]
    assert draws[0].theta_star == draws[1].theta_star == state.theta_hat
    assert draws[0].metadata["config"]["a_sigma"] == 3.0


def test_pooled_rejects_mismatched_grids(small_dataset, quick_config):
    other = Dataset.from_arrays(small_dataset.x + 0.01, small_dataset.y)
    with pytest.raises(ConfigError):
        run_mcem_pooled(quick_config, [small_dataset, other])


def test_moment_matched_inverse_gamma():
    x = np.linspace(0, 1, 40)
    rng = np.random.default_rng(0)
    datasets = [Dataset.from_arrays(x, np.cos(4 * x) + rng.normal(0, 0.3, 40)) for _ in range(3)]
    a, b = moment_matched_ig(datasets)
    residuals = np.concatenate(
        [d.y - pd.Series(d.y).rolling(5, center=True, min_periods=1).mean().to_numpy() for d in datasets]
    )
    v = np.var(residuals, ddof=1)
    assert a == 3.0
    assert b == pytest.approx(2 * v)
    # IG(3, 2v) has mean v and standard deviation v
    assert b / (a - 1) == pytest.approx(v)


def test_e_step_advances_only_the_requested_subject(small_dataset, quick_config):
    config = replace(quick_config, D=50, J=10)
    chains = [ChainState.initial(config, small_dataset) for _ in range(2)]
    state = McemState(theta_hat=(1.0, 0.3), chains=chains, iteration=2)
    before = chains[0].t.copy()
    chain = e_step(state, config, small_dataset, np.random.default_rng(3), subject=1)
    assert chains[1].n_proposed == chain.n_proposed == 50
    assert chains[0].n_proposed == 0
    np.testing.assert_array_equal(chains[0].t, before)


def test_pooled_m_step_sums_subject_objectives(small_dataset, rng):
    other = dataset(30, 8)
    t = [rng.uniform(0, 2, size=(20, 1)) for _ in range(2)]
    s = [rng.uniform(0.04, 0.09, size=20) for _ in range(2)]
    bounds = McemConfig().resolved_bounds(small_dataset.x)
    start = (1.0, 0.3)
    result = m_step(t, s, [small_dataset, other], start, bounds, rng=np.random.default_rng(2))
    expected = q_hat(start, t[0], s[0], small_dataset) + q_hat(start, t[1], s[1], other)
    assert result.q_start == pytest.approx(expected)
    reached = q_hat(result.theta, t[0], s[0], small_dataset) + q_hat(result.theta, t[1], s[1], other)
    assert reached == pytest.approx(result.q_value)
    with pytest.raises(ConfigError):
        m_step(t[:1], s[:1], [small_dataset, other], start, bounds)


def test_beta_prior_draws_stay_strictly_inside_domain(small_dataset, quick_config):
    config = replace(quick_config, t_prior=TPrior("beta", (0.0, 2.0), (2.0, 2.0)), max_iter=4)
    draws, _ = run_mcem(config, small_dataset)
    assert np.all((draws.t > 0.0) & (draws.t < 2.0))


def test_clustered_oracle_points_report_jitter(small_dataset, quick_config):
    # six points 6e-4 apart, above the separation threshold for every h allowed
    oracle_t = tuple(0.8 + 6e-4 * np.arange(6))
    bounds = ((np.log(0.5), np.log(5.0)), (np.log(0.4), np.log(0.5)))
    config = replace(quick_config, mode="oracle", oracle_t=oracle_t, theta_bounds=bounds, max_iter=3)
    draws, _ = run_mcem(config, small_dataset)
    assert draws.metadata["jitter"] > 0
    plain, _ = run_mcem(replace(config, oracle_t=(0.436, 1.459)), small_dataset)
    assert plain.metadata["jitter"] == 0.0


def test_multiple_mode_means_near_stationary_points(quick_config):
    x, y = generate_dataset(SyntheticSpec(n=60, sigma=0.1, seed=2), 0)
    config = replace(quick_config, mode="multiple", intervals=((0.0, 1.0), (1.0, 2.0)), final_draws=1000)
    draws, _ = run_mcem_multiple(config, Dataset.from_arrays(x, y))
    np.testing.assert_allclose(draws.t.mean(axis=0), [0.436, 1.459], atol=0.08)


@pytest.mark.slow
def test_multiple_mode_means_at_full_size():
    spec = SyntheticSpec(n=50, sigma=0.25)
    config = McemConfig(mode="multiple", t_prior=TPrior(domain=(0.0, 2.0)), intervals=((0.0, 1.0), (1.0, 2.0)))
    means = []
    for index in range(10):
        draws, _ = run_mcem_multiple(replace(config, seed=index), Dataset.from_arrays(*generate_dataset(spec, index)))
        means.append(draws.t.mean(axis=0))
    np.testing.assert_allclose(np.median(means, axis=0), [0.436, 1.459], atol=0.08)


def test_length_scale_recovered_from_prior_draws(quick_config):
    x = np.linspace(0.0, 2.0, 50)
    prior = DgpPrior(0.0, KernelParams(tau_sq=1.0, h=0.3), [1.0])
    config = replace(quick_config, mode="oracle", oracle_t=(1.0,), max_iter=8, final_draws=100)
    estimates = []
    for index in range(20):
        rng = np.random.default_rng(np.random.SeedSequence([31, index]))
        y = sample_dgp_paths(prior, x, 1, rng)[0] + rng.normal(0.0, 0.25, x.size)
        draws, _ = run_mcem(replace(config, seed=index), Dataset.from_arrays(x, y))
        estimates.append(draws.theta_star[1])
    assert 0.15 <= np.median(estimates) <= 0.6


def test_identical_subjects_get_matching_posteriors(small_dataset, quick_config):
    twin = Dataset.from_arrays(small_dataset.x, small_dataset.y, label="twin")
    config = replace(
        quick_config, mode="multiple", intervals=((0.0, 1.0), (1.0, 2.0)), max_iter=5, final_draws=3000
    )
    (a, b), _ = run_mcem_pooled(config, [small_dataset, twin])
    # separate streams per subject, same target distribution
    assert not np.array_equal(a.t, b.t)
    np.testing.assert_allclose(a.t.mean(axis=0), b.t.mean(axis=0), atol=0.06)
    assert np.median(a.sigma_sq) == pytest.approx(np.median(b.sigma_sq), rel=0.1)
    (again, _), _ = run_mcem_pooled(config, [small_dataset, twin])
    np.testing.assert_array_equal(a.t, again.t)


@pytest.mark.slow
def test_pooled_subjects_recover_their_dips():
    x = np.arange(50.0, 251.0, 2.0)
    rng = np.random.default_rng(12)
    subjects = []
    for dip in (100.0, 110.0):
        wave = -np.exp(-0.5 * ((x - dip) / 15.0) ** 2) + 1.5 * np.exp(-0.5 * ((x - 170.0) / 20.0) ** 2)
        subjects.append(Dataset.from_arrays(x, wave + rng.normal(0.0, 0.1, x.size), label=f"dip{dip:.0f}"))
    config = McemConfig(
        D=500, J=100, max_iter=30, final_draws=2000, burn_in=500, thin=1,
        t_prior=TPrior(domain=(50.0, 250.0)), seed=3,
    )
    draws, _ = run_mcem_pooled(config, subjects, match_ig_moments=True)
    for dip, subject in zip((100.0, 110.0), draws):
        _, region = summarize_draws(subject, (50.0, 250.0))
        assert min(abs(m - dip) for m in region.modes) <= 6.0
