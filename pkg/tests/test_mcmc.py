from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from circstate.circular import (
    DEFAULT_K_MAX,
    TWO_PI,
    VonMisesParams,
    von_mises_mixture_sample,
)
from circstate.config import McmcConfig
from circstate.mcmc import (
    EVOLUTION_BLOCKS,
    AcceptanceTally,
    ChainError,
    ChainState,
    GibbsSampler,
    SampleSet,
    merge_sample_sets,
    run_chain,
    run_chains,
)
from circstate.model import (
    LookupGrid,
    ModelParams,
    ObservationLikelihood,
    PriorSpec,
    build_grid,
    generate_path,
    transition_moments,
)


def _variant(state: ChainState, params: ModelParams | None = None, **fields: object) -> ChainState:
    """A copy of ``state`` with some fields replaced and a fresh observation cache."""
    moved = replace(
        state,
        params=params or state.params,
        x=state.x.copy(),
        k=state.k.copy(),
        dz=state.dz.copy(),
        **fields,
    )
    moved.obs = ObservationLikelihood.for_params(
        moved.obs.y, moved.obs.times, moved.x[: moved.T], moved.params
    )
    return moved


def _joint_diff(sampler: GibbsSampler, a: ChainState, b: ChainState) -> float:
    return sampler.log_joint(a) - sampler.log_joint(b)


def test_beta_f_conditional_matches_joint(
    tiny_sampler: GibbsSampler, tiny_state: ChainState, rng: np.random.Generator
) -> None:
    mean, cov = tiny_sampler.beta_f_conditional(tiny_state)
    ref = stats.multivariate_normal(mean, cov)
    a, b = ref.rvs(random_state=rng), ref.rvs(random_state=rng)
    sa = _variant(tiny_state, replace(tiny_state.params, beta_f=tuple(a)))
    sb = _variant(tiny_state, replace(tiny_state.params, beta_f=tuple(b)))
    expected = ref.logpdf(a) - ref.logpdf(b)
    assert _joint_diff(tiny_sampler, sa, sb) == pytest.approx(expected, abs=1e-8)


def test_beta_g_conditional_covers_the_free_components_only(
    tiny_sampler: GibbsSampler, tiny_state: ChainState, rng: np.random.Generator
) -> None:
    mean, cov = tiny_sampler.beta_g_conditional(tiny_state)
    assert mean.shape == (2,)
    ref = stats.multivariate_normal(mean, cov)
    a, b = ref.rvs(random_state=rng), ref.rvs(random_state=rng)
    sa = _variant(tiny_state, tiny_state.params.with_beta_g_free(a))
    sb = _variant(tiny_state, tiny_state.params.with_beta_g_free(b))
    expected = ref.logpdf(a) - ref.logpdf(b)
    assert _joint_diff(tiny_sampler, sa, sb) == pytest.approx(expected, abs=1e-8)


def test_beta_g_update_leaves_fixed_components(
    tiny_sampler: GibbsSampler, tiny_state: ChainState, rng: np.random.Generator
) -> None:
    tiny_sampler.update_beta_g(tiny_state, rng)
    assert tiny_state.params.beta_g[2:] == (1.0, 1.0)


def test_g1_conditional_matches_joint(
    tiny_sampler: GibbsSampler, tiny_state: ChainState
) -> None:
    mean, var = tiny_sampler.g1_conditional(tiny_state)
    a, b = mean - 0.7 * math.sqrt(var), mean + 1.3 * math.sqrt(var)
    ref = stats.norm(mean, math.sqrt(var))
    expected = ref.logpdf(a) - ref.logpdf(b)
    diff = _joint_diff(tiny_sampler, _variant(tiny_state, g1=a), _variant(tiny_state, g1=b))
    assert diff == pytest.approx(expected, abs=1e-8)


def test_dz_conditional_matches_joint_in_whitened_coordinates(
    tiny_sampler: GibbsSampler, tiny_state: ChainState, rng: np.random.Generator
) -> None:
    mean, cov = tiny_sampler.dz_conditional_whitened(tiny_state)
    ref = stats.multivariate_normal(mean, cov)
    grid = tiny_state.grid
    p = tiny_state.params
    sigma_g = math.sqrt(p.sigma2_g)

    def dz_of(u: np.ndarray) -> np.ndarray:
        return grid.basis @ p.beta_g_array + sigma_g * grid.factor.unwhiten(u)

    a, b = ref.rvs(random_state=rng), ref.rvs(random_state=rng)
    sa, sb = _variant(tiny_state, dz=dz_of(a)), _variant(tiny_state, dz=dz_of(b))
    diff = _joint_diff(tiny_sampler, sa, sb)
    assert diff == pytest.approx(ref.logpdf(a) - ref.logpdf(b), abs=1e-8)


def test_dz_conditional_on_the_natural_scale_is_consistent(
    tiny_sampler: GibbsSampler, tiny_state: ChainState
) -> None:
    mean_u, cov_u = tiny_sampler.dz_conditional_whitened(tiny_state)
    mean, cov = tiny_sampler.dz_conditional(tiny_state)
    lower = tiny_state.grid.factor.lower
    sigma_g = math.sqrt(tiny_state.params.sigma2_g)
    np.testing.assert_allclose(
        mean, tiny_state.grid.basis @ tiny_state.params.beta_g_array + sigma_g * lower @ mean_u
    )
    np.testing.assert_allclose(cov, cov.T, atol=1e-12)


def test_x_last_conditional_matches_joint(
    tiny_sampler: GibbsSampler, tiny_state: ChainState
) -> None:
    mean, var = tiny_sampler.x_last_conditional(tiny_state)
    k = int(tiny_state.k[tiny_state.T])
    a, b = 0.4, 5.1
    sd = math.sqrt(var)
    expected = stats.norm.logpdf(a + TWO_PI * k, mean, sd) - stats.norm.logpdf(
        b + TWO_PI * k, mean, sd
    )
    xa, xb = tiny_state.x.copy(), tiny_state.x.copy()
    xa[tiny_state.T], xb[tiny_state.T] = a, b
    diff = _joint_diff(tiny_sampler, _variant(tiny_state, x=xa), _variant(tiny_state, x=xb))
    assert diff == pytest.approx(expected, abs=1e-8)


def test_x_last_update_stays_in_its_wrap_interval(
    tiny_sampler: GibbsSampler, tiny_state: ChainState, rng: np.random.Generator
) -> None:
    k_before = tiny_state.k.copy()
    for _ in range(50):
        tiny_sampler.update_x_last(tiny_state, rng)
        assert 0.0 <= tiny_state.x[tiny_state.T] < TWO_PI
    np.testing.assert_array_equal(tiny_state.k, k_before)


def test_x0_target_matches_joint(tiny_sampler: GibbsSampler, tiny_state: ChainState) -> None:
    a, b = 0.3, 4.4
    expected = tiny_sampler.x0_log_target(tiny_state, a) - tiny_sampler.x0_log_target(tiny_state, b)
    diff = _joint_diff(tiny_sampler, _variant(tiny_state, x0=a), _variant(tiny_state, x0=b))
    assert diff == pytest.approx(expected, abs=1e-8)


@pytest.mark.parametrize("t", [1, 2, 3])
def test_x_target_matches_joint(tiny_sampler: GibbsSampler, tiny_state: ChainState, t: int) -> None:
    a, b = 1.1, 5.9
    lp_a, _ = tiny_sampler.x_log_target(tiny_state, t, a)
    lp_b, _ = tiny_sampler.x_log_target(tiny_state, t, b)
    xa, xb = tiny_state.x.copy(), tiny_state.x.copy()
    xa[t - 1], xb[t - 1] = a, b
    diff = _joint_diff(tiny_sampler, _variant(tiny_state, x=xa), _variant(tiny_state, x=xb))
    assert diff == pytest.approx(lp_a - lp_b, abs=1e-8)


def test_x_target_rejects_the_last_angle(
    tiny_sampler: GibbsSampler, tiny_state: ChainState
) -> None:
    with pytest.raises(ValueError):
        tiny_sampler.x_log_target(tiny_state, tiny_state.T + 1, 1.0)


@pytest.mark.parametrize("t", [1, 2, 4])
def test_k_target_matches_joint(tiny_sampler: GibbsSampler, tiny_state: ChainState, t: int) -> None:
    expected = tiny_sampler.k_log_target(tiny_state, t, 1) - tiny_sampler.k_log_target(
        tiny_state, t, -1
    )
    ka, kb = tiny_state.k.copy(), tiny_state.k.copy()
    ka[t - 1], kb[t - 1] = 1, -1
    diff = _joint_diff(tiny_sampler, _variant(tiny_state, k=ka), _variant(tiny_state, k=kb))
    assert diff == pytest.approx(expected, abs=1e-8)


@pytest.mark.parametrize("name", ["sigma2_eps", "sigma2_f"])
def test_observation_variance_targets_match_joint(
    tiny_sampler: GibbsSampler, tiny_state: ChainState, name: str
) -> None:
    a, b = 0.07, 0.8
    lp_a, _ = tiny_sampler.variance_log_target(tiny_state, name, a)
    lp_b, _ = tiny_sampler.variance_log_target(tiny_state, name, b)
    sa = _variant(tiny_state, replace(tiny_state.params, **{name: a}))
    sb = _variant(tiny_state, replace(tiny_state.params, **{name: b}))
    assert _joint_diff(tiny_sampler, sa, sb) == pytest.approx(lp_a - lp_b, abs=1e-8)


def _evolution_sampler(y: np.ndarray, prior: PriorSpec) -> GibbsSampler:
    cfg = McmcConfig(
        n_iter=20, burn_in=0, sample_evolution_variances=True, evolution_variance_bound=10.0
    )
    return GibbsSampler(y, prior, cfg)


def test_evolution_noise_target_matches_joint(
    tiny_series: np.ndarray, prior: PriorSpec, tiny_state: ChainState
) -> None:
    sampler = _evolution_sampler(tiny_series, prior)
    assert sampler.blocks()[-2:] == EVOLUTION_BLOCKS
    a, b = 0.05, 0.6
    lp_a, _ = sampler.variance_log_target(tiny_state, "sigma2_eta", a)
    lp_b, _ = sampler.variance_log_target(tiny_state, "sigma2_eta", b)
    sa = _variant(tiny_state, replace(tiny_state.params, sigma2_eta=a))
    sb = _variant(tiny_state, replace(tiny_state.params, sigma2_eta=b))
    assert _joint_diff(sampler, sa, sb) == pytest.approx(lp_a - lp_b, abs=1e-8)


def test_evolution_scale_target_matches_joint(
    tiny_series: np.ndarray, prior: PriorSpec, tiny_state: ChainState
) -> None:
    sampler = _evolution_sampler(tiny_series, prior)
    a, b = 0.5, 2.0
    lp_a, grid_a = sampler.variance_log_target(tiny_state, "sigma2_g", a)
    lp_b, grid_b = sampler.variance_log_target(tiny_state, "sigma2_g", b)
    assert isinstance(grid_a, LookupGrid)
    assert isinstance(grid_b, LookupGrid)
    sa = _variant(tiny_state, replace(tiny_state.params, sigma2_g=a), grid=grid_a)
    sb = _variant(tiny_state, replace(tiny_state.params, sigma2_g=b), grid=grid_b)
    assert _joint_diff(sampler, sa, sb) == pytest.approx(lp_a - lp_b, abs=1e-8)


def test_evolution_variances_beyond_the_bound_are_rejected(
    tiny_series: np.ndarray, prior: PriorSpec, tiny_state: ChainState
) -> None:
    sampler = _evolution_sampler(tiny_series, prior)
    assert sampler.variance_log_target(tiny_state, "sigma2_eta", 11.0)[0] == -math.inf
    assert sampler.variance_log_target(tiny_state, "sigma2_g", 0.0)[0] == -math.inf


def test_wrap_counter_walk_targets_its_conditional(
    tiny_sampler: GibbsSampler, tiny_state: ChainState
) -> None:
    state = _variant(tiny_state, replace(tiny_state.params, sigma2_eta=30.0))
    support = np.arange(-DEFAULT_K_MAX, DEFAULT_K_MAX + 1)
    log_target = np.array([tiny_sampler.k_log_target(state, 1, int(k)) for k in support])
    target = np.exp(log_target - log_target.max())
    target /= target.sum()

    rng = np.random.default_rng(77)
    counts = dict.fromkeys(support.tolist(), 0)
    n = 30000
    for _ in range(n):
        tiny_sampler.update_k_t(state, 1, rng)
        counts[int(state.k[0])] += 1
    observed = np.array([counts[int(k)] for k in support]) / n
    np.testing.assert_allclose(observed, target, atol=0.02)


def test_initial_state_shapes(tiny_sampler: GibbsSampler, tiny_grid: LookupGrid) -> None:
    state = tiny_sampler.initial_state(tiny_grid, 1.0, 0.1, np.random.default_rng(0))
    assert state.x.shape == (tiny_sampler.T + 1,)
    assert np.all(state.k == 0)
    assert state.dz.shape == (tiny_grid.n,)
    assert state.params.sigma2_eps == pytest.approx(tiny_sampler.prior.sigma2_eps.mode)


def test_initial_state_refactorizes_a_grid_with_another_scale(
    tiny_sampler: GibbsSampler, tiny_grid: LookupGrid
) -> None:
    state = tiny_sampler.initial_state(tiny_grid, 0.25, 0.1, np.random.default_rng(0))
    assert state.grid.scale.variance == pytest.approx(0.25)


def test_initial_state_needs_evolution_noise(
    tiny_sampler: GibbsSampler, tiny_grid: LookupGrid
) -> None:
    with pytest.raises(ValueError):
        tiny_sampler.initial_state(tiny_grid, 1.0, 0.0, np.random.default_rng(0))


def test_sampler_needs_observations(prior: PriorSpec) -> None:
    with pytest.raises(ValueError):
        GibbsSampler(np.array([]), prior, McmcConfig(n_iter=2, burn_in=0))


def test_sweep_wraps_block_failures(
    monkeypatch: pytest.MonkeyPatch, tiny_sampler: GibbsSampler, tiny_state: ChainState
) -> None:
    def boom(*_args: object, **_kwargs: object) -> None:
        msg = "not positive definite"
        raise ValueError(msg)

    monkeypatch.setattr(GibbsSampler, "update_dz", boom)
    with pytest.raises(ChainError) as excinfo:
        tiny_sampler.sweep(tiny_state, np.random.default_rng(0), AcceptanceTally(), 7)
    assert excinfo.value.iteration == 7
    assert excinfo.value.block == "dz"
    assert "not positive definite" in str(excinfo.value)


def test_audit_detects_a_stale_cache(tiny_sampler: GibbsSampler, tiny_state: ChainState) -> None:
    assert tiny_sampler.audit(tiny_state, 1) < 1e-8
    tiny_state.x[0] = math.fmod(tiny_state.x[0] + 2.0, TWO_PI)
    with pytest.raises(ChainError, match="audit"):
        tiny_sampler.audit(tiny_state, 2)


def test_sweep_tallies_metropolis_blocks(
    tiny_sampler: GibbsSampler, tiny_state: ChainState
) -> None:
    tally = AcceptanceTally()
    rng = np.random.default_rng(1)
    for i in range(5):
        tiny_sampler.sweep(tiny_state, rng, tally, i + 1)
    assert tally.proposed["x"] == 5 * tiny_state.T
    assert tally.proposed["k"] == 5 * (tiny_state.T + 1)
    assert set(tally.rates()) == {"sigma_eps", "sigma_f", "x0", "x", "k"}
    assert all(0.0 <= r <= 1.0 for r in tally.rates().values())
    assert np.all((tiny_state.x >= 0.0) & (tiny_state.x < TWO_PI))


def _small_chain(
    y: np.ndarray, grid: LookupGrid, prior: PriorSpec, seed: int, chain: int = 0
) -> SampleSet:
    cfg = McmcConfig(n_iter=6, burn_in=2, thin=2)
    return run_chain(y, grid, prior, (1.0, 0.1), cfg, np.random.default_rng(seed), chain=chain)


def test_run_chain_keeps_thinned_draws_after_burn_in(
    tiny_series: np.ndarray, tiny_grid: LookupGrid, prior: PriorSpec
) -> None:
    samples = _small_chain(tiny_series, tiny_grid, prior, 4)
    assert samples.n_kept == McmcConfig(n_iter=6, burn_in=2, thin=2).n_kept == 2
    np.testing.assert_array_equal(samples.iterations, [3, 5])
    assert samples.logp_trace.shape == (6,)
    assert samples.x.shape == (2, tiny_series.size + 1)
    assert samples.latent_angles().shape == (2, tiny_series.size)
    assert np.all(samples.sigma2_g == 1.0)
    assert samples.params_at(1).beta_g[2:] == (1.0, 1.0)


def test_run_chain_is_deterministic(
    tiny_series: np.ndarray, tiny_grid: LookupGrid, prior: PriorSpec
) -> None:
    a = _small_chain(tiny_series, tiny_grid, prior, 4)
    b = _small_chain(tiny_series, tiny_grid, prior, 4)
    np.testing.assert_array_equal(a.x, b.x)
    np.testing.assert_array_equal(a.beta_f, b.beta_f)
    np.testing.assert_array_equal(a.logp_trace, b.logp_trace)


def test_single_chain_uses_the_first_spawned_seed(
    tiny_series: np.ndarray, tiny_grid: LookupGrid, prior: PriorSpec
) -> None:
    cfg = McmcConfig(n_iter=4, burn_in=1)
    merged = run_chains(tiny_series, tiny_grid, prior, (1.0, 0.1), cfg, 12, n_chains=1)
    child = np.random.SeedSequence(12).spawn(1)[0]
    direct = run_chain(tiny_series, tiny_grid, prior, (1.0, 0.1), cfg, np.random.default_rng(child))
    np.testing.assert_array_equal(merged.x, direct.x)


def test_run_chains_rejects_zero_chains(
    tiny_series: np.ndarray, tiny_grid: LookupGrid, prior: PriorSpec
) -> None:
    with pytest.raises(ValueError):
        run_chains(tiny_series, tiny_grid, prior, (1.0, 0.1), McmcConfig(), 1, n_chains=0)


def test_merge_sample_sets(
    tiny_series: np.ndarray, tiny_grid: LookupGrid, prior: PriorSpec
) -> None:
    a = _small_chain(tiny_series, tiny_grid, prior, 1, chain=0)
    b = _small_chain(tiny_series, tiny_grid, prior, 2, chain=1)
    merged = merge_sample_sets([a, b])
    assert merged.n_kept == 4
    np.testing.assert_array_equal(merged.chain, [0, 0, 1, 1])
    for block, rate in merged.acceptance.items():
        assert rate == pytest.approx((a.acceptance[block] + b.acceptance[block]) / 2)


def test_merge_sample_sets_rejects_mismatches(
    tiny_series: np.ndarray, tiny_grid: LookupGrid, prior: PriorSpec
) -> None:
    a = _small_chain(tiny_series, tiny_grid, prior, 1)
    shorter = _small_chain(tiny_series[:2], tiny_grid, prior, 1)
    with pytest.raises(ValueError):
        merge_sample_sets([a, shorter])
    with pytest.raises(ValueError):
        merge_sample_sets([])


@pytest.mark.slow
def test_parallel_chains_match_sequential_runs(
    tiny_series: np.ndarray, tiny_grid: LookupGrid, prior: PriorSpec
) -> None:
    cfg = McmcConfig(n_iter=4, burn_in=1)
    merged = run_chains(tiny_series, tiny_grid, prior, (1.0, 0.1), cfg, 3, n_chains=2)
    children = np.random.SeedSequence(3).spawn(2)
    second = run_chain(
        tiny_series, tiny_grid, prior, (1.0, 0.1), cfg, np.random.default_rng(children[1]), chain=1
    )
    np.testing.assert_array_equal(merged.x[merged.chain == 1], second.x)


def test_last_burn_in_iteration_plus_one_keeps_one_draw(
    tiny_series: np.ndarray, tiny_grid: LookupGrid, prior: PriorSpec
) -> None:
    cfg = McmcConfig(n_iter=4, burn_in=3, thin=1)
    samples = run_chain(tiny_series, tiny_grid, prior, (1.0, 0.1), cfg, np.random.default_rng(2))
    assert samples.n_kept == 1
    np.testing.assert_array_equal(samples.iterations, [4])
    assert samples.logp_trace.shape == (4,)


@pytest.mark.parametrize("t", [1, 2, 3])
def test_x_update_reuses_the_cached_observation_density(
    tiny_sampler: GibbsSampler, tiny_state: ChainState, t: int
) -> None:
    current = float(tiny_state.x[t - 1])
    full, _ = tiny_sampler.x_log_target(tiny_state, t, current)
    cached = tiny_sampler._x_evolution_terms(tiny_state, t, current) + tiny_state.obs.log_density(
        tiny_state.params.beta_f_array
    )
    assert cached == pytest.approx(full, abs=1e-10)


def test_x_update_accepts_by_the_target_ratio(
    tiny_sampler: GibbsSampler, tiny_state: ChainState
) -> None:
    driver, mirror = np.random.default_rng(17), np.random.default_rng(17)
    for _ in range(30):
        for t in range(1, tiny_state.T + 1):
            current = float(tiny_state.x[t - 1])
            proposal = von_mises_mixture_sample(current, tiny_sampler.mixture, mirror)
            u = mirror.random()
            log_ratio = (
                tiny_sampler.x_log_target(tiny_state, t, proposal)[0]
                - tiny_sampler.x_log_target(tiny_state, t, current)[0]
            )
            accepted = tiny_sampler.update_x_t(tiny_state, t, driver)
            assert accepted == (math.log(u) < log_ratio)
            assert tiny_state.x[t - 1] == (proposal if accepted else current)
    assert tiny_sampler.audit(tiny_state, 1) < 1e-8


@pytest.mark.slow
def test_x0_update_with_a_flat_target_is_uniform(
    monkeypatch: pytest.MonkeyPatch,
    tiny_series: np.ndarray,
    tiny_grid: LookupGrid,
    prior: PriorSpec,
) -> None:
    flat = replace(prior, x0=VonMisesParams(0.0, 0.0))
    sampler = GibbsSampler(tiny_series, flat, McmcConfig(n_iter=2, burn_in=0, x0_kappa=0.5))
    state = sampler.initial_state(tiny_grid, 1.0, 0.1, np.random.default_rng(0))
    monkeypatch.setattr(sampler, "_g1_prior_moments", lambda st, _x0: (st.g1, 1.0))

    rng = np.random.default_rng(23)
    draws = np.empty(10_000)
    for i in range(draws.size):
        for _ in range(5):
            sampler.update_x0(state, rng)
        draws[i] = state.x0
    counts, _ = np.histogram(draws, bins=10, range=(0.0, TWO_PI))
    assert stats.chisquare(counts).pvalue > 0.001


IRREGULAR_TIMES = np.array([10.0, 20.0, 35.0])


@pytest.fixture
def irregular_grid() -> LookupGrid:
    return build_grid(4, (10.0, 35.0), "time_scaled", 1.0, np.random.default_rng(3))


@pytest.fixture
def irregular_sampler(
    irregular_grid: LookupGrid, tiny_params: ModelParams, prior: PriorSpec
) -> GibbsSampler:
    rng = np.random.default_rng(11)
    _, _, y = generate_path(3, irregular_grid, tiny_params, prior, rng, times=IRREGULAR_TIMES)
    return GibbsSampler(y, prior, McmcConfig(n_iter=20, burn_in=0), times=IRREGULAR_TIMES)


@pytest.fixture
def irregular_state(irregular_sampler: GibbsSampler, irregular_grid: LookupGrid) -> ChainState:
    rng = np.random.default_rng(5)
    state = irregular_sampler.initial_state(irregular_grid, 1.0, 0.1, rng)
    tally = AcceptanceTally()
    for i in range(3):
        irregular_sampler.sweep(state, rng, tally, i + 1)
    return state


def test_sampler_evolves_at_the_observation_times(irregular_sampler: GibbsSampler) -> None:
    np.testing.assert_allclose(irregular_sampler.evolution_times, [10.0, 20.0, 35.0, 47.5])
    explicit = GibbsSampler(
        irregular_sampler.y,
        irregular_sampler.prior,
        irregular_sampler.cfg,
        times=IRREGULAR_TIMES,
        t_next=40.0,
    )
    assert explicit.evolution_times[-1] == 40.0


def test_sampler_rejects_mismatched_times(prior: PriorSpec) -> None:
    cfg = McmcConfig(n_iter=2, burn_in=0)
    with pytest.raises(ValueError):
        GibbsSampler(np.zeros(3), prior, cfg, times=np.array([1.0, 2.0]))
    with pytest.raises(ValueError):
        GibbsSampler(np.zeros(3), prior, cfg, times=np.array([1.0, 3.0, 2.0]))
    with pytest.raises(ValueError):
        GibbsSampler(np.zeros(3), prior, cfg, times=IRREGULAR_TIMES, t_next=35.0)


@pytest.mark.parametrize(("t", "time"), [(2, 20.0), (3, 35.0), (4, 47.5)])
def test_transitions_use_the_observation_times(
    irregular_sampler: GibbsSampler, irregular_state: ChainState, t: int, time: float
) -> None:
    prev = float(irregular_state.x[t - 2])
    expected = transition_moments(
        time, prev, irregular_state.dz, irregular_state.grid, irregular_state.params
    )
    got = irregular_sampler._transition(irregular_state, t, prev)
    np.testing.assert_allclose(got, expected, rtol=1e-10)


@pytest.mark.parametrize("t", [1, 2, 3])
def test_x_target_matches_joint_at_irregular_times(
    irregular_sampler: GibbsSampler, irregular_state: ChainState, t: int
) -> None:
    a, b = 0.8, 4.2
    lp_a, _ = irregular_sampler.x_log_target(irregular_state, t, a)
    lp_b, _ = irregular_sampler.x_log_target(irregular_state, t, b)
    xa, xb = irregular_state.x.copy(), irregular_state.x.copy()
    xa[t - 1], xb[t - 1] = a, b
    sa, sb = _variant(irregular_state, x=xa), _variant(irregular_state, x=xb)
    assert _joint_diff(irregular_sampler, sa, sb) == pytest.approx(lp_a - lp_b, abs=1e-8)


def test_x0_target_matches_joint_at_irregular_times(
    irregular_sampler: GibbsSampler, irregular_state: ChainState
) -> None:
    a, b = 0.3, 4.4
    expected = irregular_sampler.x0_log_target(
        irregular_state, a
    ) - irregular_sampler.x0_log_target(irregular_state, b)
    sa, sb = _variant(irregular_state, x0=a), _variant(irregular_state, x0=b)
    assert _joint_diff(irregular_sampler, sa, sb) == pytest.approx(expected, abs=1e-8)


def test_run_chain_with_irregular_times(
    irregular_sampler: GibbsSampler, irregular_grid: LookupGrid, prior: PriorSpec
) -> None:
    cfg = McmcConfig(n_iter=6, burn_in=2)
    samples = run_chain(
        irregular_sampler.y,
        irregular_grid,
        prior,
        (1.0, 0.1),
        cfg,
        np.random.default_rng(4),
        times=IRREGULAR_TIMES,
    )
    assert samples.n_kept == 4
    assert np.all(np.isfinite(samples.logp_trace))


@pytest.mark.slow
def test_observation_noise_is_recovered(prior: PriorSpec) -> None:
    truth = ModelParams(
        beta_f=(0.0, 0.0, 1.0, -0.5),
        beta_g=(2.5, 0.04, 1.0, 1.0),
        sigma2_eps=0.01,
        sigma2_eta=0.09,
        sigma2_f=0.5,
        sigma2_g=0.64,
    )
    cfg = McmcConfig(n_iter=5000, burn_in=2500)
    hits = 0
    for seed in range(10):
        grid = build_grid(20, (1.0, 50.0), "time_scaled", 0.8, np.random.default_rng(seed))
        _, _, y = generate_path(50, grid, truth, prior, np.random.default_rng(50 + seed))
        samples = run_chain(y, grid, prior, (0.64, 0.09), cfg, np.random.default_rng(seed))
        median = float(np.median(np.sqrt(samples.sigma2_eps)))
        hits += 0.05 <= median <= 0.2
    assert hits >= 8
