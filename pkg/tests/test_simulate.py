from __future__ import annotations

import math

import numpy as np
import pytest

from circstate.circular import TWO_PI
from circstate.config import GridConfig, McmcConfig, ModelConfig, RunConfig
from circstate.data import Dataset
from circstate.model import LookupGrid, ModelParams, PriorSpec
from circstate.simulate import (
    FitOutcome,
    NonlinearSimConfig,
    ReplicateReport,
    SimulationError,
    latent_coverage,
    mcmc_fit_pipeline,
    nonlinear_dataset,
    replicate_harness,
    simulate_from_model,
    simulate_nonlinear,
)


def test_noise_free_skeleton_first_step() -> None:
    y, theta = simulate_nonlinear(NonlinearSimConfig(T=3, sigma_u=0.0, sigma_v=0.0))
    assert theta[0] == pytest.approx(math.pi)
    assert theta[1] == pytest.approx(math.pi + 2.0 * math.atan(0.2))
    assert theta[1] == pytest.approx(3.5364, abs=1e-4)
    assert y[0] == pytest.approx(0.0087, abs=1e-4)


def test_noise_free_skeleton_second_step() -> None:
    _, theta = simulate_nonlinear(NonlinearSimConfig(T=2, sigma_u=0.0, sigma_v=0.0))
    w1 = 0.2
    w2 = 0.05 * w1 + 0.1 * w1 / (1.0 + w1 * w1) + 0.2 * math.cos(1.2)
    assert theta[2] == pytest.approx(math.pi + 2.0 * math.atan(w2))


def test_simulation_shapes_and_ranges() -> None:
    y, theta = simulate_nonlinear(NonlinearSimConfig(T=101, seed=4))
    assert y.shape == (101,)
    assert theta.shape == (102,)
    assert np.all((theta >= 0.0) & (theta < TWO_PI))
    assert np.all(np.isfinite(y))


def test_simulation_is_deterministic_per_seed() -> None:
    a = simulate_nonlinear(NonlinearSimConfig(T=20, seed=2))
    b = simulate_nonlinear(NonlinearSimConfig(T=20, seed=2))
    c = simulate_nonlinear(NonlinearSimConfig(T=20, seed=3))
    np.testing.assert_array_equal(a[0], b[0])
    assert not np.array_equal(a[0], c[0])


def test_singular_start_is_reported_with_its_step() -> None:
    with pytest.raises(SimulationError) as excinfo:
        simulate_nonlinear(NonlinearSimConfig(T=3, theta0=0.0))
    assert excinfo.value.step == 0


def test_simulation_config_validation() -> None:
    with pytest.raises(ValueError):
        NonlinearSimConfig(T=0)
    with pytest.raises(ValueError):
        NonlinearSimConfig(sigma_u=-0.1)


def test_nonlinear_dataset_attaches_true_angles() -> None:
    d = nonlinear_dataset(NonlinearSimConfig(T=10, seed=1))
    assert d.T == 10
    np.testing.assert_array_equal(d.times, np.arange(1.0, 11.0))
    assert d.true_theta is not None
    assert d.true_theta.shape == (10,)


def test_model_draw_dataset(
    tiny_grid: LookupGrid, tiny_params: ModelParams, prior: PriorSpec
) -> None:
    a = simulate_from_model(4, tiny_grid, tiny_params, prior, 6)
    b = simulate_from_model(4, tiny_grid, tiny_params, prior, 6)
    assert a.T == 4
    np.testing.assert_array_equal(a.y, b.y)
    assert a.true_theta is not None


def _toy_generator(seed: int) -> Dataset:
    rng = np.random.default_rng(seed)
    t = np.arange(1.0, 7.0)
    return Dataset(t, rng.standard_normal(6), true_theta=np.full(6, 1.0))


def _wide_pipeline(train: Dataset, seed: int) -> FitOutcome:
    rng = np.random.default_rng(seed)
    latent = np.full((50, train.T), 1.0)
    return FitOutcome(rng.normal(0.0, 10.0, 500), latent)


def test_replicate_harness_scores_every_replicate() -> None:
    report = replicate_harness(_toy_generator, _wide_pipeline, 4, 0, n_bins=10)
    assert len(report.outcomes) == 4
    assert len({o.seed for o in report.outcomes}) == 4
    summary = report.summary()
    assert summary.n_reps == 4
    assert summary.failures == 0
    assert summary.coverage == pytest.approx(1.0)
    assert summary.mean_latent_coverage == pytest.approx(1.0)
    assert summary.mean_width > 20.0
    first = report.outcomes[0]
    assert first.y_holdout == pytest.approx(_toy_generator(first.seed).y[-1])


def test_replicate_harness_is_deterministic() -> None:
    a = replicate_harness(_toy_generator, _wide_pipeline, 3, 11)
    b = replicate_harness(_toy_generator, _wide_pipeline, 3, 11)
    assert a == b


def test_replicate_harness_records_failures() -> None:
    calls: list[int] = []

    def flaky(train: Dataset, seed: int) -> FitOutcome:
        calls.append(seed)
        if len(calls) == 2:
            msg = "chain diverged"
            raise RuntimeError(msg)
        return _wide_pipeline(train, seed)

    report = replicate_harness(_toy_generator, flaky, 3, 0)
    summary = report.summary()
    assert summary.failures == 1
    assert report.outcomes[1].failed
    assert report.outcomes[1].width is None
    assert "diverged" in (report.outcomes[1].error or "")


def test_replicate_harness_raises_when_everything_fails() -> None:
    def broken(_train: Dataset, _seed: int) -> FitOutcome:
        msg = "no luck"
        raise ValueError(msg)

    with pytest.raises(SimulationError, match="no luck"):
        replicate_harness(_toy_generator, broken, 2, 0)
    with pytest.raises(ValueError):
        replicate_harness(_toy_generator, broken, 0, 0)


def test_empty_report_summary_is_nan() -> None:
    summary = ReplicateReport(()).summary()
    assert math.isnan(summary.coverage)
    assert summary.mean_latent_coverage is None


def test_latent_coverage_counts_hits() -> None:
    latent = np.column_stack([np.full(20, 1.0), np.full(20, 4.0)])
    assert latent_coverage(latent, np.array([1.0, 1.0]), 10, 0.95) == pytest.approx(0.5)


def test_mcmc_fit_pipeline_runs_end_to_end() -> None:
    run = RunConfig(
        grid=GridConfig(n=4),
        mcmc=McmcConfig(n_iter=4, burn_in=1),
        model=ModelConfig(sigma2_g=1.0, sigma2_eta=0.1),
    )
    d = nonlinear_dataset(NonlinearSimConfig(T=6, seed=0)).split_holdout()
    outcome = mcmc_fit_pipeline(run)(d, 3)
    assert outcome.predictive.shape == (3,)
    assert outcome.latent is not None
    assert outcome.latent.shape == (3, 5)


@pytest.mark.slow
def test_forecast_coverage_on_the_benchmark_series() -> None:
    run = RunConfig(
        grid=GridConfig(n=20),
        mcmc=McmcConfig(n_iter=2000, burn_in=1000),
    )

    def generator(seed: int) -> Dataset:
        return nonlinear_dataset(NonlinearSimConfig(T=41, seed=seed))

    report = replicate_harness(generator, mcmc_fit_pipeline(run), 10, 2024)
    summary = report.summary()
    assert summary.failures <= 2
    assert summary.coverage >= 0.7


@pytest.mark.slow
def test_predictive_coverage_and_latent_recovery_on_model_draws(prior: PriorSpec) -> None:
    from circstate.model import build_grid

    run = RunConfig(
        grid=GridConfig(n=20),
        mcmc=McmcConfig(n_iter=5000, burn_in=2500),
        model=ModelConfig(sigma2_g=0.64, sigma2_eta=0.09),
    )
    params = ModelParams(
        beta_f=(0.0, 0.0, 1.0, -0.5),
        beta_g=(2.5, 0.04, 1.0, 1.0),
        sigma2_eps=0.01,
        sigma2_eta=0.09,
        sigma2_f=0.5,
        sigma2_g=0.64,
    )

    def generator(seed: int) -> Dataset:
        grid = build_grid(20, (1.0, 51.0), "time_scaled", 0.8, np.random.default_rng(seed))
        return simulate_from_model(51, grid, params, prior, seed)

    report = replicate_harness(generator, mcmc_fit_pipeline(run), 20, 7, mass=0.5)
    assert sum(bool(o.covered) for o in report.outcomes) >= 16
    pair_hits = sum(o.latent_coverage or 0.0 for o in report.outcomes)
    assert pair_hits / len(report.outcomes) >= 0.7


@pytest.mark.slow
def test_benchmark_series_runs_clean_at_desk_scale() -> None:
    from circstate.forecast import hpd_interval, posterior_predictive
    from circstate.mcmc import run_chains
    from circstate.model import build_grid, time_range

    train = nonlinear_dataset(NonlinearSimConfig(T=101, seed=0)).split_holdout()
    model = ModelConfig()
    sigma_g = math.sqrt(model.sigma2_g)
    t_range = time_range(train.times)
    grid = build_grid(20, t_range, "time_scaled", sigma_g, np.random.default_rng(10))
    samples = run_chains(
        train.y,
        grid,
        PriorSpec.defaults(),
        (model.sigma2_g, model.sigma2_eta),
        McmcConfig(n_iter=20_000, burn_in=10_000),
        11,
        times=train.times,
        t_next=train.next_time(),
    )
    assert samples.logp_trace.shape == (20_000,)
    assert np.all(np.isfinite(samples.logp_trace))
    draws = posterior_predictive(samples, train.y, np.random.default_rng(12), times=train.times)
    lo, hi = hpd_interval(draws.y_next, 0.95)
    assert math.isfinite(lo)
    assert math.isfinite(hi)
    assert hi > lo
