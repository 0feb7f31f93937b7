"""Synthetic series: a nonlinear circular benchmark, model-consistent draws and replicates."""

from __future__ import annotations

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from circstate.circular import mod_2pi
from circstate.config import RunConfig
from circstate.data import Dataset
from circstate.forecast import hpd_interval, latent_density_grid, posterior_predictive
from circstate.mcmc import run_chains
from circstate.model import (
    LookupGrid,
    ModelParams,
    PriorSpec,
    build_grid,
    generate_path,
    time_range,
)

logger = logging.getLogger(__name__)

SINGULARITY_TOLERANCE = 1e-12


class SimulationError(RuntimeError):
    def __init__(self, msg: str, step: int | None = None) -> None:
        self.step = step
        super().__init__(f"step {step}: {msg}" if step is not None else msg)


@dataclass(frozen=True)
class NonlinearSimConfig:
    T: int = 101
    alpha: float = 0.05
    beta: float = 0.1
    gamma: float = 0.2
    sigma_u: float = 0.1
    sigma_v: float = 0.1
    theta0: float = math.pi
    seed: int = 0

    def __post_init__(self) -> None:
        if self.T < 1:
            msg = f"T must be at least 1, got {self.T}"
            raise ValueError(msg)
        # zero noise gives the deterministic skeleton
        if self.sigma_u < 0.0 or self.sigma_v < 0.0:
            msg = "noise scales must be nonnegative"
            raise ValueError(msg)


def _half_angle_tangent(theta: float, step: int) -> float:
    half = (theta - math.pi) / 2.0
    if abs(math.cos(half)) < SINGULARITY_TOLERANCE:
        msg = f"tan((theta - pi)/2) is singular at theta={theta:.6g}"
        raise SimulationError(msg, step)
    return math.tan(half)


def simulate_nonlinear(cfg: NonlinearSimConfig) -> tuple[np.ndarray, np.ndarray]:
    """Returns y_1..y_T and θ_0..θ_T.

    The state recursion runs on w_t = tan((θ_t - π)/2):
    w_t = α w_{t-1} + β w_{t-1}/(1 + w²_{t-1}) + γ cos(1.2(t - 1)) + u_t,
    θ_t = π + 2 atan(w_t) mod 2π and y_t = tan²(θ_t)/20 + v_t.
    """
    rng = np.random.default_rng(cfg.seed)
    theta = np.empty(cfg.T + 1)
    y = np.empty(cfg.T)
    theta[0] = mod_2pi(cfg.theta0)
    w = _half_angle_tangent(theta[0], 0)
    for t in range(1, cfg.T + 1):
        u = cfg.sigma_u * rng.standard_normal()
        v = cfg.sigma_v * rng.standard_normal()
        forcing = cfg.gamma * math.cos(1.2 * (t - 1))
        w = cfg.alpha * w + cfg.beta * w / (1.0 + w * w) + forcing + u
        if not math.isfinite(w):
            msg = "state recursion overflowed"
            raise SimulationError(msg, t)
        theta[t] = mod_2pi(math.pi + 2.0 * math.atan(w))
        if abs(math.cos(theta[t])) < SINGULARITY_TOLERANCE:
            msg = f"tan(theta) is singular at theta={theta[t]:.6g}"
            raise SimulationError(msg, t)
        y[t - 1] = math.tan(theta[t]) ** 2 / 20.0 + v
    return y, theta


def nonlinear_dataset(cfg: NonlinearSimConfig) -> Dataset:
    y, theta = simulate_nonlinear(cfg)
    return Dataset(np.arange(1, cfg.T + 1, dtype=float), y, true_theta=theta[1:])


def simulate_from_model(
    T: int, grid: LookupGrid, params: ModelParams, prior: PriorSpec, seed: int
) -> Dataset:
    """Draw a series from the look-up-table model itself, true angles attached."""
    rng = np.random.default_rng(seed)
    path, _, y = generate_path(T, grid, params, prior, rng)
    return Dataset(np.arange(1, T + 1, dtype=float), y, true_theta=path.x[:T])


@dataclass(frozen=True, eq=False)
class FitOutcome:
    predictive: np.ndarray
    latent: np.ndarray | None = None


DatasetGenerator = Callable[[int], Dataset]
FitPipeline = Callable[[Dataset, int], FitOutcome]


@dataclass(frozen=True)
class ReplicateOutcome:
    replicate: int
    seed: int
    y_holdout: float | None = None
    hpd_lo: float | None = None
    hpd_hi: float | None = None
    covered: bool | None = None
    latent_coverage: float | None = None
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None

    @property
    def width(self) -> float | None:
        if self.hpd_lo is None or self.hpd_hi is None:
            return None
        return self.hpd_hi - self.hpd_lo


@dataclass(frozen=True)
class ReplicateSummary:
    n_reps: int
    failures: int
    coverage: float
    mean_latent_coverage: float | None
    mean_width: float


@dataclass(frozen=True)
class ReplicateReport:
    outcomes: tuple[ReplicateOutcome, ...]

    def summary(self) -> ReplicateSummary:
        ok = [o for o in self.outcomes if not o.failed]
        latent = [o.latent_coverage for o in ok if o.latent_coverage is not None]
        return ReplicateSummary(
            n_reps=len(self.outcomes),
            failures=len(self.outcomes) - len(ok),
            coverage=float(np.mean([bool(o.covered) for o in ok])) if ok else math.nan,
            mean_latent_coverage=float(np.mean(latent)) if latent else None,
            mean_width=float(np.mean([o.width for o in ok])) if ok else math.nan,
        )


def latent_coverage(latent: np.ndarray, truth: np.ndarray, n_bins: int, mass: float) -> float:
    """Fraction of times whose true angle lies in the high-density cells."""
    grid = latent_density_grid(latent, n_bins)
    mask = grid.high_density_mask(mass)
    hits = [mask[grid.bin_of(float(angle)), t] for t, angle in enumerate(truth)]
    return float(np.mean(hits))


def replicate_harness(
    generator: DatasetGenerator,
    fit_pipeline: FitPipeline,
    n_reps: int,
    seed: int,
    *,
    level: float = 0.95,
    mass: float = 0.95,
    n_bins: int = 100,
) -> ReplicateReport:
    """generate → hold out the last y → fit → score, once per replicate seed."""
    if n_reps < 1:
        msg = f"n_reps must be at least 1, got {n_reps}"
        raise ValueError(msg)
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n_reps)]
    outcomes: list[ReplicateOutcome] = []
    for rep, rep_seed in enumerate(seeds):
        try:
            full = generator(rep_seed)
            train = full.split_holdout()
            fit = fit_pipeline(train, rep_seed)
            lo, hi = hpd_interval(fit.predictive, level)
            holdout = train.y_holdout
            coverage = None
            if fit.latent is not None and train.true_theta is not None:
                coverage = latent_coverage(fit.latent, train.true_theta, n_bins, mass)
            covered = lo <= holdout <= hi
            outcomes.append(ReplicateOutcome(rep, rep_seed, holdout, lo, hi, covered, coverage))
        except (RuntimeError, ValueError) as exc:
            logger.warning("Replicate %d failed: %s", rep, exc)
            outcomes.append(ReplicateOutcome(rep, rep_seed, error=str(exc)))
    if all(o.failed for o in outcomes):
        msg = f"all {n_reps} replicates failed; first error: {outcomes[0].error}"
        raise SimulationError(msg)
    return ReplicateReport(tuple(outcomes))


def mcmc_fit_pipeline(run: RunConfig) -> FitPipeline:
    """Fit with the configured grid, priors and fixed evolution variances."""
    prior = run.prior.to_spec()

    def fit(train: Dataset, seed: int) -> FitOutcome:
        rng = np.random.default_rng(seed)
        t_range = time_range(train.times)
        grid = build_grid(run.grid.n, t_range, run.grid.mode, math.sqrt(run.model.sigma2_g), rng)
        samples = run_chains(
            train.y,
            grid,
            prior,
            (run.model.sigma2_g, run.model.sigma2_eta),
            run.mcmc,
            seed,
            n_chains=run.mcmc.chains,
            times=train.times,
            t_next=train.next_time(),
            fixed_mask=run.model.beta_g_fixed,
            k_max=run.model.k_max,
        )
        draws = posterior_predictive(
            samples, train.y, rng, times=train.times, t_next=train.next_time()
        )
        return FitOutcome(draws.y_next, samples.latent_angles())

    return fit
