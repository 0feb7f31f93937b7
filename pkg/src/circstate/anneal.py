"""Simulated-annealing MLE of the evolution scales (σ_g, σ_η).

Every other quantity is integrated out by plain Monte Carlo over the prior, so the
objective is log(1/M Σ_m [y | draw_m]).  Each objective call reuses the same seed
(common random numbers), which keeps the surface smooth between neighbouring proposals.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from circstate.config import AnnealConfig
from circstate.gp import SingularMatrixError
from circstate.model import (
    DEFAULT_FIXED_MASK,
    LatentPath,
    LookupGrid,
    ModelParams,
    PriorSpec,
    default_times,
    generate_latent,
    obs_log_density,
)

logger = logging.getLogger(__name__)

MIN_RECOMMENDED_DRAWS = 100


class IntegratedLikelihoodError(RuntimeError):
    """Raised when every Monte Carlo likelihood term underflows."""


@dataclass(frozen=True)
class AnnealStep:
    iteration: int
    temperature: float
    proposed_sigma_g: float
    proposed_sigma_eta: float
    proposed_loglik: float
    accepted: bool
    sigma_g: float
    sigma_eta: float
    loglik: float
    best_sigma_g: float
    best_sigma_eta: float
    best_loglik: float


@dataclass(frozen=True)
class AnnealResult:
    sigma_g: float
    sigma_eta: float
    loglik: float
    trace: tuple[AnnealStep, ...]

    @property
    def sigma2_g(self) -> float:
        return self.sigma_g**2

    @property
    def sigma2_eta(self) -> float:
        return self.sigma_eta**2


def sample_prior_draw(
    T: int,
    grid: LookupGrid,
    prior: PriorSpec,
    sigma_g: float,
    sigma_eta: float,
    rng: np.random.Generator,
    *,
    times: np.ndarray | None = None,
    fixed_mask: tuple[bool, ...] = DEFAULT_FIXED_MASK,
) -> tuple[ModelParams, LatentPath]:
    """One joint draw of (β_f, β_g, σ²_ε, σ²_f, latent path) given the evolution scales."""
    beta_f = prior.beta_f.sample(rng)
    beta_g = list(prior.beta_g.mean)
    free = tuple(i for i, fixed in enumerate(fixed_mask) if not fixed)
    if free:
        for i, value in zip(free, prior.beta_g.restricted(free).sample(rng), strict=True):
            beta_g[i] = float(value)
    params = ModelParams(
        beta_f=tuple(beta_f),
        beta_g=tuple(beta_g),
        sigma2_eps=prior.sigma2_eps.sample(rng),
        sigma2_eta=sigma_eta**2,
        sigma2_f=prior.sigma2_f.sample(rng),
        sigma2_g=sigma_g**2,
        beta_g_fixed_mask=fixed_mask,
    )
    path, _ = generate_latent(T, grid, params, prior, rng, times=times)
    return params, path


def integrated_loglik_mc(
    sigma_g: float,
    sigma_eta: float,
    y: np.ndarray,
    grid: LookupGrid,
    prior: PriorSpec,
    m: int,
    rng: np.random.Generator,
    *,
    times: np.ndarray | None = None,
    fixed_mask: tuple[bool, ...] = DEFAULT_FIXED_MASK,
) -> float:
    """log of the Monte Carlo average of [y | draw] over ``m`` prior draws."""
    if not (sigma_g > 0.0 and sigma_eta > 0.0):
        msg = f"evolution scales must be positive, got ({sigma_g}, {sigma_eta})"
        raise ValueError(msg)
    if m < 1:
        msg = f"Monte Carlo sample count must be at least 1, got {m}"
        raise ValueError(msg)
    if m < MIN_RECOMMENDED_DRAWS:
        logger.warning("Integrated likelihood with only %d Monte Carlo draws is noisy", m)
    y = np.asarray(y, dtype=float)
    T = int(y.size)
    times = default_times(T) if times is None else np.asarray(times, dtype=float)
    if not math.isclose(grid.scale.sigma, sigma_g, rel_tol=1e-12):
        grid = grid.with_scale(sigma_g)

    terms = np.empty(m)
    for i in range(m):
        params, path = sample_prior_draw(
            T, grid, prior, sigma_g, sigma_eta, rng, times=times, fixed_mask=fixed_mask
        )
        terms[i] = obs_log_density(y, path.x[:T], times, params)
    if not np.any(np.isfinite(terms)):
        msg = f"all {m} Monte Carlo likelihood terms underflowed; increase the sample count"
        raise IntegratedLikelihoodError(msg)
    return float(logsumexp(terms) - math.log(m))


Objective = Callable[[float, float], float]


def _step(
    iteration: int,
    temperature: float,
    proposal: tuple[float, float],
    proposal_ll: float,
    accepted: bool,
    current: tuple[float, float],
    current_ll: float,
    best: tuple[float, float],
    best_ll: float,
) -> AnnealStep:
    return AnnealStep(
        iteration=iteration,
        temperature=temperature,
        proposed_sigma_g=proposal[0],
        proposed_sigma_eta=proposal[1],
        proposed_loglik=proposal_ll,
        accepted=accepted,
        sigma_g=current[0],
        sigma_eta=current[1],
        loglik=current_ll,
        best_sigma_g=best[0],
        best_sigma_eta=best[1],
        best_loglik=best_ll,
    )


def anneal(
    y: np.ndarray,
    grid: LookupGrid,
    prior: PriorSpec,
    cfg: AnnealConfig,
    seed: int,
    *,
    times: np.ndarray | None = None,
    fixed_mask: tuple[bool, ...] = DEFAULT_FIXED_MASK,
    objective: Objective | None = None,
) -> AnnealResult:
    """Maximize the integrated likelihood over (σ_g, σ_η) with log-space random walks.

    Temperatures follow T_k = T₀·c^k.  ``objective`` replaces the Monte Carlo
    likelihood, mostly for tests.
    """
    crn_seq, walk_seq = np.random.SeedSequence(seed).spawn(2)
    crn_seed = int(crn_seq.generate_state(1)[0])
    rng = np.random.default_rng(walk_seq)

    def evaluate(sigma_g: float, sigma_eta: float) -> float:
        if objective is not None:
            return objective(sigma_g, sigma_eta)
        try:
            return integrated_loglik_mc(
                sigma_g,
                sigma_eta,
                y,
                grid,
                prior,
                cfg.mc_samples,
                np.random.default_rng(crn_seed),
                times=times,
                fixed_mask=fixed_mask,
            )
        except SingularMatrixError as exc:
            msg = f"integrated likelihood failed at sigma_g={sigma_g:.4g}: {exc}"
            raise IntegratedLikelihoodError(msg) from exc

    t0 = cfg.initial_temperature
    current = (cfg.init_sigma_g, cfg.init_sigma_eta)
    current_ll = evaluate(*current)
    best, best_ll = current, current_ll
    steps = [_step(0, t0, current, current_ll, True, current, current_ll, best, best_ll)]
    sd = np.asarray(cfg.proposal_sd, dtype=float)
    for i in range(1, cfg.iterations + 1):
        temp = t0 * cfg.cooling**i
        jitter = np.exp(sd * rng.standard_normal(2))
        proposal = (current[0] * float(jitter[0]), current[1] * float(jitter[1]))
        proposal_ll = evaluate(*proposal)
        delta = proposal_ll - current_ll
        accepted = delta >= 0.0 or math.log(rng.random()) < delta / temp
        if accepted:
            current, current_ll = proposal, proposal_ll
            if current_ll > best_ll:
                best, best_ll = current, current_ll
        steps.append(
            _step(i, temp, proposal, proposal_ll, accepted, current, current_ll, best, best_ll)
        )
        logger.debug(
            "anneal %d: T=%.4g proposal=(%.4g, %.4g) ll=%.4f accepted=%s",
            i,
            temp,
            *proposal,
            proposal_ll,
            accepted,
        )
    logger.info("Annealing best: sigma_g=%.4g sigma_eta=%.4g loglik=%.4f", *best, best_ll)
    return AnnealResult(best[0], best[1], best_ll, tuple(steps))
