"""Metropolis-within-Gibbs sampler for the wrapped-GP state-space model.

Linear-Gaussian blocks (β_f, β_g, g*(1, x₀), D_z, x_{T+1}) are drawn exactly from
their full conditionals.  The remaining blocks use symmetric random-walk proposals,
so acceptance is a plain target ratio.  D_z is handled in whitened coordinates
u = L⁻¹(D_z - Hβ_g)/σ_g because the grid correlation matrix is badly conditioned.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Iterator, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg

from circstate.circular import (
    DEFAULT_K_MAX,
    TWO_PI,
    VonMisesMixture,
    VonMisesParams,
    discrete_rw_propose,
    mod_2pi,
    truncated_normal_sample,
    von_mises_logpdf,
    von_mises_mixture_sample,
    von_mises_sample,
)
from circstate.config import McmcConfig
from circstate.gp import SingularMatrixError, basis_matrix, cholesky_factor
from circstate.model import (
    DEFAULT_FIXED_MASK,
    DegenerateTransitionError,
    LatentPath,
    LookupGrid,
    ModelParams,
    ObservationCandidate,
    ObservationLikelihood,
    PriorSpec,
    default_times,
    dz_given_g1,
    evolution_times,
    normal_logpdf,
)

logger = logging.getLogger(__name__)

G1_VARIANCE_FLOOR = 1e-12
AUDIT_TOLERANCE = 1e-8
SWEEP_ORDER = ("beta_f", "beta_g", "sigma_eps", "sigma_f", "x0", "g1", "dz", "x", "x_last", "k")
EVOLUTION_BLOCKS = ("sigma_eta", "sigma_g")
MH_BLOCKS = ("sigma_eps", "sigma_f", "x0", "x", "k", *EVOLUTION_BLOCKS)
RECORDED = (
    "iterations",
    "logp",
    "beta_f",
    "beta_g",
    "sigma2_eps",
    "sigma2_f",
    "sigma2_eta",
    "sigma2_g",
    "x0",
    "x",
    "k",
)

ProgressCallback = Callable[[int], None]


class ChainError(RuntimeError):
    """A block update failed; carries where in the chain it happened."""

    def __init__(self, iteration: int, block: str, detail: str) -> None:
        self.iteration = iteration
        self.block = block
        super().__init__(f"iteration {iteration}, block {block}: {detail}")


@dataclass(eq=False)
class ChainState:
    params: ModelParams
    x0: float
    x: np.ndarray
    k: np.ndarray
    g1: float
    dz: np.ndarray
    grid: LookupGrid
    obs: ObservationLikelihood

    @property
    def T(self) -> int:
        return int(self.x.size) - 1

    @property
    def x_star(self) -> np.ndarray:
        return self.x + TWO_PI * self.k

    @property
    def path(self) -> LatentPath:
        return LatentPath(self.x0, self.x.copy(), self.k.copy(), self.g1)

    def copy(self) -> ChainState:
        angles = self.x[: self.T]
        obs = ObservationLikelihood.for_params(self.obs.y, self.obs.times, angles, self.params)
        return replace(self, x=self.x.copy(), k=self.k.copy(), dz=self.dz.copy(), obs=obs)


@dataclass
class AcceptanceTally:
    proposed: dict[str, int] = field(default_factory=dict)
    accepted: dict[str, int] = field(default_factory=dict)

    def record(self, block: str, accepted: bool) -> None:
        self.proposed[block] = self.proposed.get(block, 0) + 1
        self.accepted[block] = self.accepted.get(block, 0) + int(accepted)

    def rates(self) -> dict[str, float]:
        return {b: self.accepted.get(b, 0) / n for b, n in self.proposed.items() if n}


@dataclass(frozen=True, eq=False)
class SampleSet:
    """Kept draws of one or more chains; rows are aligned across arrays."""

    iterations: np.ndarray
    chain: np.ndarray
    logp: np.ndarray
    beta_f: np.ndarray
    beta_g: np.ndarray
    sigma2_eps: np.ndarray
    sigma2_f: np.ndarray
    sigma2_eta: np.ndarray
    sigma2_g: np.ndarray
    x0: np.ndarray
    x: np.ndarray
    k: np.ndarray
    beta_g_fixed_mask: tuple[bool, ...] = DEFAULT_FIXED_MASK
    evolution_sampled: bool = False
    acceptance: dict[str, float] = field(default_factory=dict)
    logp_trace: np.ndarray = field(default_factory=lambda: np.empty(0))

    @property
    def n_kept(self) -> int:
        return int(self.iterations.size)

    @property
    def T(self) -> int:
        return int(self.x.shape[1]) - 1

    @property
    def free_indices(self) -> tuple[int, ...]:
        return tuple(i for i, fixed in enumerate(self.beta_g_fixed_mask) if not fixed)

    def latent_angles(self) -> np.ndarray:
        """x_1..x_T for every kept draw."""
        return self.x[:, : self.T]

    def params_at(self, i: int) -> ModelParams:
        return ModelParams(
            beta_f=tuple(self.beta_f[i]),
            beta_g=tuple(self.beta_g[i]),
            sigma2_eps=float(self.sigma2_eps[i]),
            sigma2_eta=float(self.sigma2_eta[i]),
            sigma2_f=float(self.sigma2_f[i]),
            sigma2_g=float(self.sigma2_g[i]),
            beta_g_fixed_mask=self.beta_g_fixed_mask,
        )


def merge_sample_sets(sets: Sequence[SampleSet]) -> SampleSet:
    if not sets:
        msg = "nothing to merge"
        raise ValueError(msg)
    first = sets[0]
    if any(s.T != first.T or s.beta_g_fixed_mask != first.beta_g_fixed_mask for s in sets):
        msg = "sample sets disagree on series length or beta_g mask"
        raise ValueError(msg)
    total = sum(s.n_kept for s in sets) or 1
    blocks = sorted({b for s in sets for b in s.acceptance})
    acceptance = {
        b: sum(s.acceptance.get(b, 0.0) * s.n_kept for s in sets) / total for b in blocks
    }

    def stack(name: str) -> np.ndarray:
        return np.concatenate([getattr(s, name) for s in sets], axis=0)

    return SampleSet(
        iterations=stack("iterations"),
        chain=stack("chain"),
        logp=stack("logp"),
        beta_f=stack("beta_f"),
        beta_g=stack("beta_g"),
        sigma2_eps=stack("sigma2_eps"),
        sigma2_f=stack("sigma2_f"),
        sigma2_eta=stack("sigma2_eta"),
        sigma2_g=stack("sigma2_g"),
        x0=stack("x0"),
        x=stack("x"),
        k=stack("k"),
        beta_g_fixed_mask=first.beta_g_fixed_mask,
        evolution_sampled=first.evolution_sampled,
        acceptance=acceptance,
        logp_trace=stack("logp_trace"),
    )


def _precision_moments(precision: np.ndarray, rhs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    factor = cholesky_factor(precision, label="conditional precision")
    cov = factor.solve(np.eye(rhs.size))
    return factor.solve(rhs), 0.5 * (cov + cov.T)


def _precision_draw(precision: np.ndarray, rhs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw from N(P⁻¹b, P⁻¹) using the factor of P."""
    factor = cholesky_factor(precision, label="conditional precision")
    z = rng.standard_normal(rhs.size)
    return factor.solve(rhs) + linalg.solve_triangular(factor.lower.T, z, lower=False)


@dataclass(frozen=True, eq=False)
class _EvolutionTerms:
    """Whitened quantities shared by the β_g, g*(1, x₀) and D_z conditionals.

    Queries are (1, x₀) followed by (t, x_{t-1}) for t = 2..T+1.
    """

    h: np.ndarray
    v: np.ndarray
    gp_var: np.ndarray
    variances: np.ndarray
    targets: np.ndarray


class GibbsSampler:
    """Full conditionals and sweeps for one series.

    ``times`` are the observation times t_1..t_T (default 1..T) and ``t_next`` the time
    of x_{T+1} (default: the next evenly spaced time).  g*(t_1, x₀) drives x_1 and
    x*_t evolves from x_{t-1} at time t_t.
    """

    def __init__(
        self,
        y: np.ndarray,
        prior: PriorSpec,
        cfg: McmcConfig,
        *,
        times: np.ndarray | None = None,
        t_next: float | None = None,
        fixed_mask: tuple[bool, ...] = DEFAULT_FIXED_MASK,
        k_max: int = DEFAULT_K_MAX,
    ) -> None:
        self.y = np.asarray(y, dtype=float)
        if self.y.size < 1:
            msg = "the sampler needs at least one observation"
            raise ValueError(msg)
        self.times = default_times(self.y.size) if times is None else np.asarray(times, float)
        if self.times.shape != self.y.shape:
            msg = f"expected {self.y.size} observation times, got shape {self.times.shape}"
            raise ValueError(msg)
        self.evolution_times = evolution_times(self.times, t_next)
        self.prior = prior
        self.cfg = cfg
        self.fixed_mask = tuple(fixed_mask)
        self.k_max = k_max
        self.free = tuple(i for i, fixed in enumerate(self.fixed_mask) if not fixed)
        self.fixed = tuple(i for i, fixed in enumerate(self.fixed_mask) if fixed)
        self.mixture = VonMisesMixture(cfg.mixture_kappas, cfg.mixture_weights)
        self._beta_f_prec, self._beta_f_prec_mean = prior.beta_f.precision()
        if self.free:
            self._beta_g_prior = prior.beta_g.restricted(self.free)
            self._beta_g_prec, self._beta_g_prec_mean = self._beta_g_prior.precision()

    @property
    def T(self) -> int:
        return int(self.y.size)

    def blocks(self) -> tuple[str, ...]:
        if self.cfg.sample_evolution_variances:
            return SWEEP_ORDER + EVOLUTION_BLOCKS
        return SWEEP_ORDER

    def initial_state(
        self,
        grid: LookupGrid,
        sigma2_g: float,
        sigma2_eta: float,
        rng: np.random.Generator,
    ) -> ChainState:
        """Prior means and modes for parameters, uniform angles, K = 0, GP values from the prior."""
        if not sigma2_eta > 0.0:
            msg = "the sampler needs sigma2_eta > 0"
            raise ValueError(msg)
        beta_g = self.prior.beta_g.mean
        params = ModelParams(
            beta_f=self.prior.beta_f.mean,
            beta_g=beta_g,
            sigma2_eps=self.prior.sigma2_eps.mode,
            sigma2_eta=sigma2_eta,
            sigma2_f=self.prior.sigma2_f.mode,
            sigma2_g=sigma2_g,
            beta_g_fixed_mask=self.fixed_mask,
        )
        if not math.isclose(grid.scale.variance, sigma2_g, rel_tol=1e-12):
            grid = grid.with_scale(math.sqrt(sigma2_g))
        x0 = mod_2pi(self.prior.x0.mu)
        x = rng.uniform(0.0, TWO_PI, self.T + 1)
        k = np.zeros(self.T + 1, dtype=int)
        h0 = basis_matrix(self.evolution_times[:1], np.array([x0]))[0]
        g1 = float(h0 @ params.beta_g_array + math.sqrt(sigma2_g) * rng.standard_normal())
        mean, cov = dz_given_g1(grid, x0, g1, params, t1=float(self.evolution_times[0]))
        dz = mean + cholesky_factor(cov, label="D_z conditional covariance").unwhiten(
            rng.standard_normal(grid.n)
        )
        obs = ObservationLikelihood.for_params(self.y, self.times, x[: self.T], params)
        return ChainState(params, x0, x, k, g1, dz, grid, obs)

    # -- shared evaluation -------------------------------------------------

    def _evolution_terms(
        self,
        state: ChainState,
        *,
        params: ModelParams | None = None,
        grid: LookupGrid | None = None,
    ) -> _EvolutionTerms:
        p = params or state.params
        grid = grid or state.grid
        T = state.T
        times = self.evolution_times
        angles = np.concatenate([[state.x0], state.x[:T]])
        v = grid.factor.whiten(grid.cross(times, angles))
        gp_var = np.maximum(p.sigma2_g * (1.0 - np.sum(v * v, axis=0)), 0.0)
        variances = p.sigma2_eta + gp_var
        variances[0] = max(gp_var[0], G1_VARIANCE_FLOOR * p.sigma2_g)
        targets = np.concatenate([[state.g1], state.x_star[1:]])
        return _EvolutionTerms(basis_matrix(times, angles), v, gp_var, variances, targets)

    def _evolution_log_density(
        self,
        state: ChainState,
        *,
        params: ModelParams | None = None,
        grid: LookupGrid | None = None,
    ) -> float:
        """log [D_z] + log [g1 | D_z, x₀] + log [x*₁ | g1] + Σ log [x*_t | x_{t-1}, D_z]."""
        p = params or state.params
        grid = grid or state.grid
        terms = self._evolution_terms(state, params=p, grid=grid)
        beta = p.beta_g_array
        w = grid.factor.whiten(state.dz - grid.basis @ beta)
        n = grid.n
        lp = -0.5 * (
            float(w @ w) / p.sigma2_g
            + n * math.log(p.sigma2_g)
            + grid.factor.log_det
            + n * math.log(TWO_PI)
        )
        means = terms.h @ beta + terms.v.T @ w
        residual = terms.targets - means
        quad = residual**2 / terms.variances + np.log(terms.variances) + math.log(TWO_PI)
        lp -= 0.5 * float(np.sum(quad))
        if p.sigma2_eta <= 0.0:
            msg = "x*_1 | g1 is degenerate when sigma2_eta = 0"
            raise DegenerateTransitionError(msg)
        lp += normal_logpdf(float(state.x_star[0]), state.g1, p.sigma2_eta)
        return lp

    def _prior_log_density(self, p: ModelParams) -> float:
        lp = self.prior.beta_f.logpdf(p.beta_f_array)
        if self.free:
            lp += self._beta_g_prior.logpdf(p.beta_g_array[list(self.free)])
        lp += self.prior.sigma2_eps.logpdf(p.sigma2_eps) + self.prior.sigma2_f.logpdf(p.sigma2_f)
        if self.cfg.sample_evolution_variances:
            bound = self.cfg.evolution_variance_bound
            if p.sigma2_eta > bound or p.sigma2_g > bound:
                return -math.inf
            lp += self.prior.sigma2_eta.logpdf(p.sigma2_eta)
            lp += self.prior.sigma2_g.logpdf(p.sigma2_g)
        return lp

    def log_joint(self, state: ChainState) -> float:
        """Unnormalized log-density of the augmented posterior at ``state``."""
        p = state.params
        lp = self._prior_log_density(p)
        lp += float(von_mises_logpdf(state.x0, self.prior.x0))
        lp += self._evolution_log_density(state)
        lp += state.obs.log_density(p.beta_f_array)
        return lp

    def _transition(self, state: ChainState, t: int, prev: float) -> tuple[float, float]:
        """Mean and variance of x*_t given x_{t-1} = prev, for t >= 2."""
        p = state.params
        grid = state.grid
        time = self.evolution_times[t - 1 : t]
        v = grid.factor.whiten(grid.cross(time, np.array([prev])))[:, 0]
        w = grid.factor.whiten(state.dz - grid.basis @ p.beta_g_array)
        h = basis_matrix(time, np.array([prev]))[0]
        gp_var = max(p.sigma2_g * (1.0 - float(v @ v)), 0.0)
        return float(h @ p.beta_g_array + v @ w), p.sigma2_eta + gp_var

    def _own_moments(self, state: ChainState, t: int) -> tuple[float, float]:
        if t == 1:
            return state.g1, state.params.sigma2_eta
        return self._transition(state, t, float(state.x[t - 2]))

    def _g1_prior_moments(self, state: ChainState, x0: float) -> tuple[float, float]:
        p = state.params
        grid = state.grid
        time = self.evolution_times[:1]
        v = grid.factor.whiten(grid.cross(time, np.array([x0])))[:, 0]
        w = grid.factor.whiten(state.dz - grid.basis @ p.beta_g_array)
        h = basis_matrix(time, np.array([x0]))[0]
        var = max(p.sigma2_g * (1.0 - float(v @ v)), G1_VARIANCE_FLOOR * p.sigma2_g)
        return float(h @ p.beta_g_array + v @ w), var

    # -- conditional accessors ---------------------------------------------

    def beta_f_conditional(self, state: ChainState) -> tuple[np.ndarray, np.ndarray]:
        hw = state.obs.factor.whiten(state.obs.basis)
        yw = state.obs.factor.whiten(self.y)
        return _precision_moments(self._beta_f_prec + hw.T @ hw, self._beta_f_prec_mean + hw.T @ yw)

    def _beta_g_system(self, state: ChainState) -> tuple[np.ndarray, np.ndarray]:
        p = state.params
        grid = state.grid
        terms = self._evolution_terms(state)
        sigma_g = math.sqrt(p.sigma2_g)
        m = grid.factor.whiten(grid.basis)
        dz_w = grid.factor.whiten(state.dz)
        rows = np.vstack([m / sigma_g, terms.h - terms.v.T @ m])
        obs = np.concatenate([dz_w / sigma_g, terms.targets - terms.v.T @ dz_w])
        variances = np.concatenate([np.ones(grid.n), terms.variances])
        beta = p.beta_g_array
        if self.fixed:
            obs = obs - rows[:, list(self.fixed)] @ beta[list(self.fixed)]
        x = rows[:, list(self.free)]
        precision = self._beta_g_prec + x.T @ (x / variances[:, None])
        rhs = self._beta_g_prec_mean + x.T @ (obs / variances)
        return precision, rhs

    def beta_g_conditional(self, state: ChainState) -> tuple[np.ndarray, np.ndarray]:
        """Moments of the free components of β_g."""
        return _precision_moments(*self._beta_g_system(state))

    def g1_conditional(self, state: ChainState) -> tuple[float, float]:
        m0, tau0 = self._g1_prior_moments(state, state.x0)
        eta = state.params.sigma2_eta
        precision = 1.0 / tau0 + 1.0 / eta
        mean = (m0 / tau0 + float(state.x_star[0]) / eta) / precision
        return mean, 1.0 / precision

    def _dz_system(self, state: ChainState) -> tuple[np.ndarray, np.ndarray]:
        p = state.params
        terms = self._evolution_terms(state)
        a = math.sqrt(p.sigma2_g) * terms.v.T
        r = terms.targets - terms.h @ p.beta_g_array
        precision = np.eye(state.grid.n) + a.T @ (a / terms.variances[:, None])
        return precision, a.T @ (r / terms.variances)

    def dz_conditional_whitened(self, state: ChainState) -> tuple[np.ndarray, np.ndarray]:
        """Moments of u, where D_z = Hβ_g + σ_g L u."""
        return _precision_moments(*self._dz_system(state))

    def dz_conditional(self, state: ChainState) -> tuple[np.ndarray, np.ndarray]:
        mean_u, cov_u = self.dz_conditional_whitened(state)
        grid = state.grid
        sigma_g = math.sqrt(state.params.sigma2_g)
        lower = grid.factor.lower
        mean = grid.basis @ state.params.beta_g_array + sigma_g * lower @ mean_u
        return mean, state.params.sigma2_g * lower @ cov_u @ lower.T

    def x_last_conditional(self, state: ChainState) -> tuple[float, float]:
        """Untruncated moments of x*_{T+1}."""
        mean, var = self._transition(state, state.T + 1, float(state.x[state.T - 1]))
        if not var > 0.0:
            msg = "x*_{T+1} transition has zero variance"
            raise DegenerateTransitionError(msg)
        return mean, var

    # -- Metropolis targets --------------------------------------------------

    def x0_log_target(self, state: ChainState, x0: float) -> float:
        m0, tau0 = self._g1_prior_moments(state, x0)
        return float(von_mises_logpdf(x0, self.prior.x0)) + normal_logpdf(state.g1, m0, tau0)

    def x_log_target(
        self, state: ChainState, t: int, value: float
    ) -> tuple[float, ObservationCandidate]:
        """Terms of the joint that involve x_t, for 1 <= t <= T."""
        if not 1 <= t <= state.T:
            msg = f"x_t updates need 1 <= t <= {state.T}, got {t}"
            raise ValueError(msg)
        candidate = state.obs.candidate(state.params.beta_f_array, index=t - 1, angle=value)
        return self._x_evolution_terms(state, t, value) + candidate.log_density, candidate

    def _x_evolution_terms(self, state: ChainState, t: int, value: float) -> float:
        mean, var = self._own_moments(state, t)
        lp = normal_logpdf(value + TWO_PI * float(state.k[t - 1]), mean, var)
        next_mean, next_var = self._transition(state, t + 1, value)
        return lp + normal_logpdf(float(state.x_star[t]), next_mean, next_var)

    def k_log_target(self, state: ChainState, t: int, k: int) -> float:
        mean, var = self._own_moments(state, t)
        return normal_logpdf(float(state.x[t - 1]) + TWO_PI * k, mean, var)

    def variance_log_target(
        self, state: ChainState, name: str, variance: float
    ) -> tuple[float, ObservationCandidate | LookupGrid | None]:
        """Joint terms involving one variance, on the variance scale (no Jacobian)."""
        if not variance > 0.0:
            return -math.inf, None
        p = state.params
        beta_f = p.beta_f_array
        if name == "sigma2_eps":
            candidate = state.obs.candidate(beta_f, sigma2_eps=variance)
            return self.prior.sigma2_eps.logpdf(variance) + candidate.log_density, candidate
        if name == "sigma2_f":
            candidate = state.obs.candidate(beta_f, sigma2_f=variance)
            return self.prior.sigma2_f.logpdf(variance) + candidate.log_density, candidate
        if variance > self.cfg.evolution_variance_bound:
            return -math.inf, None
        if name == "sigma2_eta":
            params = replace(p, sigma2_eta=variance)
            lp = self.prior.sigma2_eta.logpdf(variance)
            return lp + self._evolution_log_density(state, params=params), None
        if name == "sigma2_g":
            params = replace(p, sigma2_g=variance)
            try:
                grid = state.grid.with_scale(math.sqrt(variance))
            except SingularMatrixError:
                return -math.inf, None
            lp = self.prior.sigma2_g.logpdf(variance)
            return lp + self._evolution_log_density(state, params=params, grid=grid), grid
        msg = f"unknown variance {name!r}"
        raise ValueError(msg)

    # -- updates ---------------------------------------------------------------

    def update_beta_f(self, state: ChainState, rng: np.random.Generator) -> None:
        hw = state.obs.factor.whiten(state.obs.basis)
        yw = state.obs.factor.whiten(self.y)
        draw = _precision_draw(
            self._beta_f_prec + hw.T @ hw, self._beta_f_prec_mean + hw.T @ yw, rng
        )
        state.params = replace(state.params, beta_f=tuple(draw))

    def update_beta_g(self, state: ChainState, rng: np.random.Generator) -> None:
        if not self.free:
            return
        draw = _precision_draw(*self._beta_g_system(state), rng)
        state.params = state.params.with_beta_g_free(draw)

    def _walk(self, current: float, var: float, rng: np.random.Generator) -> float:
        step = rng.normal(0.0, math.sqrt(var))
        if self.cfg.variance_walk == "log":
            return current * math.exp(step)
        return current + step

    def _walk_log_jacobian(self, sigma: float) -> float:
        # density of σ² moved to the σ (or log σ) scale
        jacobian = math.log(2.0 * sigma)
        if self.cfg.variance_walk == "log":
            jacobian += math.log(sigma)
        return jacobian

    def _update_variance(
        self, state: ChainState, name: str, walk_var: float, rng: np.random.Generator
    ) -> bool:
        sigma = math.sqrt(getattr(state.params, name))
        proposal = self._walk(sigma, walk_var, rng)
        if not proposal > 0.0:
            return False
        current_lp, _ = self.variance_log_target(state, name, sigma**2)
        proposal_lp, payload = self.variance_log_target(state, name, proposal**2)
        log_ratio = (proposal_lp + self._walk_log_jacobian(proposal)) - (
            current_lp + self._walk_log_jacobian(sigma)
        )
        if not math.isfinite(proposal_lp) or math.log(rng.random()) >= log_ratio:
            return False
        state.params = replace(state.params, **{name: proposal**2})
        if isinstance(payload, ObservationCandidate):
            state.obs.accept(payload)
        elif isinstance(payload, LookupGrid):
            state.grid = payload
        return True

    def update_sigma2_eps(self, state: ChainState, rng: np.random.Generator) -> bool:
        return self._update_variance(state, "sigma2_eps", self.cfg.sigma_walk_var, rng)

    def update_sigma2_f(self, state: ChainState, rng: np.random.Generator) -> bool:
        return self._update_variance(state, "sigma2_f", self.cfg.sigma_walk_var, rng)

    def update_sigma2_eta(self, state: ChainState, rng: np.random.Generator) -> bool:
        return self._update_variance(state, "sigma2_eta", self.cfg.evolution_walk_var, rng)

    def update_sigma2_g(self, state: ChainState, rng: np.random.Generator) -> bool:
        return self._update_variance(state, "sigma2_g", self.cfg.evolution_walk_var, rng)

    def update_x0(self, state: ChainState, rng: np.random.Generator) -> bool:
        proposal = von_mises_sample(VonMisesParams(state.x0, self.cfg.x0_kappa), rng)
        log_ratio = self.x0_log_target(state, proposal) - self.x0_log_target(state, state.x0)
        if math.log(rng.random()) >= log_ratio:
            return False
        state.x0 = proposal
        return True

    def update_g1(self, state: ChainState, rng: np.random.Generator) -> None:
        mean, var = self.g1_conditional(state)
        state.g1 = mean + math.sqrt(var) * rng.standard_normal()

    def update_dz(self, state: ChainState, rng: np.random.Generator) -> None:
        u = _precision_draw(*self._dz_system(state), rng)
        p = state.params
        grid = state.grid
        state.dz = grid.basis @ p.beta_g_array + math.sqrt(p.sigma2_g) * grid.factor.unwhiten(u)

    def update_x_t(self, state: ChainState, t: int, rng: np.random.Generator) -> bool:
        current = float(state.x[t - 1])
        proposal = von_mises_mixture_sample(current, self.mixture, rng)
        current_lp = self._x_evolution_terms(state, t, current) + state.obs.log_density(
            state.params.beta_f_array
        )
        proposal_lp, candidate = self.x_log_target(state, t, proposal)
        if math.log(rng.random()) >= proposal_lp - current_lp:
            return False
        state.x[t - 1] = proposal
        state.obs.accept(candidate)
        return True

    def update_x_last(self, state: ChainState, rng: np.random.Generator) -> None:
        mean, var = self.x_last_conditional(state)
        k = int(state.k[state.T])
        x_star = truncated_normal_sample(mean, math.sqrt(var), TWO_PI * k, TWO_PI * (k + 1), rng)
        x = min(max(x_star - TWO_PI * k, 0.0), math.nextafter(TWO_PI, 0.0))
        state.x[state.T] = x

    def update_k_t(self, state: ChainState, t: int, rng: np.random.Generator) -> bool:
        current = int(state.k[t - 1])
        proposal = discrete_rw_propose(current, self.cfg.k_walk_var, rng)
        if abs(proposal) > self.k_max:
            return False
        log_ratio = self.k_log_target(state, t, proposal) - self.k_log_target(state, t, current)
        if math.log(rng.random()) >= log_ratio:
            return False
        state.k[t - 1] = proposal
        return True

    # -- sweeps ----------------------------------------------------------------

    def _run_block(
        self, block: str, state: ChainState, rng: np.random.Generator, tally: AcceptanceTally
    ) -> None:
        match block:
            case "beta_f":
                self.update_beta_f(state, rng)
            case "beta_g":
                self.update_beta_g(state, rng)
            case "sigma_eps":
                tally.record(block, self.update_sigma2_eps(state, rng))
            case "sigma_f":
                tally.record(block, self.update_sigma2_f(state, rng))
            case "sigma_eta":
                tally.record(block, self.update_sigma2_eta(state, rng))
            case "sigma_g":
                tally.record(block, self.update_sigma2_g(state, rng))
            case "x0":
                tally.record(block, self.update_x0(state, rng))
            case "g1":
                self.update_g1(state, rng)
            case "dz":
                self.update_dz(state, rng)
            case "x":
                for t in range(1, state.T + 1):
                    tally.record(block, self.update_x_t(state, t, rng))
            case "x_last":
                self.update_x_last(state, rng)
            case "k":
                for t in range(1, state.T + 2):
                    tally.record(block, self.update_k_t(state, t, rng))
            case _:
                msg = f"unknown block {block!r}"
                raise ValueError(msg)

    def sweep(
        self,
        state: ChainState,
        rng: np.random.Generator,
        tally: AcceptanceTally,
        iteration: int = 0,
    ) -> None:
        for block in self.blocks():
            try:
                self._run_block(block, state, rng, tally)
            except (RuntimeError, ValueError, ArithmeticError) as exc:
                raise ChainError(iteration, block, str(exc)) from exc

    def audit(self, state: ChainState, iteration: int) -> float:
        """Compare the cached observation likelihood with a fresh computation."""
        p = state.params
        fresh = ObservationLikelihood.for_params(self.y, self.times, state.x[: state.T], p)
        discrepancy = abs(fresh.log_density(p.beta_f_array) - state.obs.log_density(p.beta_f_array))
        if discrepancy > AUDIT_TOLERANCE * max(1.0, abs(fresh.log_density(p.beta_f_array))):
            msg = f"cached observation likelihood drifted by {discrepancy:.3g}"
            raise ChainError(iteration, "audit", msg)
        return discrepancy

    def iterate(
        self, state: ChainState, rng: np.random.Generator, tally: AcceptanceTally
    ) -> Iterator[tuple[int, float]]:
        """Yield (iteration, log joint) after every sweep, forever."""
        iteration = 0
        while True:
            iteration += 1
            self.sweep(state, rng, tally, iteration)
            if iteration % self.cfg.rebuild_every == 0:
                state.obs.rebuild()
            if self.cfg.audit and iteration % self.cfg.audit_every == 0:
                self.audit(state, iteration)
            logp = self.log_joint(state)
            if not math.isfinite(logp):
                raise ChainError(iteration, "log_joint", "joint log-density is not finite")
            yield iteration, logp


def run_chain(
    y: np.ndarray,
    grid: LookupGrid,
    prior: PriorSpec,
    mle_variances: tuple[float, float],
    cfg: McmcConfig,
    rng: np.random.Generator,
    *,
    times: np.ndarray | None = None,
    t_next: float | None = None,
    fixed_mask: tuple[bool, ...] = DEFAULT_FIXED_MASK,
    k_max: int = DEFAULT_K_MAX,
    chain: int = 0,
    progress: ProgressCallback | None = None,
) -> SampleSet:
    """Run one chain with (σ²_g, σ²_η) held at ``mle_variances`` unless sampling is on."""
    sigma2_g, sigma2_eta = mle_variances
    sampler = GibbsSampler(
        y, prior, cfg, times=times, t_next=t_next, fixed_mask=fixed_mask, k_max=k_max
    )
    state = sampler.initial_state(grid, sigma2_g, sigma2_eta, rng)
    tally = AcceptanceTally()
    logp_trace = np.empty(cfg.n_iter)
    T = sampler.T

    records: dict[str, list[np.ndarray | float]] = {name: [] for name in RECORDED}
    for iteration, logp in sampler.iterate(state, rng, tally):
        logp_trace[iteration - 1] = logp
        index = iteration - 1
        if index >= cfg.burn_in and (index - cfg.burn_in) % cfg.thin == 0:
            p = state.params
            records["iterations"].append(iteration)
            records["logp"].append(logp)
            records["beta_f"].append(p.beta_f_array)
            records["beta_g"].append(p.beta_g_array)
            records["sigma2_eps"].append(p.sigma2_eps)
            records["sigma2_f"].append(p.sigma2_f)
            records["sigma2_eta"].append(p.sigma2_eta)
            records["sigma2_g"].append(p.sigma2_g)
            records["x0"].append(state.x0)
            records["x"].append(state.x.copy())
            records["k"].append(state.k.copy())
        if progress is not None:
            progress(iteration)
        if iteration >= cfg.n_iter:
            break

    n = len(records["iterations"])
    logger.info(
        "Chain %d finished: %d iterations, %d kept, acceptance %s",
        chain,
        cfg.n_iter,
        n,
        {b: round(r, 3) for b, r in tally.rates().items()},
    )
    return SampleSet(
        iterations=np.asarray(records["iterations"], dtype=int),
        chain=np.full(n, chain, dtype=int),
        logp=np.asarray(records["logp"], dtype=float),
        beta_f=np.asarray(records["beta_f"], dtype=float).reshape(n, 4),
        beta_g=np.asarray(records["beta_g"], dtype=float).reshape(n, 4),
        sigma2_eps=np.asarray(records["sigma2_eps"], dtype=float),
        sigma2_f=np.asarray(records["sigma2_f"], dtype=float),
        sigma2_eta=np.asarray(records["sigma2_eta"], dtype=float),
        sigma2_g=np.asarray(records["sigma2_g"], dtype=float),
        x0=np.asarray(records["x0"], dtype=float),
        x=np.asarray(records["x"], dtype=float).reshape(n, T + 1),
        k=np.asarray(records["k"], dtype=int).reshape(n, T + 1),
        beta_g_fixed_mask=tuple(fixed_mask),
        evolution_sampled=cfg.sample_evolution_variances,
        acceptance=tally.rates(),
        logp_trace=logp_trace,
    )


@dataclass(frozen=True, eq=False)
class _ChainJob:
    y: np.ndarray
    grid: LookupGrid
    prior: PriorSpec
    mle_variances: tuple[float, float]
    cfg: McmcConfig
    seed: np.random.SeedSequence
    times: np.ndarray | None
    t_next: float | None
    fixed_mask: tuple[bool, ...]
    k_max: int
    chain: int


def _run_chain_job(job: _ChainJob) -> SampleSet:
    return run_chain(
        job.y,
        job.grid,
        job.prior,
        job.mle_variances,
        job.cfg,
        np.random.default_rng(job.seed),
        times=job.times,
        t_next=job.t_next,
        fixed_mask=job.fixed_mask,
        k_max=job.k_max,
        chain=job.chain,
    )


def run_chains(
    y: np.ndarray,
    grid: LookupGrid,
    prior: PriorSpec,
    mle_variances: tuple[float, float],
    cfg: McmcConfig,
    seed: int,
    *,
    times: np.ndarray | None = None,
    t_next: float | None = None,
    n_chains: int = 1,
    fixed_mask: tuple[bool, ...] = DEFAULT_FIXED_MASK,
    k_max: int = DEFAULT_K_MAX,
    progress: ProgressCallback | None = None,
) -> SampleSet:
    """Independent chains seeded from ``SeedSequence(seed).spawn(n_chains)``, merged."""
    if n_chains < 1:
        msg = "n_chains must be at least 1"
        raise ValueError(msg)
    children = np.random.SeedSequence(seed).spawn(n_chains)
    y_arr = np.asarray(y, dtype=float)
    if n_chains == 1:
        rng = np.random.default_rng(children[0])
        return run_chain(
            y_arr,
            grid,
            prior,
            mle_variances,
            cfg,
            rng,
            times=times,
            t_next=t_next,
            fixed_mask=fixed_mask,
            k_max=k_max,
            progress=progress,
        )
    mask = tuple(fixed_mask)
    jobs = [
        _ChainJob(y_arr, grid, prior, mle_variances, cfg, seq, times, t_next, mask, k_max, i)
        for i, seq in enumerate(children)
    ]
    with ProcessPoolExecutor(max_workers=n_chains) as pool:
        sets = list(pool.map(_run_chain_job, jobs))
    return merge_sample_sets(sets)
