"""Hierarchical state-space model with a wrapped-GP circular latent process.

Observation layer: y_t = f(t, x_t) + ε_t with f ~ GP(h'β_f, σ²_f c_f).
Evolution layer: x_t = {g*(t, x_{t-1}) + η_t} mod 2π with g* ~ GP(h'β_g, σ²_g c_g).
The evolution GP is represented through a look-up grid: its values D_z on fixed grid
points, so every transition is a Gaussian conditional given D_z.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from circstate.circular import TWO_PI, VonMisesParams, mod_2pi, von_mises_sample, wrap
from circstate.gp import (
    BASIS_SIZE,
    DEFAULT_JITTER,
    CholeskyFactor,
    GpScale,
    JitterPolicy,
    SingularMatrixError,
    basis_matrix,
    cholesky_factor,
    clamp_variances,
    correlation_matrix,
    cross_correlation,
)

logger = logging.getLogger(__name__)

GRID_MODES: tuple[str, ...] = ("paper_literal", "time_scaled")
DEFAULT_FIXED_MASK = (False, False, True, True)
DEFAULT_BETA_G_MEAN = (2.5, 0.04, 1.0, 1.0)
MAX_GRID_ATTEMPTS = 5
LOG_TWO_PI = math.log(TWO_PI)


class DegenerateTransitionError(RuntimeError):
    """Raised when a wrapped-normal transition has zero variance."""


class GridConstructionError(RuntimeError):
    """Raised when no factorizable look-up grid could be drawn."""


@dataclass(frozen=True)
class InverseGammaPrior:
    """Density ∝ v^{-(α+2)/2} exp(-γ/(2v)) on a variance v, i.e. IG(α/2, γ/2)."""

    alpha: float
    gamma: float

    def __post_init__(self) -> None:
        if not (self.alpha > 0.0 and self.gamma > 0.0):
            msg = "inverse-gamma hyperparameters must be positive"
            raise ValueError(msg)

    @classmethod
    def from_shape_scale(cls, shape: float, scale: float) -> InverseGammaPrior:
        return cls(alpha=2.0 * shape, gamma=2.0 * scale)

    @property
    def shape(self) -> float:
        return self.alpha / 2.0

    @property
    def scale(self) -> float:
        return self.gamma / 2.0

    @property
    def mode(self) -> float:
        return self.gamma / (self.alpha + 2.0)

    def logpdf(self, v: float) -> float:
        if v <= 0.0:
            return -math.inf
        return -0.5 * (self.alpha + 2.0) * math.log(v) - self.gamma / (2.0 * v)

    def sample(self, rng: np.random.Generator) -> float:
        return self.scale / rng.gamma(self.shape)


@dataclass(frozen=True)
class NormalPrior:
    mean: tuple[float, ...]
    cov: tuple[tuple[float, ...], ...]

    def __post_init__(self) -> None:
        c = self.cov_array
        if c.shape != (len(self.mean), len(self.mean)):
            msg = "normal prior covariance shape does not match its mean"
            raise ValueError(msg)
        if not np.allclose(c, c.T):
            msg = "normal prior covariance must be symmetric"
            raise ValueError(msg)

    @classmethod
    def diagonal(cls, mean: tuple[float, ...], variances: tuple[float, ...]) -> NormalPrior:
        cov = tuple(
            tuple(variances[i] if i == j else 0.0 for j in range(len(mean)))
            for i in range(len(mean))
        )
        return cls(tuple(float(m) for m in mean), cov)

    @property
    def mean_array(self) -> np.ndarray:
        return np.asarray(self.mean, dtype=float)

    @property
    def cov_array(self) -> np.ndarray:
        return np.asarray(self.cov, dtype=float)

    def restricted(self, indices: tuple[int, ...]) -> NormalPrior:
        c = self.cov_array[np.ix_(indices, indices)]
        return NormalPrior(
            tuple(self.mean[i] for i in indices), tuple(tuple(row) for row in c.tolist())
        )

    def precision(self) -> tuple[np.ndarray, np.ndarray]:
        """(Σ₀⁻¹, Σ₀⁻¹β₀)."""
        factor = cholesky_factor(self.cov_array, label="prior covariance")
        prec = factor.solve(np.eye(len(self.mean)))
        return prec, prec @ self.mean_array

    def logpdf(self, x: np.ndarray) -> float:
        factor = cholesky_factor(self.cov_array, label="prior covariance")
        return gaussian_logpdf(np.asarray(x, dtype=float), self.mean_array, factor)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        factor = cholesky_factor(self.cov_array, label="prior covariance")
        return self.mean_array + factor.unwhiten(rng.standard_normal(len(self.mean)))


def _default_sigma2_eps() -> InverseGammaPrior:
    return InverseGammaPrior.from_shape_scale(4.01, 0.005 * 5.01)


def _default_sigma2_f() -> InverseGammaPrior:
    return InverseGammaPrior.from_shape_scale(4.01, 0.1 * 5.01)


def _default_beta_f() -> NormalPrior:
    return NormalPrior.diagonal((0.0, 0.0, 0.0, 0.0), (1.0, 1.0, 1.0, 1.0))


def _default_beta_g() -> NormalPrior:
    return NormalPrior.diagonal(DEFAULT_BETA_G_MEAN, (1.0, 1.0, 0.0, 0.0))


@dataclass(frozen=True)
class PriorSpec:
    x0: VonMisesParams = field(default_factory=lambda: VonMisesParams(math.pi, 1.0))
    sigma2_eps: InverseGammaPrior = field(default_factory=_default_sigma2_eps)
    sigma2_eta: InverseGammaPrior = field(default_factory=_default_sigma2_f)
    sigma2_f: InverseGammaPrior = field(default_factory=_default_sigma2_f)
    sigma2_g: InverseGammaPrior = field(default_factory=_default_sigma2_f)
    beta_f: NormalPrior = field(default_factory=_default_beta_f)
    beta_g: NormalPrior = field(default_factory=_default_beta_g)

    @classmethod
    def defaults(cls) -> PriorSpec:
        return cls()


@dataclass(frozen=True)
class ModelParams:
    beta_f: tuple[float, ...]
    beta_g: tuple[float, ...]
    sigma2_eps: float
    sigma2_eta: float
    sigma2_f: float
    sigma2_g: float
    beta_g_fixed_mask: tuple[bool, ...] = DEFAULT_FIXED_MASK

    def __post_init__(self) -> None:
        object.__setattr__(self, "beta_f", tuple(float(b) for b in self.beta_f))
        object.__setattr__(self, "beta_g", tuple(float(b) for b in self.beta_g))
        if len(self.beta_f) != BASIS_SIZE or len(self.beta_g) != BASIS_SIZE:
            msg = f"beta_f and beta_g must have {BASIS_SIZE} components"
            raise ValueError(msg)
        if len(self.beta_g_fixed_mask) != BASIS_SIZE:
            msg = "beta_g_fixed_mask must have one flag per component"
            raise ValueError(msg)
        for name in ("sigma2_eps", "sigma2_f", "sigma2_g"):
            if not getattr(self, name) > 0.0:
                msg = f"{name} must be positive"
                raise ValueError(msg)
        # σ²_η = 0 is the noise-free evolution limit
        if not self.sigma2_eta >= 0.0:
            msg = "sigma2_eta must be nonnegative"
            raise ValueError(msg)

    @property
    def beta_f_array(self) -> np.ndarray:
        return np.asarray(self.beta_f, dtype=float)

    @property
    def beta_g_array(self) -> np.ndarray:
        return np.asarray(self.beta_g, dtype=float)

    @property
    def scale_f(self) -> GpScale:
        return GpScale.from_variance(self.sigma2_f)

    @property
    def scale_g(self) -> GpScale:
        return GpScale.from_variance(self.sigma2_g)

    @property
    def free_indices(self) -> tuple[int, ...]:
        return tuple(i for i, fixed in enumerate(self.beta_g_fixed_mask) if not fixed)

    @property
    def fixed_indices(self) -> tuple[int, ...]:
        return tuple(i for i, fixed in enumerate(self.beta_g_fixed_mask) if fixed)

    def with_beta_g_free(self, values: np.ndarray) -> ModelParams:
        beta = list(self.beta_g)
        for i, value in zip(self.free_indices, np.asarray(values, dtype=float), strict=True):
            beta[i] = float(value)
        return replace(self, beta_g=tuple(beta))


@dataclass(frozen=True, eq=False)
class LookupGrid:
    times: np.ndarray
    angles: np.ndarray
    scale: GpScale
    corr: np.ndarray
    factor: CholeskyFactor
    mode: str = "time_scaled"

    @classmethod
    def from_points(
        cls,
        times: np.ndarray,
        angles: np.ndarray,
        scale: GpScale,
        *,
        mode: str = "time_scaled",
        policy: JitterPolicy = DEFAULT_JITTER,
    ) -> LookupGrid:
        times = np.asarray(times, dtype=float)
        angles = mod_2pi(np.asarray(angles, dtype=float))
        if times.shape != angles.shape or times.size < 2:
            msg = "a look-up grid needs at least two (time, angle) points"
            raise ValueError(msg)
        corr = correlation_matrix(times, angles, scale)
        factor = cholesky_factor(corr, policy, label="look-up grid correlation")
        return cls(times, angles, scale, corr, factor, mode)

    @property
    def n(self) -> int:
        return int(self.times.size)

    @property
    def basis(self) -> np.ndarray:
        return basis_matrix(self.times, self.angles)

    def cross(self, times: np.ndarray, angles: np.ndarray) -> np.ndarray:
        """s vectors as columns: n x m correlations with the query points."""
        return cross_correlation(self.times, self.angles, times, angles, self.scale)

    def with_scale(self, sigma_g: float) -> LookupGrid:
        return LookupGrid.from_points(self.times, self.angles, GpScale(sigma_g), mode=self.mode)


def build_grid(
    n: int,
    t_range: tuple[float, float],
    mode: str,
    sigma_g: float,
    rng: np.random.Generator,
    *,
    policy: JitterPolicy = DEFAULT_JITTER,
) -> LookupGrid:
    """One grid point per angular subinterval of [0, 2π], with a uniform time in each slot."""
    if n < 2:
        msg = f"grid size must be at least 2, got {n}"
        raise ValueError(msg)
    if mode not in GRID_MODES:
        msg = f"unknown grid mode {mode!r}"
        raise ValueError(msg)
    i = np.arange(n)
    angles = (2 * i + 1) * math.pi / n
    if mode == "paper_literal":
        lo_edges, width = TWO_PI * i / n, TWO_PI / n
    else:
        lo, hi = t_range
        if not hi > lo:
            msg = f"time range must be increasing, got {t_range}"
            raise ValueError(msg)
        lo_edges, width = lo + i * (hi - lo) / n, (hi - lo) / n
    scale = GpScale(sigma_g)
    for attempt in range(1, MAX_GRID_ATTEMPTS + 1):
        times = lo_edges + width * rng.random(n)
        try:
            return LookupGrid.from_points(times, angles, scale, mode=mode, policy=policy)
        except SingularMatrixError:
            logger.warning("Look-up grid draw %d was not factorizable; redrawing", attempt)
    msg = f"could not build a factorizable look-up grid in {MAX_GRID_ATTEMPTS} attempts"
    raise GridConstructionError(msg)


def _check_scale(grid: LookupGrid, p: ModelParams) -> None:
    if not math.isclose(grid.scale.variance, p.sigma2_g, rel_tol=1e-12):
        msg = (
            f"look-up grid was factorized for sigma2_g={grid.scale.variance:.6g}, "
            f"parameters carry {p.sigma2_g:.6g}"
        )
        raise ValueError(msg)


def default_times(T: int) -> np.ndarray:
    """Observation times 1..T used when a series carries no times of its own."""
    return np.arange(1, T + 1, dtype=float)


def next_time(times: np.ndarray) -> float:
    """Time after the last one, continuing the average spacing (one step for T = 1)."""
    times = np.asarray(times, dtype=float)
    if times.size >= 2:
        return float(times[-1] + (times[-1] - times[0]) / (times.size - 1))
    return float(times[-1] + 1.0) if times.size else 1.0


def evolution_times(times: np.ndarray, t_next: float | None = None) -> np.ndarray:
    """t_1..t_T followed by t_{T+1}; the times at which x_1..x_{T+1} evolve."""
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size < 1:
        msg = "evolution needs at least one observation time"
        raise ValueError(msg)
    if np.any(np.diff(times) <= 0.0) or not np.all(np.isfinite(times)):
        msg = "observation times must be finite and strictly increasing"
        raise ValueError(msg)
    last = next_time(times) if t_next is None else float(t_next)
    if not last > times[-1]:
        msg = f"t_next={last} must come after the last observation time {times[-1]}"
        raise ValueError(msg)
    return np.append(times, last)


def time_range(times: np.ndarray) -> tuple[float, float]:
    """Span of the observation times, widened to one step when there is a single time."""
    times = np.asarray(times, dtype=float)
    if times.size >= 2:
        return float(times[0]), float(times[-1])
    return float(times[0]), next_time(times)


def gaussian_logpdf(x: np.ndarray, mean: np.ndarray, factor: CholeskyFactor) -> float:
    w = factor.whiten(np.asarray(x, dtype=float) - mean)
    return -0.5 * (float(w @ w) + factor.log_det + w.size * LOG_TWO_PI)


def normal_logpdf(x: float, mean: float, variance: float) -> float:
    return -0.5 * ((x - mean) ** 2 / variance + math.log(variance) + LOG_TWO_PI)


def dz_prior_moments(grid: LookupGrid, p: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    return grid.basis @ p.beta_g_array, p.sigma2_g * grid.corr


def dz_given_g1(
    grid: LookupGrid, x0: float, g1: float, p: ModelParams, *, t1: float = 1.0
) -> tuple[np.ndarray, np.ndarray]:
    """Moments of D_z given g*(t_1, x₀) = g1."""
    _check_scale(grid, p)
    beta = p.beta_g_array
    h0 = basis_matrix(np.array([t1]), np.array([x0]))[0]
    s = grid.cross(np.array([t1]), np.array([x0]))[:, 0]
    mean = grid.basis @ beta + s * (g1 - h0 @ beta)
    return mean, p.sigma2_g * (grid.corr - np.outer(s, s))


def gstar_moments(
    times: np.ndarray,
    prev_angles: np.ndarray,
    dz: np.ndarray,
    grid: LookupGrid,
    p: ModelParams,
) -> tuple[np.ndarray, np.ndarray]:
    """Conditional mean and variance of g*(t, x_{t-1}) given D_z, for many queries."""
    _check_scale(grid, p)
    times = np.atleast_1d(np.asarray(times, dtype=float))
    prev_angles = np.atleast_1d(np.asarray(prev_angles, dtype=float))
    beta = p.beta_g_array
    v = grid.factor.whiten(grid.cross(times, prev_angles))
    w = grid.factor.whiten(np.asarray(dz, dtype=float) - grid.basis @ beta)
    mean = basis_matrix(times, prev_angles) @ beta + v.T @ w
    var = p.sigma2_g * (1.0 - np.sum(v * v, axis=0))
    return mean, clamp_variances(var, p.sigma2_g, label="gstar_conditional")


def gstar_conditional(
    t: float, x_prev: float, dz: np.ndarray, grid: LookupGrid, p: ModelParams
) -> tuple[float, float]:
    mean, var = gstar_moments(np.array([t]), np.array([x_prev]), dz, grid, p)
    return float(mean[0]), float(var[0])


def transition_moments_batch(
    times: np.ndarray,
    prev_angles: np.ndarray,
    dz: np.ndarray,
    grid: LookupGrid,
    p: ModelParams,
) -> tuple[np.ndarray, np.ndarray]:
    mean, var = gstar_moments(times, prev_angles, dz, grid, p)
    sigma2_x = p.sigma2_eta + var
    if np.any(sigma2_x <= 0.0):
        msg = "wrapped-normal transition has zero variance (sigma2_eta = 0 on a grid point)"
        raise DegenerateTransitionError(msg)
    return mean, sigma2_x


def transition_moments(
    t: float, x_prev: float, dz: np.ndarray, grid: LookupGrid, p: ModelParams
) -> tuple[float, float]:
    """(μ_{x_t}, σ²_{x_t}) of the linear variable x*_t = g*(t, x_{t-1}) + η_t."""
    mean, sigma2_x = transition_moments_batch(np.array([t]), np.array([x_prev]), dz, grid, p)
    return float(mean[0]), float(sigma2_x[0])


def obs_marginal_moments(
    x: np.ndarray, times: np.ndarray, p: ModelParams
) -> tuple[np.ndarray, np.ndarray]:
    """Mean H β_f and covariance σ²_f A_f + σ²_ε I of y given the latent angles."""
    x = np.asarray(x, dtype=float)
    times = np.asarray(times, dtype=float)
    if x.size < 1 or x.shape != times.shape:
        msg = "observation moments need T >= 1 angles matching the times"
        raise ValueError(msg)
    mean = basis_matrix(times, x) @ p.beta_f_array
    covariance = p.sigma2_f * correlation_matrix(times, x, p.scale_f)
    covariance[np.diag_indices_from(covariance)] += p.sigma2_eps
    return mean, covariance


def obs_log_density(y: np.ndarray, x: np.ndarray, times: np.ndarray, p: ModelParams) -> float:
    mean, covariance = obs_marginal_moments(x, times, p)
    factor = cholesky_factor(covariance, label="observation covariance")
    return gaussian_logpdf(np.asarray(y, dtype=float), mean, factor)


@dataclass(eq=False)
class ObservationCandidate:
    angles: np.ndarray
    corr: np.ndarray
    basis: np.ndarray
    sigma2_f: float
    sigma2_eps: float
    factor: CholeskyFactor
    log_density: float


@dataclass(eq=False)
class ObservationLikelihood:
    """Caches A_f, H and the factor of Σ_y for one latent-path revision.

    Single-angle moves replace one row and column of A_f; ``rebuild`` recomputes
    everything from the angles.
    """

    y: np.ndarray
    times: np.ndarray
    angles: np.ndarray
    sigma2_f: float
    sigma2_eps: float
    corr: np.ndarray = field(init=False)
    basis: np.ndarray = field(init=False)
    factor: CholeskyFactor = field(init=False)

    def __post_init__(self) -> None:
        self.y = np.asarray(self.y, dtype=float)
        self.times = np.asarray(self.times, dtype=float)
        self.angles = np.array(self.angles, dtype=float)
        self.rebuild()

    @classmethod
    def for_params(
        cls, y: np.ndarray, times: np.ndarray, angles: np.ndarray, p: ModelParams
    ) -> ObservationLikelihood:
        return cls(y, times, angles, p.sigma2_f, p.sigma2_eps)

    def rebuild(self) -> None:
        scale = GpScale.from_variance(self.sigma2_f)
        self.corr = correlation_matrix(self.times, self.angles, scale)
        self.basis = basis_matrix(self.times, self.angles)
        self.factor = self._factorize(self.corr, self.sigma2_f, self.sigma2_eps)

    @staticmethod
    def _factorize(corr: np.ndarray, sigma2_f: float, sigma2_eps: float) -> CholeskyFactor:
        covariance = sigma2_f * corr
        covariance[np.diag_indices_from(covariance)] += sigma2_eps
        return cholesky_factor(covariance, label="observation covariance")

    def _log_density(self, basis: np.ndarray, factor: CholeskyFactor, beta_f: np.ndarray) -> float:
        return gaussian_logpdf(self.y, basis @ beta_f, factor)

    def log_density(self, beta_f: np.ndarray) -> float:
        return self._log_density(self.basis, self.factor, np.asarray(beta_f, dtype=float))

    def candidate(
        self,
        beta_f: np.ndarray,
        *,
        sigma2_f: float | None = None,
        sigma2_eps: float | None = None,
        index: int | None = None,
        angle: float | None = None,
    ) -> ObservationCandidate:
        s2f = self.sigma2_f if sigma2_f is None else sigma2_f
        s2e = self.sigma2_eps if sigma2_eps is None else sigma2_eps
        angles, corr, basis = self.angles, self.corr, self.basis
        if index is not None and angle is not None:
            angles = angles.copy()
            angles[index] = angle
            basis = basis.copy()
            basis[index] = basis_matrix(self.times[index : index + 1], angles[index : index + 1])[0]
            row = cross_correlation(
                self.times[index : index + 1],
                angles[index : index + 1],
                self.times,
                angles,
                GpScale.from_variance(s2f),
            )[0]
            corr = corr.copy()
            corr[index, :] = row
            corr[:, index] = row
        if s2f != self.sigma2_f:
            corr = correlation_matrix(self.times, angles, GpScale.from_variance(s2f))
        factor = self._factorize(corr, s2f, s2e)
        log_density = self._log_density(basis, factor, np.asarray(beta_f, dtype=float))
        return ObservationCandidate(angles, corr, basis, s2f, s2e, factor, log_density)

    def accept(self, candidate: ObservationCandidate) -> None:
        self.angles = candidate.angles
        self.corr = candidate.corr
        self.basis = candidate.basis
        self.sigma2_f = candidate.sigma2_f
        self.sigma2_eps = candidate.sigma2_eps
        self.factor = candidate.factor

    def covariance(self) -> np.ndarray:
        covariance = self.sigma2_f * self.corr
        covariance[np.diag_indices_from(covariance)] += self.sigma2_eps
        return covariance


@dataclass(frozen=True, eq=False)
class LatentPath:
    """x₀, x_{1..T+1}, K_{1..T+1} and g*(1, x₀)."""

    x0: float
    x: np.ndarray
    k: np.ndarray
    g1: float

    @property
    def T(self) -> int:
        return int(self.x.size) - 1

    @property
    def x_star(self) -> np.ndarray:
        return self.x + TWO_PI * self.k


def _draw_gaussian(
    mean: np.ndarray, covariance: np.ndarray, rng: np.random.Generator, label: str
) -> np.ndarray:
    factor = cholesky_factor(covariance, label=label)
    return mean + factor.unwhiten(rng.standard_normal(mean.size))


def generate_latent(
    T: int,
    grid: LookupGrid,
    p: ModelParams,
    prior: PriorSpec,
    rng: np.random.Generator,
    *,
    times: np.ndarray | None = None,
) -> tuple[LatentPath, np.ndarray]:
    """Forward draw of the latent path x_0..x_{T+1} and D_z.

    ``times`` are the observation times t_1..t_T (default 1..T); x_{T+1} evolves at
    the next evenly spaced time.
    """
    if T < 1:
        msg = f"path length must be at least 1, got {T}"
        raise ValueError(msg)
    _check_scale(grid, p)
    obs_times = default_times(T) if times is None else np.asarray(times, dtype=float)
    if obs_times.shape != (T,):
        msg = f"expected {T} observation times, got shape {obs_times.shape}"
        raise ValueError(msg)
    t_evo = evolution_times(obs_times)
    beta = p.beta_g_array
    sd_eta = math.sqrt(p.sigma2_eta)
    x0 = von_mises_sample(prior.x0, rng)
    h0 = basis_matrix(t_evo[:1], np.array([x0]))[0]
    g1 = float(h0 @ beta + math.sqrt(p.sigma2_g) * rng.standard_normal())
    dz_mean, dz_cov = dz_given_g1(grid, x0, g1, p, t1=float(t_evo[0]))
    dz = _draw_gaussian(dz_mean, dz_cov, rng, "D_z conditional covariance")

    xs = np.empty(T + 1)
    ks = np.empty(T + 1, dtype=int)
    xs[0], ks[0] = wrap(g1 + sd_eta * rng.standard_normal())
    for t in range(2, T + 2):
        mean, var = gstar_conditional(float(t_evo[t - 1]), xs[t - 2], dz, grid, p)
        g_value = mean + math.sqrt(var) * rng.standard_normal()
        xs[t - 1], ks[t - 1] = wrap(g_value + sd_eta * rng.standard_normal())
    return LatentPath(x0, xs, ks, g1), dz


def generate_path(
    T: int,
    grid: LookupGrid,
    p: ModelParams,
    prior: PriorSpec,
    rng: np.random.Generator,
    *,
    times: np.ndarray | None = None,
) -> tuple[LatentPath, np.ndarray, np.ndarray]:
    """Forward draw of (latent path, D_z, y_{1..T}) from the look-up-table model."""
    path, dz = generate_latent(T, grid, p, prior, rng, times=times)
    times = default_times(T) if times is None else np.asarray(times, dtype=float)
    y_mean, y_cov = obs_marginal_moments(path.x[:T], times, p)
    y = _draw_gaussian(y_mean, y_cov, rng, "observation covariance")
    return path, dz, y
