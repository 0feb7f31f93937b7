from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from circstate.circular import TWO_PI, mod_2pi
from circstate.gp import basis_matrix, cholesky_factor, clamp_variances, cross_correlation
from circstate.mcmc import ChainState, SampleSet
from circstate.model import ModelParams, default_times, next_time, obs_marginal_moments

MIN_HPD_SAMPLES = 100
DEFAULT_BINS = 100


class HpdError(ValueError):
    """Raised when an HPD interval cannot be computed."""


@dataclass(frozen=True)
class PredictiveDraw:
    y_next: float
    iteration: int


@dataclass(frozen=True, eq=False)
class PredictiveSample:
    y_next: np.ndarray
    iterations: np.ndarray
    means: np.ndarray
    variances: np.ndarray


def predictive_moments(
    params: ModelParams,
    x: np.ndarray,
    x_next: float,
    y: np.ndarray,
    *,
    times: np.ndarray | None = None,
    t_next: float | None = None,
) -> tuple[float, float]:
    """Mean and variance of y_{T+1} given y_{1..T}, the latent angles and x_{T+1}.

    Conditions the joint Gaussian of (y_1..y_T, y_{T+1}), so the training block is
    σ²_f A_f + σ²_ε I.  ``times`` default to 1..T and ``t_next`` to the next evenly
    spaced time.
    """
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    times = default_times(y.size) if times is None else np.asarray(times, dtype=float)
    last = next_time(times) if t_next is None else float(t_next)
    if times.shape != y.shape or not last > times[-1]:
        msg = "predictive needs one time per observation and t_next after the last one"
        raise ValueError(msg)
    query = np.array([last])
    mean_y, cov_y = obs_marginal_moments(x, times, params)
    factor = cholesky_factor(cov_y, label="observation covariance")
    s = params.sigma2_f * cross_correlation(
        times, x, query, np.array([x_next]), params.scale_f
    )[:, 0]
    v = factor.whiten(s)
    h = basis_matrix(query, np.array([x_next]))[0]
    mean = float(h @ params.beta_f_array + v @ factor.whiten(y - mean_y))
    var = params.sigma2_eps + params.sigma2_f - float(v @ v)
    var = float(clamp_variances(np.array([var]), params.sigma2_f, label="predictive")[0])
    return mean, var


def predictive_draw(
    state: ChainState,
    y: np.ndarray,
    rng: np.random.Generator,
    iteration: int = 0,
    *,
    times: np.ndarray | None = None,
    t_next: float | None = None,
) -> PredictiveDraw:
    T = state.T
    mean, var = predictive_moments(
        state.params, state.x[:T], float(state.x[T]), y, times=times, t_next=t_next
    )
    return PredictiveDraw(mean + math.sqrt(var) * rng.standard_normal(), iteration)


def posterior_predictive(
    samples: SampleSet,
    y: np.ndarray,
    rng: np.random.Generator,
    *,
    times: np.ndarray | None = None,
    t_next: float | None = None,
) -> PredictiveSample:
    """One y_{T+1} draw per kept posterior sample."""
    if samples.n_kept == 0:
        msg = "posterior predictive needs at least one kept sample"
        raise ValueError(msg)
    y = np.asarray(y, dtype=float)
    if samples.T != y.size:
        msg = f"samples describe T={samples.T} observations, the series has {y.size}"
        raise ValueError(msg)
    T = samples.T
    means = np.empty(samples.n_kept)
    variances = np.empty(samples.n_kept)
    for i in range(samples.n_kept):
        means[i], variances[i] = predictive_moments(
            samples.params_at(i),
            samples.x[i, :T],
            float(samples.x[i, T]),
            y,
            times=times,
            t_next=t_next,
        )
    draws = means + np.sqrt(variances) * rng.standard_normal(samples.n_kept)
    return PredictiveSample(draws, samples.iterations.copy(), means, variances)


def hpd_interval(samples: np.ndarray, level: float = 0.95) -> tuple[float, float]:
    """Shortest interval holding ceil(level·n) of the sorted samples."""
    values = np.sort(np.asarray(samples, dtype=float).ravel())
    if not 0.0 < level < 1.0:
        msg = f"HPD level must lie in (0, 1), got {level}"
        raise HpdError(msg)
    if values.size < MIN_HPD_SAMPLES:
        msg = f"HPD interval needs at least {MIN_HPD_SAMPLES} samples, got {values.size}"
        raise HpdError(msg)
    if not np.all(np.isfinite(values)):
        msg = "HPD interval needs finite samples"
        raise HpdError(msg)
    n = values.size
    m = math.ceil(level * n)
    widths = values[m - 1 :] - values[: n - m + 1]
    i = int(np.argmin(widths))
    return float(values[i]), float(values[i + m - 1])


@dataclass(frozen=True)
class ForecastSummary:
    level: float
    mean: float
    median: float
    hpd_lo: float
    hpd_hi: float
    n_draws: int
    t_next: float
    holdout: float | None = None
    trend: tuple[float, float] | None = None

    @property
    def width(self) -> float:
        return self.hpd_hi - self.hpd_lo

    @property
    def covers_holdout(self) -> bool | None:
        if self.holdout is None:
            return None
        return self.hpd_lo <= self.holdout <= self.hpd_hi

    def original_scale(self) -> ForecastSummary | None:
        """The same summary with the linear trend added back, or None when none was removed."""
        if self.trend is None:
            return None
        shift = self.trend[0] + self.trend[1] * self.t_next
        holdout = None if self.holdout is None else self.holdout + shift
        return ForecastSummary(
            self.level,
            self.mean + shift,
            self.median + shift,
            self.hpd_lo + shift,
            self.hpd_hi + shift,
            self.n_draws,
            self.t_next,
            holdout,
            None,
        )


def summarize_forecast(
    draws: np.ndarray,
    level: float,
    *,
    t_next: float,
    holdout: float | None = None,
    trend: tuple[float, float] | None = None,
) -> ForecastSummary:
    """Summary on the modelled scale; ``holdout`` is on that scale as well."""
    values = np.asarray(draws, dtype=float)
    lo, hi = hpd_interval(values, level)
    return ForecastSummary(
        level=level,
        mean=float(np.mean(values)),
        median=float(np.median(values)),
        hpd_lo=lo,
        hpd_hi=hi,
        n_draws=int(values.size),
        t_next=t_next,
        holdout=holdout,
        trend=trend,
    )


@dataclass(frozen=True, eq=False)
class DensityGrid:
    """Per-time posterior frequencies of x_t over equal angle bins; columns sum to 1."""

    times: np.ndarray
    edges: np.ndarray
    freq: np.ndarray
    medians: np.ndarray

    @property
    def n_bins(self) -> int:
        return int(self.edges.size) - 1

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    def bin_of(self, angle: float) -> int:
        return min(int(mod_2pi(angle) / TWO_PI * self.n_bins), self.n_bins - 1)

    def high_density_mask(self, mass: float = 0.95) -> np.ndarray:
        """Smallest set of cells per column whose frequencies reach ``mass``."""
        if not 0.0 < mass <= 1.0:
            msg = f"mass must lie in (0, 1], got {mass}"
            raise ValueError(msg)
        order = np.argsort(-self.freq, axis=0, kind="stable")
        ranked = np.take_along_axis(self.freq, order, axis=0)
        before = np.cumsum(ranked, axis=0) - ranked
        keep_ranked = before < mass - 1e-12
        mask = np.zeros_like(self.freq, dtype=bool)
        np.put_along_axis(mask, order, keep_ranked, axis=0)
        return mask & (self.freq > 0.0)

    def covers(self, t: int, angle: float, mass: float = 0.95) -> bool:
        """Whether ``angle`` falls in the high-density cells at time index ``t`` (1-based)."""
        return bool(self.high_density_mask(mass)[self.bin_of(angle), t - 1])


def _bin_indices(angles: np.ndarray, n_bins: int) -> np.ndarray:
    idx = np.floor(mod_2pi(angles) / TWO_PI * n_bins).astype(int)
    return np.clip(idx, 0, n_bins - 1)


def circular_medians(angles: np.ndarray, n_bins: int = DEFAULT_BINS) -> np.ndarray:
    """Per column, the bin centre minimizing the mean arc distance to the samples."""
    values = np.atleast_2d(np.asarray(angles, dtype=float))
    centers = (np.arange(n_bins) + 0.5) * TWO_PI / n_bins
    medians = np.empty(values.shape[1])
    for j in range(values.shape[1]):
        diff = np.abs(centers[:, None] - values[None, :, j])
        arc = np.minimum(diff, TWO_PI - diff)
        medians[j] = centers[int(np.argmin(arc.mean(axis=1)))]
    return medians


def latent_density_grid(
    angles: np.ndarray, n_bins: int = DEFAULT_BINS, *, times: np.ndarray | None = None
) -> DensityGrid:
    """Histogram kept draws of x_1..x_T (rows are draws, columns are times)."""
    values = np.atleast_2d(np.asarray(angles, dtype=float))
    if values.shape[0] == 0:
        msg = "latent density grid needs at least one sample"
        raise ValueError(msg)
    if n_bins < 1:
        msg = f"n_bins must be at least 1, got {n_bins}"
        raise ValueError(msg)
    n_draws, T = values.shape
    times = default_times(T) if times is None else np.asarray(times, dtype=float)
    if times.shape != (T,):
        msg = f"expected {T} times for the density grid, got shape {times.shape}"
        raise ValueError(msg)
    counts = np.zeros((n_bins, T))
    columns = np.broadcast_to(np.arange(T), values.shape)
    np.add.at(counts, (_bin_indices(values, n_bins), columns), 1.0)
    return DensityGrid(
        times=times,
        edges=np.linspace(0.0, TWO_PI, n_bins + 1),
        freq=counts / n_draws,
        medians=circular_medians(values, n_bins),
    )
