"""Gaussian process on (time, angle) built from a kernel convolution of the Wiener process.

The covariance is ``σ² exp(-σ⁴ Δt²) cos(Δθ)``: a Gaussian kernel in time times the
rank-2 cosine kernel on the circle.  Orthogonal directions (Δθ = π/2) are uncorrelated
whatever their time difference.
"""

from __future__ import annotations

import functools
import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.special import roots_legendre

from circstate.circular import mod_2pi

logger = logging.getLogger(__name__)

BASIS_SIZE = 4
NEGATIVE_VARIANCE_WARN = 1e-8
NEGATIVE_VARIANCE_FAIL = 1e-6
ORACLE_TOLERANCE = 1e-8
ORACLE_TIME_HALF_WIDTH = 8.0


class SingularMatrixError(RuntimeError):
    """Raised when a covariance matrix cannot be factorized even after jitter."""


class QuadratureError(RuntimeError):
    """Raised when the kernel-convolution quadrature does not converge."""


@dataclass(frozen=True)
class LinCircPoint:
    t: float
    theta: float

    def __post_init__(self) -> None:
        if not math.isfinite(self.t):
            msg = "time coordinate must be finite"
            raise ValueError(msg)
        object.__setattr__(self, "theta", mod_2pi(float(self.theta)))


@dataclass(frozen=True)
class GpScale:
    """Process scale σ; the convolution bandwidth is ψ = 1/(2σ²)."""

    sigma: float

    def __post_init__(self) -> None:
        if not self.sigma > 0.0:
            msg = f"GP scale must be positive, got {self.sigma}"
            raise ValueError(msg)

    @classmethod
    def from_variance(cls, variance: float) -> GpScale:
        return cls(math.sqrt(variance))

    @classmethod
    def from_bandwidth(cls, psi: float) -> GpScale:
        return cls(math.sqrt(1.0 / (2.0 * psi)))

    @property
    def variance(self) -> float:
        return self.sigma**2

    @property
    def psi(self) -> float:
        return 1.0 / (2.0 * self.sigma**2)


@dataclass(frozen=True)
class JitterPolicy:
    initial_scale: float = 1e-10
    growth: float = 10.0
    max_retries: int = 6


DEFAULT_JITTER = JitterPolicy()


@dataclass(frozen=True, eq=False)
class CholeskyFactor:
    lower: np.ndarray
    jitter: float = 0.0
    label: str = "matrix"

    @property
    def size(self) -> int:
        return self.lower.shape[0]

    @property
    def log_det(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.lower))))

    def whiten(self, b: np.ndarray) -> np.ndarray:
        """L⁻¹ b."""
        return linalg.solve_triangular(self.lower, b, lower=True, check_finite=False)

    def unwhiten(self, w: np.ndarray) -> np.ndarray:
        """L w."""
        return self.lower @ w

    def solve(self, b: np.ndarray) -> np.ndarray:
        return linalg.cho_solve((self.lower, True), b, check_finite=False)


@dataclass(frozen=True, eq=False)
class CholSolveResult:
    solution: np.ndarray
    log_det: float
    jitter: float


def basis_matrix(times: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """Rows h(t, θ) = (1, t, cos θ, sin θ)."""
    times = np.atleast_1d(np.asarray(times, dtype=float))
    angles = np.atleast_1d(np.asarray(angles, dtype=float))
    return np.column_stack([np.ones_like(times), times, np.cos(angles), np.sin(angles)])


def basis_h(p: LinCircPoint) -> np.ndarray:
    return basis_matrix(np.array([p.t]), np.array([p.theta]))[0]


def cross_correlation(
    times_a: np.ndarray,
    angles_a: np.ndarray,
    times_b: np.ndarray,
    angles_b: np.ndarray,
    scale: GpScale,
) -> np.ndarray:
    """Matrix of exp(-σ⁴ Δt²) cos(Δθ) between two point sets."""
    ta = np.atleast_1d(np.asarray(times_a, dtype=float))[:, None]
    tb = np.atleast_1d(np.asarray(times_b, dtype=float))[None, :]
    za = np.atleast_1d(np.asarray(angles_a, dtype=float))[:, None]
    zb = np.atleast_1d(np.asarray(angles_b, dtype=float))[None, :]
    return np.exp(-(scale.sigma**4) * (ta - tb) ** 2) * np.cos(za - zb)


def correlation_matrix(times: np.ndarray, angles: np.ndarray, scale: GpScale) -> np.ndarray:
    corr = cross_correlation(times, angles, times, angles, scale)
    return 0.5 * (corr + corr.T)


def cov(p1: LinCircPoint, p2: LinCircPoint, s: GpScale) -> float:
    dt = p1.t - p2.t
    return s.variance * math.exp(-(s.sigma**4) * dt * dt) * math.cos(p1.theta - p2.theta)


def _unpack(points: Sequence[LinCircPoint]) -> tuple[np.ndarray, np.ndarray]:
    times = np.array([p.t for p in points], dtype=float)
    angles = np.array([p.theta for p in points], dtype=float)
    return times, angles


def cov_matrix(points: Sequence[LinCircPoint], s: GpScale, *, scaled: bool = True) -> np.ndarray:
    """σ²A, or the unit-diagonal correlation A when ``scaled`` is false."""
    if not points:
        msg = "cov_matrix needs at least one point"
        raise ValueError(msg)
    corr = correlation_matrix(*_unpack(points), s)
    return s.variance * corr if scaled else corr


def cholesky_factor(
    matrix: np.ndarray, policy: JitterPolicy = DEFAULT_JITTER, *, label: str = "matrix"
) -> CholeskyFactor:
    a = np.asarray(matrix, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        msg = f"{label} must be a square matrix"
        raise SingularMatrixError(msg)
    try:
        return CholeskyFactor(linalg.cholesky(a, lower=True), 0.0, label)
    except (linalg.LinAlgError, ValueError):
        pass
    mean_diag = abs(float(np.mean(np.diag(a)))) or 1.0
    jitter = policy.initial_scale * mean_diag
    eye = np.eye(a.shape[0])
    for _ in range(policy.max_retries):
        try:
            lower = linalg.cholesky(a + jitter * eye, lower=True)
        except (linalg.LinAlgError, ValueError):
            jitter *= policy.growth
            continue
        logger.debug("Factorized %s with diagonal jitter %.3g", label, jitter)
        return CholeskyFactor(lower, jitter, label)
    msg = f"Cholesky factorization of {label} failed after {policy.max_retries} jitter retries"
    raise SingularMatrixError(msg)


def chol_solve(
    a: np.ndarray,
    b: np.ndarray,
    policy: JitterPolicy = DEFAULT_JITTER,
    *,
    label: str = "matrix",
) -> CholSolveResult:
    factor = cholesky_factor(a, policy, label=label)
    return CholSolveResult(factor.solve(np.asarray(b, dtype=float)), factor.log_det, factor.jitter)


def clamp_variances(variances: np.ndarray, scale_variance: float, *, label: str) -> np.ndarray:
    """Clamp small negative conditional variances produced by round-off."""
    floor = -NEGATIVE_VARIANCE_FAIL * scale_variance
    if np.any(variances < floor):
        msg = f"{label}: conditional variance {float(np.min(variances)):.3g} is far below zero"
        raise SingularMatrixError(msg)
    if np.any(variances < -NEGATIVE_VARIANCE_WARN * scale_variance):
        logger.warning(
            "%s: clamping negative conditional variance %.3g to 0",
            label,
            float(np.min(variances)),
        )
    return np.maximum(variances, 0.0)


def gp_condition(
    train: Sequence[LinCircPoint],
    values: np.ndarray,
    query: Sequence[LinCircPoint],
    mean_coeffs: np.ndarray,
    s: GpScale,
    policy: JitterPolicy = DEFAULT_JITTER,
) -> tuple[np.ndarray, np.ndarray]:
    """Noise-free GP regression conditional of the query values given the training values."""
    beta = np.asarray(mean_coeffs, dtype=float)
    q_times, q_angles = _unpack(query)
    prior_mean = basis_matrix(q_times, q_angles) @ beta
    prior_corr = correlation_matrix(q_times, q_angles, s)
    if not train:
        return prior_mean, s.variance * prior_corr
    t_times, t_angles = _unpack(train)
    factor = cholesky_factor(correlation_matrix(t_times, t_angles, s), policy, label="train")
    residual = np.asarray(values, dtype=float) - basis_matrix(t_times, t_angles) @ beta
    v = factor.whiten(cross_correlation(t_times, t_angles, q_times, q_angles, s))
    mean = prior_mean + v.T @ factor.whiten(residual)
    corr = prior_corr - v.T @ v
    covariance = s.variance * corr
    diag = clamp_variances(np.diag(covariance).copy(), s.variance, label="gp_condition")
    np.fill_diagonal(covariance, diag)
    return mean, covariance


@dataclass(frozen=True)
class OracleEstimate:
    value: float
    error: float


@functools.lru_cache(maxsize=8)
def _legendre(n: int) -> tuple[np.ndarray, np.ndarray]:
    nodes, weights = roots_legendre(n)
    return nodes, weights


def _gauss_legendre(
    f: Callable[[np.ndarray], np.ndarray], lo: float, hi: float, n: int
) -> float:
    nodes, weights = _legendre(n)
    half = 0.5 * (hi - lo)
    x = lo + half * (nodes + 1.0)
    return half * float(np.dot(weights, f(x)))


def _convolution_value(p1: LinCircPoint, p2: LinCircPoint, psi: float, n: int) -> float:
    mid = 0.5 * (p1.t + p2.t)
    half_width = ORACLE_TIME_HALF_WIDTH * psi

    def time_kernel(y: np.ndarray) -> np.ndarray:
        return np.exp(-((y - p1.t) ** 2 + (y - p2.t) ** 2) / (2.0 * psi**2))

    def angle_kernel(u: np.ndarray) -> np.ndarray:
        return np.cos(u - p1.theta) * np.cos(u - p2.theta)

    time_integral = _gauss_legendre(time_kernel, mid - half_width, mid + half_width, n)
    angle_integral = _gauss_legendre(angle_kernel, 0.0, math.pi, n)
    return psi**-2 * math.pi**-1.5 * time_integral * angle_integral


def mc_convolution_cov_oracle(
    p1: LinCircPoint,
    p2: LinCircPoint,
    psi: float,
    n_quad: int = 2000,
    tolerance: float = ORACLE_TOLERANCE,
) -> OracleEstimate:
    """Covariance by direct quadrature of the kernel convolution integrals.

    The kernels are k₁(t) = ψ⁻¹ π^{-1/4} exp(-t²/(2ψ²)) in time and
    k₂(u) = π^{-1/2} cos(u) on [0, π]; the error bound compares the rule against one
    with half the nodes.
    """
    if not psi > 0.0:
        msg = f"bandwidth must be positive, got {psi}"
        raise ValueError(msg)
    if n_quad < 1000:
        msg = f"n_quad must be at least 1000, got {n_quad}"
        raise ValueError(msg)
    fine = _convolution_value(p1, p2, psi, n_quad)
    coarse = _convolution_value(p1, p2, psi, n_quad // 2)
    error = abs(fine - coarse)
    if error > tolerance:
        msg = f"kernel-convolution quadrature did not converge (error bound {error:.3g})"
        raise QuadratureError(msg)
    return OracleEstimate(fine, error)


def ms_increment(h: float, s: GpScale) -> float:
    """E[X(t+h, θ) - X(t, θ)]² = 2(K(0, 0) - K(h, 0))."""
    return 2.0 * (s.variance - cov(LinCircPoint(h, 0.0), LinCircPoint(0.0, 0.0), s))


@dataclass(frozen=True)
class ValidationCase:
    psi: float
    dt: float
    dtheta: float
    closed_form: float
    oracle: float
    error: float
    passed: bool


def validation_cases() -> list[tuple[float, float, float]]:
    cases = [
        (psi, dt, dtheta)
        for psi in (0.5, 1.0, 2.0)
        for dt in (0.0, 0.5, 2.0)
        for dtheta in (0.0, math.pi / 4, math.pi / 2, math.pi)
    ]
    extra = (
        math.pi / 6, math.pi / 3, 2 * math.pi / 3, 5 * math.pi / 6, 5 * math.pi / 4, 1.5 * math.pi
    )
    cases.extend((1.0, 1.0, dtheta) for dtheta in extra)
    return cases


def validate_closed_form(
    cases: Sequence[tuple[float, float, float]] | None = None,
    *,
    tolerance: float = 1e-6,
    n_quad: int = 2000,
) -> list[ValidationCase]:
    rows: list[ValidationCase] = []
    for psi, dt, dtheta in cases if cases is not None else validation_cases():
        scale = GpScale.from_bandwidth(psi)
        p1 = LinCircPoint(0.0, 0.0)
        p2 = LinCircPoint(dt, dtheta)
        closed = cov(p1, p2, scale)
        oracle = mc_convolution_cov_oracle(p1, p2, psi, n_quad)
        error = abs(closed - oracle.value)
        rows.append(ValidationCase(psi, dt, dtheta, closed, oracle.value, error, error < tolerance))
    return rows
