"""Angle arithmetic, von Mises and wrapped-normal primitives."""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass
from typing import TypeAlias, overload

import numpy as np
from scipy.special import i0e, log_ndtr, ndtr, ndtri_exp

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi
DEFAULT_K_MAX = 10
WRAP_TAIL_WARNING = 1e-8

# Angles live in [0, 2π); wrap counters are signed integers.
Angle: TypeAlias = float
WrapCounter: TypeAlias = int


class CircularDomainError(ValueError):
    """Raised when a circular primitive receives an invalid argument."""


@dataclass(frozen=True)
class VonMisesParams:
    mu: float
    kappa: float

    def __post_init__(self) -> None:
        if not math.isfinite(self.mu):
            msg = "von Mises location must be finite"
            raise CircularDomainError(msg)
        if not self.kappa >= 0.0:
            msg = f"von Mises concentration must be nonnegative, got {self.kappa}"
            raise CircularDomainError(msg)


@dataclass(frozen=True)
class VonMisesMixture:
    """Proposal mixture: every component is centered at the current value."""

    kappas: tuple[float, ...] = (0.5, 3.0)
    weights: tuple[float, ...] = (0.5, 0.5)

    def __post_init__(self) -> None:
        if not self.kappas:
            msg = "von Mises mixture needs at least one component"
            raise CircularDomainError(msg)
        if len(self.kappas) != len(self.weights):
            msg = "mixture kappas and weights must have the same length"
            raise CircularDomainError(msg)
        if any(k < 0.0 for k in self.kappas):
            msg = "mixture concentrations must be nonnegative"
            raise CircularDomainError(msg)
        if any(w < 0.0 for w in self.weights) or abs(sum(self.weights) - 1.0) > 1e-9:
            msg = "mixture weights must be nonnegative and sum to 1"
            raise CircularDomainError(msg)


@overload
def mod_2pi(x: float) -> float: ...
@overload
def mod_2pi(x: np.ndarray) -> np.ndarray: ...
def mod_2pi(x: float | np.ndarray) -> float | np.ndarray:
    """Reduce into the half-open interval [0, 2π); exactly 2π maps to 0."""
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)):
        msg = "mod_2pi requires finite input"
        raise CircularDomainError(msg)
    reduced = arr - TWO_PI * np.floor(arr / TWO_PI)
    reduced = np.where(reduced < 0.0, reduced + TWO_PI, reduced)
    reduced = np.where(reduced >= TWO_PI, 0.0, reduced)
    if np.ndim(x) == 0:
        return float(reduced)
    return reduced


def wrap(x_star: float) -> tuple[Angle, WrapCounter]:
    """Split a linear value into (x, K) with x in [0, 2π) and x* = x + 2πK."""
    if not math.isfinite(x_star):
        msg = "cannot wrap a non-finite value"
        raise CircularDomainError(msg)
    k = math.floor(x_star / TWO_PI)
    x = x_star - TWO_PI * k
    if x < 0.0:
        k -= 1
        x += TWO_PI
    elif x >= TWO_PI:
        k += 1
        x -= TWO_PI
    return x, int(k)


def von_mises_logpdf(theta: float | np.ndarray, p: VonMisesParams) -> float | np.ndarray:
    # i0e(κ) = e^{-κ} I₀(κ) keeps large concentrations finite
    return p.kappa * (np.cos(np.asarray(theta) - p.mu) - 1.0) - np.log(TWO_PI * i0e(p.kappa))


def von_mises_density(theta: float | np.ndarray, p: VonMisesParams) -> float | np.ndarray:
    return np.exp(von_mises_logpdf(theta, p))


def von_mises_sample(p: VonMisesParams, rng: np.random.Generator) -> Angle:
    return mod_2pi(float(rng.vonmises(p.mu, p.kappa)))


def von_mises_mixture_density(
    x: float | np.ndarray, center: float, mixture: VonMisesMixture
) -> float | np.ndarray:
    total = np.zeros_like(np.asarray(x, dtype=float))
    for kappa, weight in zip(mixture.kappas, mixture.weights, strict=True):
        total = total + weight * von_mises_density(x, VonMisesParams(center, kappa))
    return total


def von_mises_mixture_sample(
    center: Angle, mixture: VonMisesMixture, rng: np.random.Generator
) -> Angle:
    active = [i for i, w in enumerate(mixture.weights) if w > 0.0]
    if len(active) == 1:
        component = active[0]
    else:
        component = int(rng.choice(len(mixture.kappas), p=mixture.weights))
    return von_mises_sample(VonMisesParams(center, mixture.kappas[component]), rng)


def _normal_interval_mass(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Φ(b) - Φ(a), evaluated on the tail side where the CDF is small
    upper = a > 0.0
    mass = np.where(upper, ndtr(-a) - ndtr(-b), ndtr(b) - ndtr(a))
    return np.maximum(mass, 0.0)


def wrap_weight(k: WrapCounter | np.ndarray, mu: float, sigma: float) -> float | np.ndarray:
    """Probability that N(mu, sigma²) falls in the band [2πk, 2π(k+1))."""
    if not sigma > 0.0:
        msg = f"wrap_weight requires sigma > 0, got {sigma}"
        raise CircularDomainError(msg)
    k_arr = np.asarray(k, dtype=float)
    a = (TWO_PI * k_arr - mu) / sigma
    b = (TWO_PI * (k_arr + 1.0) - mu) / sigma
    mass = _normal_interval_mass(a, b)
    if np.ndim(k) == 0:
        return float(mass)
    return mass


def wrap_weights(mu: float, sigma: float, k_max: int = DEFAULT_K_MAX) -> np.ndarray:
    """Band masses for k = -k_max..k_max."""
    masses = wrap_weight(np.arange(-k_max, k_max + 1), mu, sigma)
    tail = 1.0 - float(np.sum(masses))
    if tail > WRAP_TAIL_WARNING:
        logger.warning(
            "Wrapped-normal mass %.3g lies beyond |K| <= %d (mu=%.4g, sigma=%.4g)",
            tail,
            k_max,
            mu,
            sigma,
        )
    return masses


def truncated_normal_sample(
    mu: float, sigma: float, lo: float, hi: float, rng: np.random.Generator
) -> float:
    """Exact inverse-CDF draw from N(mu, sigma²) restricted to [lo, hi]."""
    if not lo < hi:
        msg = f"truncation bounds must satisfy lo < hi, got [{lo}, {hi}]"
        raise CircularDomainError(msg)
    if not sigma > 0.0:
        msg = f"truncated normal requires sigma > 0, got {sigma}"
        raise CircularDomainError(msg)
    a = (lo - mu) / sigma
    b = (hi - mu) / sigma
    # work on the lower side of the distribution, mirroring when needed
    flip = a + b > 0.0
    if flip:
        a, b = -b, -a
    log_pa = float(log_ndtr(a))
    log_pb = float(log_ndtr(b))
    u = rng.random()
    log_p = log_pb + math.log(u + (1.0 - u) * math.exp(log_pa - log_pb))
    z = float(np.clip(ndtri_exp(log_p), a, b))
    if flip:
        z = -z
    return mu + sigma * z


def discrete_rw_propose(k: WrapCounter, var: float, rng: np.random.Generator) -> WrapCounter:
    if not var > 0.0:
        msg = f"discrete random walk variance must be positive, got {var}"
        raise CircularDomainError(msg)
    return k + int(np.rint(rng.normal(0.0, math.sqrt(var))))


def circular_mean(angles: Sequence[float] | np.ndarray) -> Angle:
    arr = np.asarray(angles, dtype=float)
    return mod_2pi(float(np.arctan2(np.mean(np.sin(arr)), np.mean(np.cos(arr)))))


def circular_variance(angles: Sequence[float] | np.ndarray) -> float:
    """1 - R̄, where R̄ is the mean resultant length."""
    arr = np.asarray(angles, dtype=float)
    resultant = math.hypot(float(np.mean(np.cos(arr))), float(np.mean(np.sin(arr))))
    return 1.0 - resultant


def degrees_to_radians(values: Sequence[float] | np.ndarray) -> np.ndarray:
    return mod_2pi(np.deg2rad(np.asarray(values, dtype=float)))
