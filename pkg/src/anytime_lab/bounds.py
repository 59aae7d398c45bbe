"""Reliability and rate calculators for the binary erasure channel with feedback.

All exponents are base 2 and all rates are in bits per channel use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import bisect
from scipy.special import rel_entr

from .state_space import StateSpaceModel, StructureError, intrinsic_delay, unstable_spectrum

LN2 = math.log(2.0)
ROOT_XTOL = 1e-10
ROOT_MAXITER = 200
DEFAULT_EPSILON = 1e-3


class RateError(ValueError):
    """Rate or reliability outside the range where a bound is defined."""


def _check_beta(beta: float) -> None:
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"beta must lie in [0, 1), got {beta}")


def gallager_e0(rho: float, beta: float) -> float:
    """E0(rho) = -log2(beta + 2^-rho (1 - beta))."""
    _check_beta(beta)
    if rho < 0:
        raise ValueError("rho must be nonnegative")
    # beta + 2^-rho (1-beta) = 1 - (1-beta)(1 - 2^-rho)
    return -math.log1p((1.0 - beta) * math.expm1(-rho * LN2)) / LN2


def gallager_e0_prime(rho: float, beta: float) -> float:
    a = (1.0 - beta) * 2.0 ** (-rho)
    return a / (beta + a)


def max_reliability(beta: float) -> float:
    """Supremum of attainable anytime reliability, -log2(beta)."""
    _check_beta(beta)
    return math.inf if beta == 0 else -math.log2(beta)


def bec_anytime_capacity(alpha: float, beta: float) -> float:
    """C_any(alpha) = alpha / (alpha + log2((1-beta)/(1-beta 2^alpha)))."""
    _check_beta(beta)
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if alpha >= max_reliability(beta):
        raise RateError(f"reliability unattainable at positive rate: alpha={alpha} >= -log2(beta)")
    if beta == 0:
        return 1.0
    # log2((1-b)/(1-b 2^a)) = -log2(1 - b (2^a - 1)/(1 - b))
    penalty = -math.log1p(-beta * math.expm1(alpha * LN2) / (1.0 - beta)) / LN2
    return alpha / (alpha + penalty)


def capacity_function(beta: float) -> Callable[[float], float]:
    """alpha -> C_any(alpha), returning 0 past the maximum reliability."""

    def cap(alpha: float) -> float:
        if alpha <= 0:
            return 1.0 - beta
        if alpha >= max_reliability(beta):
            return 0.0
        return bec_anytime_capacity(alpha, beta)

    return cap


def bec_anytime_capacity_inverse(rate: float, beta: float) -> float:
    """The reliability alpha with C_any(alpha) = rate."""
    _check_beta(beta)
    if not 0.0 < rate < 1.0 - beta:
        raise RateError(f"rate {rate} outside (0, {1.0 - beta})")
    if beta == 0:
        return math.inf
    # Solve in the penalty s = log2((1-beta)/(1-beta 2^alpha)) instead of alpha:
    # at small rates alpha sits within 2^-s of -log2(beta), far below any alpha tolerance.
    alpha_of = lambda s: math.log2(1.0 - math.expm1(-s * LN2) * (1.0 - beta) / beta)
    f = lambda s: alpha_of(s) - rate * (alpha_of(s) + s)
    lo, hi = 1.0, 1.0
    while f(lo) <= 0:
        lo /= 2.0
    while f(hi) > 0:
        hi *= 2.0
    s = bisect(f, lo, hi, xtol=ROOT_XTOL, rtol=1e-14, maxiter=ROOT_MAXITER)
    return alpha_of(s)


def parametric_point(rho: float, beta: float) -> tuple[float, float]:
    """(rate, alpha) = (E0(rho)/rho, E0(rho)) on the uncertainty-focusing curve."""
    if rho <= 0:
        raise ValueError("rho must be positive")
    e0 = gallager_e0(rho, beta)
    return e0 / rho, e0


def _rate_of_rho(rho: float, beta: float) -> float:
    return gallager_e0(rho, beta) / rho


def rho_hl(rate_sum: float, beta: float) -> float:
    """Unique rho with E0(rho)/rho = rate_sum (E0(rho)/rho is decreasing)."""
    _check_beta(beta)
    if not 0.0 < rate_sum < 1.0 - beta:
        raise RateError(f"sum rate {rate_sum} outside (0, {1.0 - beta})")
    f = lambda r: _rate_of_rho(r, beta) - rate_sum
    lo, hi = 1.0, 1.0
    while f(lo) <= 0:
        lo /= 2.0
        if lo < 1e-300:
            return 0.0
    while f(hi) > 0:
        hi *= 2.0
        if hi > 1e300:
            raise RateError("failed to bracket rho_HL")
    return bisect(f, lo, hi, xtol=ROOT_XTOL, maxiter=ROOT_MAXITER)


def sphere_packing(rate: float, beta: float) -> float:
    """Binary divergence D(1-R || beta) in bits."""
    _check_beta(beta)
    if not 0.0 <= rate <= 1.0:
        raise RateError("rate must lie in [0, 1]")
    if beta == 0:
        return math.inf if rate < 1.0 else 0.0
    return float((rel_entr(1.0 - rate, beta) + rel_entr(rate, 1.0 - beta)) / LN2)


def stationary_rho(rate_h: float, beta: float) -> float:
    """Unconstrained maximizer of E0(rho) - rho R_H: 2^-rho = beta R_H / ((1-beta)(1-R_H))."""
    return -math.log2(beta * rate_h / ((1.0 - beta) * (1.0 - rate_h)))


def low_priority_exponent(rate_h: float, rate_l: float, beta: float) -> float:
    """Lower bound max_{0 < rho <= rho_HL} E0(rho) - rho R_H on the low-priority reliability."""
    _check_beta(beta)
    if not 0.0 < rate_h < 1.0 - beta:
        raise RateError(f"R_H={rate_h} outside (0, {1.0 - beta})")
    if not 0.0 <= rate_l < 1.0 - beta - rate_h:
        raise RateError(f"R_L={rate_l} outside [0, {1.0 - beta - rate_h})")
    if beta == 0:
        return math.inf
    cap = rho_hl(rate_h + rate_l, beta)
    rho = min(stationary_rho(rate_h, beta), cap)
    if rho <= 0:
        return 0.0
    return gallager_e0(rho, beta) - rho * rate_h


def low_priority_exponent_grid(rate_h: float, rate_l: float, beta: float, points: int = 20001) -> float:
    """Brute-force grid maximization of the same bound (kept as an independent check)."""
    top = rho_hl(rate_h + rate_l, beta)
    rhos = np.linspace(top / points, top, points)
    e0 = -np.log2(beta + 2.0 ** (-rhos) * (1.0 - beta))
    return float(np.max(e0 - rhos * rate_h))


@dataclass(frozen=True)
class ReliabilityTarget:
    rate: float
    alpha: float

    def __post_init__(self):
        if self.rate < 0 or self.alpha <= 0:
            raise ValueError("targets need rate >= 0 and alpha > 0")


@dataclass(frozen=True)
class RateRegionQuery:
    targets: tuple[ReliabilityTarget, ...]

    @classmethod
    def of(cls, pairs) -> "RateRegionQuery":
        """Build from (rate, alpha) pairs, sorted by descending alpha."""
        ts = [p if isinstance(p, ReliabilityTarget) else ReliabilityTarget(*p) for p in pairs]
        return cls(tuple(sorted(ts, key=lambda t: -t.alpha)))

    def is_sorted(self) -> bool:
        return all(a.alpha >= b.alpha for a, b in zip(self.targets, self.targets[1:]))


def inner_bound_contains(q: RateRegionQuery, capacity: Callable[[float], float]) -> bool:
    """Multiplexing inner bound: sum of rates below C_any(max alpha)."""
    if not q.targets:
        return True
    if any(t.rate < 0 for t in q.targets):
        return False
    total = sum(t.rate for t in q.targets)
    return total < capacity(max(t.alpha for t in q.targets))


def outer_bound_contains(q: RateRegionQuery, capacity: Callable[[float], float]) -> bool:
    """Demultiplexing outer bound: every prefix sum within C_any of its last alpha."""
    if not q.is_sorted():
        raise ValueError("targets must be sorted by descending alpha")
    total = 0.0
    for t in q.targets:
        if t.rate < 0:
            return False
        total += t.rate
        if total > capacity(t.alpha):
            return False
    return True


@dataclass(frozen=True)
class StabilizabilityDemand:
    """Per-unstable-eigenvalue (rate, alpha) requirements and the scalar sum test."""

    targets: tuple[ReliabilityTarget, ...]
    epsilon: float
    eta: float
    theta: int | None  # feedback delay to evaluate the region at: intrinsic delay + 1
    sum_rate: float = 0.0
    max_alpha: float = 0.0
    eigen_logs: tuple[float, ...] = field(default=())

    def query(self) -> RateRegionQuery:
        return RateRegionQuery.of(self.targets)

    def sum_test_holds(self, capacity: Callable[[float], float]) -> bool:
        """Sum of log-magnitudes (plus slack) strictly below C_any(eta max log)."""
        if not self.targets:
            return True
        return self.sum_rate < capacity(self.max_alpha)


def stabilizability_demand(
    model: StateSpaceModel | np.ndarray, eta: float, epsilon: float = DEFAULT_EPSILON
) -> StabilizabilityDemand:
    if eta <= 0 or epsilon <= 0:
        raise ValueError("eta and epsilon must be positive")
    if isinstance(model, StateSpaceModel):
        A = model.A
        try:
            theta = intrinsic_delay(model) + 1
        except StructureError:
            theta = None
    else:
        A, theta = np.asarray(model, dtype=float), None
    logs = tuple(unstable_spectrum(A).log_magnitudes)
    if not logs:
        return StabilizabilityDemand((), epsilon, eta, theta)
    targets = tuple(ReliabilityTarget(l + epsilon, eta * l + epsilon) for l in logs)
    return StabilizabilityDemand(
        targets,
        epsilon,
        eta,
        theta,
        sum_rate=sum(logs) + epsilon,
        max_alpha=eta * max(logs),
        eigen_logs=logs,
    )


# -- curve generators for plotting -------------------------------------------------


def anytime_capacity_curve(beta: float, points: int = 400) -> list[tuple[float, float]]:
    """(rate, alpha) samples of the feedback anytime capacity curve."""
    if beta == 0:
        return [(1.0, a) for a in np.linspace(0.01, 10.0, points)]
    top = max_reliability(beta)
    alphas = top * np.linspace(1e-4, 1.0 - 1e-4, points)
    return [(bec_anytime_capacity(float(a), beta), float(a)) for a in alphas]


def sphere_packing_curve(beta: float, points: int = 400) -> list[tuple[float, float]]:
    rates = np.linspace(1e-4, 1.0 - beta, points)
    return [(float(r), sphere_packing(float(r), beta)) for r in rates]


def rho_sweep(rate_h: float, beta: float, points: int = 400) -> list[tuple[float, float, float]]:
    """(rho, R_L', rho R_L') for R_L' = E0(rho)/rho - R_H; the maximum hits sphere-packing."""
    top = rho_hl(rate_h, beta)
    out = []
    for rho in np.linspace(top / points, top, points):
        r_l = _rate_of_rho(float(rho), beta) - rate_h
        out.append((float(rho), r_l, gallager_e0(float(rho), beta) - float(rho) * rate_h))
    return out


def low_priority_curve(rate_h: float, beta: float, points: int = 400) -> list[tuple[float, float]]:
    """(R_L, low-priority bound) as R_L ranges over [0, 1 - beta - R_H)."""
    top = 1.0 - beta - rate_h
    return [
        (float(r), low_priority_exponent(rate_h, float(r), beta))
        for r in np.linspace(0.0, top * (1 - 1e-6), points)
    ]
