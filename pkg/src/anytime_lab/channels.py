"""Binary erasure channel, noiseless bit-pipe and delayed channel feedback."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from fractions import Fraction

import numpy as np


def trial_rng(seed: int, trial: int = 0) -> np.random.Generator:
    """Counter-based generator keyed by (scenario seed, trial index)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(trial)])))


@dataclass(frozen=True)
class ErasureChannel:
    beta: float

    def __post_init__(self):
        if not 0.0 <= self.beta < 1.0:
            raise ValueError(f"erasure probability must lie in [0, 1), got {self.beta}")

    @property
    def capacity(self) -> float:
        return 1.0 - self.beta

    def erasures(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Bulk erasure pattern; identical to ``size`` successive transmit() draws."""
        return rng.random(size) < self.beta


@dataclass(frozen=True)
class ChannelEvent:
    t: int
    input: int
    erased: bool

    @property
    def output(self) -> int | None:
        """Received bit, or None for an erasure."""
        return None if self.erased else self.input


def transmit(ch: ErasureChannel, bit: int, rng: np.random.Generator, t: int = 0) -> ChannelEvent:
    return ChannelEvent(t, int(bit), bool(rng.random() < ch.beta))


@dataclass(frozen=True)
class FeedbackLink:
    theta: int = 1

    def __post_init__(self):
        if self.theta < 1:
            raise ValueError("feedback delay must be at least one step")


def feedback_view(history: list[ChannelEvent], t: int, link: FeedbackLink) -> list[ChannelEvent]:
    """Events the encoder may use at time t: those with time <= t - theta."""
    return [ev for ev in history if ev.t <= t - link.theta]


def _exact(rate) -> Fraction:
    if isinstance(rate, Fraction):
        return rate
    # decimal string keeps 0.341 as 341/1000 instead of its binary expansion
    return Fraction(str(rate)) if isinstance(rate, float) else Fraction(rate)


@dataclass(frozen=True)
class BitPipe:
    """Noiseless pipe of R bits per step on the floor schedule."""

    rate: float

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError("pipe rate must be positive")

    @cached_property
    def exact_rate(self) -> Fraction:
        return _exact(self.rate)

    @cached_property
    def _nd(self) -> tuple[int, int]:
        r = self.exact_rate
        return r.numerator, r.denominator

    def cumulative(self, t: int) -> int:
        """Bits that have arrived by time t: floor(R t)."""
        num, den = self._nd
        return (num * t) // den

    def arrival_step(self, j: int) -> int:
        """Step at which bit j (1-based) arrives: smallest t with floor(R t) >= j."""
        num, den = self._nd
        return -((-j * den) // num)


def pipe_budget(pipe: BitPipe, t: int) -> int:
    if t < 1:
        raise ValueError("pipe_budget is defined for t >= 1")
    return pipe.cumulative(t) - pipe.cumulative(t - 1)


def budget_schedule(rate, horizon: int) -> np.ndarray:
    """Per-step arrivals b_t = floor(R t) - floor(R (t-1)) for t = 1..horizon."""
    r = _exact(rate)
    t = np.arange(horizon + 1, dtype=np.int64)
    cum = (r.numerator * t) // r.denominator
    return np.diff(cum)


@dataclass(frozen=True)
class BatchedPipe:
    """Floor schedule sampled at the end of every ``period``-step block.

    Bits produced over block k (channel uses kL+1 .. kL+L) all become
    available at use (k+1)L; with period 1 this is the plain :class:`BitPipe`.
    """

    rate: float
    period: int = 1

    def __post_init__(self):
        if not self.rate > 0 or self.period < 1:
            raise ValueError("need a positive rate and period >= 1")

    @cached_property
    def exact_rate(self) -> Fraction:
        return _exact(self.rate)

    @cached_property
    def _nd(self) -> tuple[int, int]:
        r = self.exact_rate * self.period
        return r.numerator, r.denominator

    def cumulative(self, t: int) -> int:
        num, den = self._nd
        return (num * (t // self.period)) // den

    def arrival_step(self, j: int) -> int:
        num, den = self._nd
        return -((-j * den) // num) * self.period
