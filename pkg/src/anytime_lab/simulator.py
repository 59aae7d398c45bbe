"""Monte Carlo engine: disturbances, closed-loop runs, moment series and scheme comparison."""

from __future__ import annotations

import csv
import hashlib
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .channels import ErasureChannel
from .observer_controller import ClosedLoop, LoopConfig
from .state_space import StateSpaceModel

WORKERS_ENV = "ANYTIME_LAB_WORKERS"
POLICIES = ("iid", "extremal", "fixed")
SLOPE_CONFIDENCE = 0.95
BOOTSTRAP_SAMPLES = 2000


def worker_count() -> int:
    """Worker processes for trial fan-out, read from ANYTIME_LAB_WORKERS (default 1)."""
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValueError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ValueError(f"{WORKERS_ENV} must be at least 1")
    return n


@dataclass(frozen=True)
class Scenario:
    model: StateSpaceModel
    beta: float
    loop: LoopConfig
    horizon: int
    trials: int
    eta: float
    seed: int = 0
    disturbance: str = "iid"  # iid | extremal | fixed
    noise: str = "iid"  # same choices for the observation noise
    fixed_w: tuple | None = None
    name: str = "scenario"

    def __post_init__(self):
        ErasureChannel(self.beta)
        if self.horizon < 1 or self.trials < 1:
            raise ValueError("horizon and trials must be at least 1")
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        for name in ("disturbance", "noise"):
            if getattr(self, name) not in POLICIES:
                raise ValueError(f"{name} policy must be one of {POLICIES}")
        if self.disturbance == "fixed" and self.fixed_w is None:
            raise ValueError("the fixed disturbance policy needs fixed_w")

    @property
    def channel(self) -> ErasureChannel:
        return ErasureChannel(self.beta)


@dataclass
class SimulationTrace:
    trial: int
    x: np.ndarray  # (T, n) state after each step
    u: np.ndarray  # (T, m_u)
    y: np.ndarray  # (T, m_y)
    erasures: np.ndarray  # (T,) bool
    queues: np.ndarray | None  # (T, streams) queue lengths after each channel use
    diverged: bool
    box_violations: int
    dance_errors: int = 0

    @property
    def norms(self) -> np.ndarray:
        return np.abs(self.x).max(axis=1)

    @property
    def max_norm(self) -> float:
        return float(self.norms.max())


def trial_streams(seed: int, trial: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent Philox generators for (erasures, disturbances) of one trial."""
    ss = np.random.SeedSequence([int(seed), int(trial)])
    ch, dist = ss.spawn(2)
    return np.random.Generator(np.random.Philox(ch)), np.random.Generator(np.random.Philox(dist))


def trial_erasures(scenario: Scenario, trial: int) -> np.ndarray:
    """Erasure pattern of a trial; depends only on (seed, trial, beta, horizon)."""
    ch_rng, _ = trial_streams(scenario.seed, trial)
    return scenario.channel.erasures(ch_rng, scenario.horizon)


def extremal_disturbance(policy: str, model: StateSpaceModel, rng: np.random.Generator, loop: ClosedLoop | None = None, fixed=None) -> np.ndarray:
    """One disturbance vector.

    iid: uniform on [-omega/2, omega/2] per coordinate; extremal: +-omega/2
    with the sign that pushes the loop's virtual coordinates outward
    (ties go to +); fixed: the given vector.
    """
    half = model.omega / 2
    if policy == "iid":
        return rng.uniform(-half, half, size=model.m_w)
    if policy == "extremal":
        if loop is None:
            return np.full(model.m_w, half)
        direction = loop.push_direction()
        return np.where(direction >= 0, half, -half)
    if policy == "fixed":
        w = np.asarray(fixed, dtype=float).reshape(model.m_w)
        if np.max(np.abs(w)) > half:
            raise ValueError("fixed disturbance exceeds omega/2")
        return w
    raise ValueError(f"unknown disturbance policy {policy!r}")


def _noise(policy: str, model: StateSpaceModel, rng: np.random.Generator) -> np.ndarray:
    half = model.gamma / 2
    if half == 0:
        return np.zeros(model.m_y)
    if policy == "extremal":
        return np.where(rng.random(model.m_y) < 0.5, -half, half)
    if policy == "fixed":
        return np.full(model.m_y, half)
    return rng.uniform(-half, half, size=model.m_y)


def run_trial(scenario: Scenario, trial: int) -> SimulationTrace:
    """One closed-loop run; a pure function of (scenario, trial)."""
    m, T = scenario.model, scenario.horizon
    erasures = trial_erasures(scenario, trial)
    _, rng = trial_streams(scenario.seed, trial)
    loop = ClosedLoop(m, scenario.loop)
    xs = np.empty((T, m.n))
    us = np.empty((T, m.m_u))
    ys = np.empty((T, m.m_y))
    coded = loop.enc is not None
    queues = np.empty((T, len(scenario.loop.rates)), dtype=np.int64) if coded else None
    for t in range(T):
        w = extremal_disturbance(scenario.disturbance, m, rng, loop, scenario.fixed_w)
        nn = _noise(scenario.noise, m, rng)
        xs[t] = loop.step(w, nn, bool(erasures[t]))
        us[t] = loop.u
        ys[t] = loop.Y[-1]
        if coded:
            queues[t] = loop.enc.queue_lengths()
    return SimulationTrace(
        trial,
        xs,
        us,
        ys,
        erasures,
        queues,
        loop.diverged,
        loop.box_violations,
        getattr(loop, "dance_errors", 0),
    )


def _run_chunk(args) -> list[SimulationTrace]:
    scenario, trials = args
    return [run_trial(scenario, k) for k in trials]


def run(scenario: Scenario, workers: int | None = None) -> list[SimulationTrace]:
    """All trials of a scenario, fanned out over a process pool when workers > 1."""
    workers = worker_count() if workers is None else workers
    trials = list(range(scenario.trials))
    if workers <= 1 or len(trials) == 1:
        return _run_chunk((scenario, trials))
    chunks = [trials[i::workers] for i in range(workers)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(_run_chunk, [(scenario, c) for c in chunks if c]))
    out = [tr for part in parts for tr in part]
    return sorted(out, key=lambda tr: tr.trial)


# -- moments -------------------------------------------------------------------------------


@dataclass
class MomentSeries:
    """E[||X_t||^eta] across trials, with normal-approximation 95% half-widths."""

    eta: float
    mean: np.ndarray
    halfwidth: np.ndarray
    log_mean: np.ndarray  # natural log of mean, finite even when mean overflows

    @property
    def t(self) -> np.ndarray:
        return np.arange(1, self.mean.size + 1)


def _norm_matrix(traces) -> np.ndarray:
    return np.stack([tr.norms for tr in traces])


def moment_series(traces, eta: float) -> MomentSeries:
    if len(traces) < 2:
        raise ValueError("moment_series needs at least two traces")
    norms = _norm_matrix(traces)
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        powered = norms**eta
        mean = powered.mean(axis=0)
        sd = powered.std(axis=0, ddof=1)
        logs = eta * np.log(norms)
    log_mean = logsumexp(logs, axis=0) - math.log(norms.shape[0])
    return MomentSeries(eta, mean, 1.96 * sd / math.sqrt(norms.shape[0]), log_mean)


@dataclass
class SlopeTest:
    """Least-squares slope of log E[||X_t||^eta] on a time window, with a bootstrap interval.

    This is a finite-horizon proxy for moment divergence.
    """

    slope: float
    lo: float
    hi: float
    t_lo: int
    t_hi: int
    diverged_fraction: float
    confidence: float = SLOPE_CONFIDENCE

    @property
    def significantly_positive(self) -> bool:
        return self.lo > 0

    @property
    def unstable(self) -> bool:
        return self.significantly_positive or self.diverged_fraction > 0


def _window_slope(log_norms: np.ndarray, idx: np.ndarray, tt: np.ndarray) -> float:
    lm = logsumexp(log_norms[idx], axis=0) - math.log(idx.size)
    tc = tt - tt.mean()
    return float(tc @ (lm - lm.mean()) / (tc @ tc))


def slope_test(traces, eta: float, t_lo: int, t_hi: int, rng: np.random.Generator | None = None, samples: int = BOOTSTRAP_SAMPLES) -> SlopeTest:
    """Bootstrap over trials; t_lo and t_hi are 1-based step counts, inclusive."""
    norms = _norm_matrix(traces)
    T = norms.shape[1]
    if not 1 <= t_lo < t_hi <= T:
        raise ValueError(f"window [{t_lo}, {t_hi}] outside 1..{T}")
    with np.errstate(divide="ignore"):
        logs = eta * np.log(norms[:, t_lo - 1 : t_hi])
    tt = np.arange(t_lo, t_hi + 1, dtype=float)
    N = norms.shape[0]
    point = _window_slope(logs, np.arange(N), tt)
    rng = rng if rng is not None else np.random.default_rng(0)
    boots = np.array([_window_slope(logs, rng.integers(0, N, N), tt) for _ in range(samples)])
    a = (1 - SLOPE_CONFIDENCE) / 2
    lo, hi = np.quantile(boots, [a, 1 - a])
    div = float(np.mean([tr.diverged for tr in traces]))
    return SlopeTest(point, float(lo), float(hi), t_lo, t_hi, div)


def state_tail(traces, xs, t_from: int = 1) -> list[tuple[float, float]]:
    """Empirical P(||X_t|| >= x) pooled over trials and steps t >= t_from."""
    pooled = _norm_matrix(traces)[:, t_from - 1 :].ravel()
    return [(float(x), float(np.mean(pooled >= x))) for x in xs]


def erasure_digest(traces) -> str:
    h = hashlib.sha256()
    for tr in sorted(traces, key=lambda tr: tr.trial):
        h.update(np.packbits(tr.erasures).tobytes())
    return h.hexdigest()


@dataclass
class PairedReport:
    names: tuple[str, str]
    series: tuple[MomentSeries, MomentSeries]
    slopes: tuple[SlopeTest, SlopeTest]
    tails: tuple[list, list]
    same_erasures: bool
    max_norms: tuple[float, float]
    box_violations: tuple[int, int]
    label: str = "finite-horizon proxy: the instability claim is asymptotic"
    extras: dict = field(default_factory=dict)

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        a, b = self.series
        with path.open("w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(["t", f"moment_{self.names[0]}", f"halfwidth_{self.names[0]}", f"moment_{self.names[1]}", f"halfwidth_{self.names[1]}"])
            for k in range(a.mean.size):
                wr.writerow([k + 1, a.mean[k], a.halfwidth[k], b.mean[k], b.halfwidth[k]])


def compare_schemes(a: Scenario, b: Scenario, window: tuple[int, int] | None = None, workers: int | None = None, tail_levels=None) -> PairedReport:
    """Run two schemes on shared erasure sequences and compare their moment series."""
    if (a.seed, a.trials, a.horizon, a.beta) != (b.seed, b.trials, b.horizon, b.beta):
        raise ValueError("paired schemes need the same seed, trials, horizon and channel")
    ta, tb = run(a, workers), run(b, workers)
    T = a.horizon
    lo, hi = window if window is not None else (T // 2, T)
    eta = a.eta
    rng = np.random.default_rng([a.seed, 7])
    levels = tail_levels if tail_levels is not None else np.logspace(0, 6, 25)
    return PairedReport(
        (a.name, b.name),
        (moment_series(ta, eta), moment_series(tb, eta)),
        (slope_test(ta, eta, lo, hi, rng), slope_test(tb, eta, lo, hi, rng)),
        (state_tail(ta, levels, lo), state_tail(tb, levels, lo)),
        erasure_digest(ta) == erasure_digest(tb),
        (max(tr.max_norm for tr in ta), max(tr.max_norm for tr in tb)),
        (sum(tr.box_violations for tr in ta), sum(tr.box_violations for tr in tb)),
    )


def with_loop(scenario: Scenario, **changes) -> Scenario:
    """Same scenario with some LoopConfig fields replaced."""
    return replace(scenario, loop=replace(scenario.loop, **changes))


def write_traces_csv(traces, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        wr = csv.writer(f)
        n = traces[0].x.shape[1]
        wr.writerow(["trial", "t", "erased"] + [f"x{i}" for i in range(n)])
        for tr in traces:
            for t in range(tr.x.shape[0]):
                wr.writerow([tr.trial, t + 1, int(tr.erasures[t])] + list(tr.x[t]))


def write_moments_csv(series: MomentSeries, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["t", "moment", "halfwidth"])
        for k in range(series.mean.size):
            wr.writerow([k + 1, series.mean[k], series.halfwidth[k]])
