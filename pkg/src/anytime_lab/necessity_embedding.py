"""Embedding message bits in simulated disturbances and decoding them back.

A stream of +-1 bits at rate R < log2(lambda) is written into the
disturbance of an unstable coordinate so that the uncontrolled state is a
Cantor-style sum

    Xc_t = gamma lambda^t sum_{k < floor(R t)} lambda^{-k/R} S(k).

Bit k enters the disturbance at step a_k - 1, where a_k = ceil((k+1)/R) is
the step at which the floor schedule has produced it. Inside an upper
triangular block J = lambda I + N the later coordinates leak into the
earlier ones through p_ji(tau) = [(I + N/lambda)^tau]_ji, a polynomial of
degree i - j in the time tau = t - a_k since the bit arrived.

A controller that keeps the real state small must, through its controls,
reveal Xc_t: the state driven by the controls alone is Xt_t = X_t - Xc_t,
so D_t = -Xt_t = Xc_t - X_t. The decoder extracts the last coordinate of a
block first, subtracts its reconstructed leakage from the earlier
coordinates and carries on upwards.

All sums are evaluated with mpmath at a working precision of roughly
t log2(lambda) bits plus a guard; doubles cannot hold that many digits.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from fractions import Fraction
from math import comb
from pathlib import Path

import mpmath
import numpy as np

from .bounds import RateError
from .channels import BitPipe
from .state_space import StateSpaceModel, StructureError

GUARD_BITS = 96
DEFAULT_EPS_PRIME = 0.1
KPRIME_TAU_CAP = 100_000


@dataclass(frozen=True)
class EmbeddingParams:
    """Constants of one embedded stream: lam > 1 and rate < log2(lam)."""

    lam: float
    rate: float
    omega: float = 1.0

    def __post_init__(self):
        if not self.lam > 1.0:
            raise ValueError(f"embedding needs lambda > 1, got {self.lam}")
        if not self.rate > 0:
            raise ValueError("rate must be positive")
        if self.omega <= 0:
            raise ValueError("omega must be positive")
        if self.rate >= math.log2(self.lam):
            raise RateError(f"embedding rate {self.rate} must be below log2(lambda) = {math.log2(self.lam):.6g}")

    @property
    def gamma(self) -> float:
        return self.omega / (2.0 * self.lam ** (1.0 + 1.0 / self.rate))

    @property
    def eps1(self) -> float:
        return 2.0 ** (math.log2(self.lam) / self.rate) - 2.0

    @property
    def pipe(self) -> BitPipe:
        return BitPipe(self.rate)

    def nbits(self, t: int) -> int:
        """Bits embedded by time t: floor(R t)."""
        return self.pipe.cumulative(t)

    def arrival(self, k: int) -> int:
        """Time a_k at which 0-based bit k is first part of the state."""
        return self.pipe.arrival_step(k + 1)

    # mpmath versions of the constants, evaluated at the current precision
    def mp_lam(self):
        return mpmath.mpf(self.lam)

    def mp_inv_step(self):
        """lambda^{-1/R} with R taken as the exact decimal rate."""
        r = Fraction(str(self.rate)) if isinstance(self.rate, float) else Fraction(self.rate)
        return mpmath.power(self.mp_lam(), -mpmath.mpf(r.denominator) / r.numerator)

    def mp_gamma(self):
        return mpmath.mpf(self.omega) / 2 * self.mp_inv_step() / self.mp_lam()


def working_precision(params, t: int) -> int:
    """Binary digits needed to resolve every embedded bit at time t."""
    ps = params if isinstance(params, (list, tuple)) else [params]
    need = max(t * math.log2(p.lam) + abs(math.log2(min(p.eps1, 1.0))) for p in ps)
    return int(need) + GUARD_BITS


def _weights(p: EmbeddingParams, t: int, count: int | None = None) -> list:
    """gamma lambda^{t - k/R} for k = 0 .. count-1 (default: all bits present at t)."""
    count = p.nbits(t) if count is None else count
    lam_t = mpmath.power(p.mp_lam(), t) * p.mp_gamma()
    step = p.mp_inv_step()
    out, cur = [], lam_t
    for _ in range(count):
        out.append(cur)
        cur = cur * step
    return out


# -- block geometry ---------------------------------------------------------------------


def check_block(block) -> np.ndarray:
    """An upper-triangular real block with one repeated diagonal value lambda > 1."""
    J = np.atleast_2d(np.asarray(block, dtype=float))
    n = J.shape[0]
    if J.shape != (n, n):
        raise StructureError("block must be square")
    if np.any(np.tril(J, -1) != 0):
        raise StructureError("block must be upper triangular")
    lam = J[0, 0]
    if np.any(np.diag(J) != lam):
        raise StructureError("block must have a constant diagonal")
    if not lam > 1:
        raise StructureError("embedding blocks need a positive unstable eigenvalue")
    return J


def leakage_polynomial(block, j: int, i: int, tau: int):
    """p_ji(tau) = [(I + N/lambda)^tau]_ji as an mpf (1 on the diagonal, 0 below it)."""
    J = check_block(block)
    if i == j:
        return mpmath.mpf(1)
    if j > i:
        return mpmath.mpf(0)
    lam = mpmath.mpf(J[0, 0])
    n = J.shape[0]
    Nl = mpmath.matrix(n, n)
    for a in range(n):
        for b in range(a + 1, n):
            Nl[a, b] = mpmath.mpf(J[a, b]) / lam
    total = mpmath.mpf(0)
    power = mpmath.eye(n)
    for m in range(0, min(tau, n - 1) + 1):
        if m > 0:
            power = power * Nl
        total += comb(tau, m) * power[j, i]
    return total


def _leakage_table(block, tau_max: int) -> dict:
    """All p_ji(tau) for j < i, tau = 0 .. tau_max, computed once per block."""
    J = check_block(block)
    n = J.shape[0]
    lam = mpmath.mpf(J[0, 0])
    Nl = mpmath.matrix(n, n)
    for a in range(n):
        for b in range(a + 1, n):
            Nl[a, b] = mpmath.mpf(J[a, b]) / lam
    powers = [mpmath.eye(n)]
    for _ in range(1, n):
        powers.append(powers[-1] * Nl)
    table = {}
    for i in range(n):
        for j in range(i):
            coeffs = [powers[m][j, i] for m in range(n)]
            table[(j, i)] = [
                sum((comb(tau, m) * coeffs[m] for m in range(min(tau, n - 1) + 1)), mpmath.mpf(0))
                for tau in range(tau_max + 1)
            ]
    return table


def _as_streams(bits, n: int) -> list[list[int]]:
    if n == 1 and len(bits) and not isinstance(bits[0], (list, tuple, np.ndarray)):
        bits = [bits]
    if len(bits) != n:
        raise ValueError(f"need one bit sequence per coordinate ({n})")
    out = []
    for seq in bits:
        seq = [int(b) for b in seq]
        if any(b not in (-1, 1) for b in seq):
            raise ValueError("embedded bits must be +-1")
        out.append(seq)
    return out


def stream_contribution(params: EmbeddingParams, bits, block, t: int, i: int, table: dict | None = None) -> list:
    """State vector at time t produced by stream i alone (its own row plus leakage rows)."""
    J = check_block(block)
    n = J.shape[0]
    count = min(len(bits), params.nbits(t))
    w = _weights(params, t, count)
    out = [mpmath.mpf(0)] * n
    out[i] = mpmath.fsum(w[k] * bits[k] for k in range(count))
    if i > 0 and count:
        if table is None:
            table = _leakage_table(J, t)
        for j in range(i):
            p = table[(j, i)]
            out[j] = mpmath.fsum(w[k] * p[t - params.arrival(k)] * bits[k] for k in range(count))
    return out


def embed(params, bits, block, t: int) -> list:
    """Uncontrolled state Xc_t of a block driven by the embedded streams.

    ``params`` is one EmbeddingParams shared by all coordinates or a list
    with one entry per coordinate; ``bits`` holds one +-1 sequence per
    coordinate (a flat sequence is accepted for a 1x1 block).
    """
    J = check_block(block if block is not None else [[params.lam]])
    n = J.shape[0]
    ps = _per_stream(params, n, J[0, 0])
    streams = _as_streams(bits, n)
    with mpmath.workprec(working_precision(ps, t)):
        table = _leakage_table(J, t) if n > 1 else None
        total = [mpmath.mpf(0)] * n
        for i in range(n):
            c = stream_contribution(ps[i], streams[i], J, t, i, table)
            total = [a + b for a, b in zip(total, c)]
    return total


def _per_stream(params, n: int, lam: float) -> list[EmbeddingParams]:
    ps = list(params) if isinstance(params, (list, tuple)) else [params] * n
    if len(ps) != n:
        raise ValueError("need one EmbeddingParams per coordinate")
    for p in ps:
        if p.lam != lam:
            raise ValueError(f"stream lambda {p.lam} differs from the block eigenvalue {lam}")
    return ps


def simulated_disturbances(params: EmbeddingParams, bits, horizon: int) -> list:
    """Per-step disturbance W_s, s = 0 .. horizon-1, whose uncontrolled response is the embedding.

    Bit k is injected at step a_k - 1 with weight gamma lambda^{a_k - k/R};
    for R <= 1 at most one bit lands per step and |W_s| <= omega/2.
    """
    w = [mpmath.mpf(0)] * horizon
    lam, step, g = params.mp_lam(), params.mp_inv_step(), params.mp_gamma()
    for k, b in enumerate(bits):
        a = params.arrival(k)
        if a - 1 >= horizon:
            break
        w[a - 1] += g * mpmath.power(lam, a) * mpmath.power(step, k) * b
    return w


# -- gaps and bit extraction --------------------------------------------------------------


def gap_bound(params: EmbeddingParams, t: int, i: int) -> float:
    """Lower bound on the distance between sequences differing at 1-based bit i."""
    if i > params.nbits(t):
        return 0.0
    p = params
    return float(
        mpmath.power(p.mp_lam(), t) * mpmath.power(p.mp_inv_step(), i) * 2 * p.mp_gamma() * p.eps1 / (1 + p.eps1)
    )


def exact_gaps(params: EmbeddingParams, t: int) -> list:
    """Exact inf distance for sequences whose first difference is 0-based bit k, per k."""
    w = _weights(params, t)
    tail = mpmath.mpf(0)
    out = [None] * len(w)
    for k in range(len(w) - 1, -1, -1):
        out[k] = 2 * (w[k] - tail)
        tail += w[k]
    return out


def extract_bits(residual, params: EmbeddingParams, t: int) -> list[int]:
    """Greedy most-significant-first extraction of the +-1 prefix from one residual.

    With the earlier bits fixed, the two candidate sub-intervals for bit k
    are centred at c +- w_k; the nearer centre wins (ties go to +1).
    """
    w = _weights(params, t)
    c = mpmath.mpf(0)
    r = mpmath.mpf(residual)
    out = []
    for wk in w:
        b = 1 if r >= c else -1
        out.append(b)
        c += b * wk
    return out


def first_error(decoded, truth) -> int | None:
    for k, (a, b) in enumerate(zip(decoded, truth)):
        if a != b:
            return k
    return None


# -- successive decoding ----------------------------------------------------------------


@dataclass
class SuccessiveDecoderState:
    D: list
    decoded: dict = field(default_factory=dict)
    i: int = -1


def successive_decode(state: SuccessiveDecoderState, params, block, t: int, forced: dict | None = None) -> dict:
    """Decode the coordinates of one block from the last to the first.

    ``state.D`` starts as -Xt_t (the negated control-driven state). After a
    coordinate is decoded its reconstructed leakage is removed from every
    earlier residual. ``forced`` maps a coordinate to a bit prefix that
    replaces the extracted one, which is how decoding errors are injected.
    """
    J = check_block(block)
    n = J.shape[0]
    ps = _per_stream(params, n, J[0, 0])
    forced = forced or {}
    with mpmath.workprec(working_precision(ps, t)):
        table = _leakage_table(J, t) if n > 1 else None
        D = [mpmath.mpf(d) for d in state.D]
        for i in range(n - 1, -1, -1):
            state.i = i
            bits = forced[i] if i in forced else extract_bits(D[i], ps[i], t)
            state.decoded[i] = list(bits)
            if i > 0:
                c = stream_contribution(ps[i], bits, J, t, i, table)
                for j in range(i):
                    D[j] -= c[j]
        state.D = D
    return state.decoded


def to_message_bits(bits) -> list[int]:
    """Exported bit values: -1 -> 0, +1 -> 1."""
    return [(b + 1) // 2 for b in bits]


def from_message_bits(bits) -> list[int]:
    return [2 * int(b) - 1 for b in bits]


# -- error propagation ------------------------------------------------------------------


def margin_allocation(n: int, i: int, d: int, params: EmbeddingParams) -> float:
    """Per-piece deviation margin gamma eps1 / ((n-i+1)(1+eps1)) lambda^d for 1-based stream i."""
    if not 1 <= i <= n:
        raise ValueError("need 1 <= i <= n")
    if d < 0:
        raise ValueError("delay must be nonnegative")
    return params.gamma * params.eps1 / ((n - i + 1) * (1 + params.eps1)) * params.lam**d


def leakage_constant(block, j: int, i: int, eps_prime: float) -> float:
    """K = sup_tau |p_ji(tau)| lambda^{-eps' tau}, evaluated past the peak of the decaying envelope."""
    J = check_block(block)
    if eps_prime <= 0:
        raise ValueError("eps_prime must be positive")
    if i <= j:
        return 0.0
    lam = J[0, 0]
    decay = eps_prime * math.log(lam)
    deg = i - j
    tau_max = min(KPRIME_TAU_CAP, int(4 * deg / decay) + 64)
    with mpmath.workprec(80):
        table = _leakage_table(J[: i + 1, : i + 1], tau_max)
        p = table[(j, i)]
        return float(max(abs(p[tau]) * mpmath.exp(-decay * tau) for tau in range(tau_max + 1)))


def kprime(params: EmbeddingParams, block, j: int, i: int, eps_prime: float, K: float | None = None) -> float:
    """K' with deviation(d) <= K' lambda^{(1+eps') d}.

    Wrong bits all arrived within the last d steps, so their weights are
    below gamma lambda^{d + 1/R} and fall geometrically by lambda^{-1/R};
    each carries a leakage factor of at most K lambda^{eps' d}.
    """
    K = leakage_constant(block, j, i, eps_prime) if K is None else K
    lam, R = params.lam, params.rate
    return params.omega * K / (lam * (1.0 - lam ** (-1.0 / R)))


def propagation_bound(d: int, eps_prime: float, block, params: EmbeddingParams, j: int = 0, i: int = 1, K=None) -> float:
    """Largest deviation of residual j caused by wrong bits of stream i that are younger than d steps."""
    if eps_prime <= 0:
        raise ValueError("eps_prime must be positive")
    return kprime(params, block, j, i, eps_prime, K) * params.lam ** ((1 + eps_prime) * d)


def tolerated_delay(d: int, n: int, i: int, params: EmbeddingParams, kp: float, eps_prime: float) -> float:
    """d' = K'' + d/(1+eps') where the margin at delay d equals K' lambda^{(1+eps') d'}."""
    base = params.gamma * params.eps1 / (kp * (n - i + 1) * (1 + params.eps1))
    kpp = math.log2(base) / ((1 + eps_prime) * math.log2(params.lam))
    return kpp + d / (1 + eps_prime)


def cross_stream_deviation(params: EmbeddingParams, block, t: int, d: int, i: int, j: int, bits=None) -> float:
    """Deviation of residual j when stream i gets every bit younger than d steps wrong.

    Without ``bits`` the signs are chosen adversarially (every term adds);
    with ``bits`` the true sequence is flipped on those positions.
    """
    J = check_block(block)
    with mpmath.workprec(working_precision(params, t)):
        table = _leakage_table(J, t)
        w = _weights(params, t)
        p = table[(j, i)] if i > j else None
        if p is None:
            return 0.0
        total = mpmath.mpf(0)
        for k, wk in enumerate(w):
            a = params.arrival(k)
            if a <= t - d:
                continue
            term = 2 * wk * p[t - a]
            total += abs(term) if bits is None else term * bits[k]
        return float(abs(total))


# -- code from a controller ---------------------------------------------------------------


def triangular_blocks(A) -> list[tuple[int, int]]:
    """(start, size) of each run of equal diagonal entries in an upper-triangular A.

    Coupling is only allowed inside a run, so every run is a block on its own.
    """
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    if np.any(np.tril(A, -1) != 0):
        raise StructureError("the embedding co-simulation needs A in upper-triangular form")
    runs, s = [], 0
    for k in range(1, n + 1):
        if k == n or A[k, k] != A[s, s]:
            runs.append((s, k - s))
            s = k
    for a, (s1, n1) in enumerate(runs):
        for s2, n2 in runs[a + 1 :]:
            if np.any(A[s1 : s1 + n1, s2 : s2 + n2] != 0):
                raise StructureError("coupling between blocks with different eigenvalues is not supported")
    return runs


@dataclass
class RoundTripReport:
    rows: list  # (stream, d, P(error at delay >= d), margin, propagation bound)
    samples: int
    max_state: float
    errors_beyond_gap: int  # wrong bits whose half-gap exceeded the state bound (must be 0)
    final_bits_wrong: int
    streams: list = field(default_factory=list)

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(["stream", "delay", "p_error_ge_d", "margin", "propagation_bound"])
            wr.writerows(self.rows)


def code_from_controller(
    loop,
    model: StateSpaceModel,
    rates,
    horizon: int,
    rng: np.random.Generator,
    erasures=None,
    stride: int = 1,
    eps_prime: float = DEFAULT_EPS_PRIME,
    max_delay: int = 40,
) -> RoundTripReport:
    """Run ``loop`` as the anytime encoder/decoder pair for embedded message streams.

    The plant is simulated in high precision with the embedded disturbance;
    the loop only ever sees the rounded state, as a real controller would.
    Each stride, every unstable coordinate's bits are decoded from the
    negated control-driven state and compared with the truth.
    """
    A = np.asarray(model.A, dtype=float)
    runs = triangular_blocks(A)
    Bw = np.asarray(model.B_w, dtype=float)
    if Bw.shape[0] != Bw.shape[1] or np.linalg.matrix_rank(Bw) < Bw.shape[0]:
        raise StructureError("the embedding needs an invertible B_w")
    Bw_inv = np.linalg.inv(Bw)
    omega_emb = model.omega / np.abs(Bw_inv).sum(axis=1).max()
    unstable = [(s, n) for s, n in runs if A[s, s] > 1]
    coords = [c for s, n in unstable for c in range(s, s + n)]
    if len(rates) != len(coords):
        raise ValueError(f"need one embedded rate per unstable coordinate ({len(coords)})")
    params = {c: EmbeddingParams(float(A[c, c]), r, omega_emb) for c, r in zip(coords, rates)}
    for c, p in params.items():
        if p.rate > 1:
            raise RateError("embedded rates above one bit per step would exceed the disturbance bound")
    truth = {c: [int(b) for b in 2 * rng.integers(0, 2, size=params[c].nbits(horizon) + 1) - 1] for c in coords}

    n = model.n
    prec = working_precision(list(params.values()), horizon)
    per_delay: dict[int, np.ndarray] = {c: np.zeros(max_delay + 2) for c in coords}
    samples = 0
    max_state = 0.0
    beyond = 0
    final_wrong = 0
    with mpmath.workprec(prec):
        W = {c: simulated_disturbances(params[c], truth[c], horizon) for c in coords}
        Amp = [[mpmath.mpf(A[a, b]) for b in range(n)] for a in range(n)]
        Bu = np.asarray(model.B_u, dtype=float)
        X = [mpmath.mpf(0)] * n
        Xt = [mpmath.mpf(0)] * n
        tables = {s: _leakage_table(A[s : s + m, s : s + m], horizon) for s, m in unstable if m > 1}
        for t in range(horizon):
            Wv = [W[c][t] if c in W else mpmath.mpf(0) for c in range(n)]
            w_float = Bw_inv @ np.array([float(v) for v in Wv])
            erased = bool(erasures[t]) if erasures is not None else False
            loop.step(w_float, np.zeros(model.m_y), erased)
            u = np.asarray(loop.u, dtype=float)
            Bu_u = [mpmath.mpf(float(v)) for v in Bu @ u]
            X = [mpmath.fsum(Amp[a][b] * X[b] for b in range(n)) + Bu_u[a] + Wv[a] for a in range(n)]
            Xt = [mpmath.fsum(Amp[a][b] * Xt[b] for b in range(n)) + Bu_u[a] for a in range(n)]
            loop.x = np.array([float(v) for v in X])
            tt = t + 1
            max_state = max(max_state, max(abs(float(v)) for v in X))
            if tt % stride and tt != horizon:
                continue
            samples += 1
            for s, m in unstable:
                J = A[s : s + m, s : s + m]
                st = SuccessiveDecoderState([-Xt[c] for c in range(s, s + m)])
                ps = [params[c] for c in range(s, s + m)]
                if m == 1:
                    decoded = {0: extract_bits(st.D[0], ps[0], tt)}
                else:
                    decoded = successive_decode(st, ps, J, tt)
                for local in range(m):
                    c = s + local
                    p = params[c]
                    got = decoded[local]
                    want = truth[c][: len(got)]
                    worst = -1
                    gaps = None
                    for k, (a, b) in enumerate(zip(got, want)):
                        if a != b:
                            dly = tt - p.arrival(k)
                            worst = max(worst, dly)
                            if gaps is None:
                                gaps = exact_gaps(p, tt)
                            if m == 1 and float(gaps[k]) / 2 > max_state:
                                beyond += 1
                    if worst >= 0:
                        per_delay[c][: min(worst, max_delay + 1) + 1] += 1
                    if tt == horizon:
                        final_wrong += sum(a != b for a, b in zip(got, want))
    rows = []
    for s, m in unstable:
        J = A[s : s + m, s : s + m]
        for local in range(m):
            c = s + local
            p = params[c]
            for d in range(max_delay + 1):
                bound = 0.0
                if local < m - 1:
                    bound = max(
                        propagation_bound(d, eps_prime, J, params[s + i], local, i) for i in range(local + 1, m)
                    )
                rows.append((c, d, float(per_delay[c][d] / samples), margin_allocation(m, local + 1, d, p), float(bound)))
    return RoundTripReport(rows, samples, max_state, beyond, final_wrong, coords)
