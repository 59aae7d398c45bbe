"""Strict-priority FIFO retransmission code over the BEC with feedback.

Every stream feeds its own FIFO on the floor arrival schedule. Each channel
use carries the oldest bit of the highest-priority nonempty queue (or a
dummy bit when all queues are empty); a bit leaves its queue once the
encoder learns, through feedback delayed by ``theta`` steps, that it got
through. With ``theta > 1`` the encoder keeps resending its current head
until the acknowledgement arrives.

The receiver sees erasures, so it can rerun the encoder's bookkeeping from
the channel events alone; :class:`DecoderMirror` does exactly that and
uses it to attribute every received bit to its stream.

Delay convention: a bit that arrives at step ``a`` and first gets through
on channel use ``t`` has delay ``t - a + 1``; on-time service is delay 1.
"""

from __future__ import annotations

from array import array
from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.stats import binom

from .channels import BitPipe, ChannelEvent, ErasureChannel


class InsufficientTailError(ValueError):
    pass


class MirrorDivergence(AssertionError):
    pass


@dataclass(frozen=True)
class StreamSpec:
    id: int
    rate: float
    priority: int  # lower number = served first

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError("stream rate must be positive")


@dataclass(frozen=True)
class DelayRecord:
    stream: int
    index: int  # 1-based bit index j
    arrival: int
    delivery: int
    delay: int


def make_streams(rates, priorities=None) -> list[StreamSpec]:
    if priorities is None:
        priorities = list(range(len(rates)))
    if len(set(priorities)) != len(priorities):
        raise ValueError("stream priorities must be distinct")
    return [StreamSpec(i, float(r), int(p)) for i, (r, p) in enumerate(zip(rates, priorities))]


class _QueueBook:
    """Queue bookkeeping shared by the encoder and its mirror.

    Stream i's queue holds bits head[i] .. arrived[i] (1-based, inclusive);
    since service is FIFO the queue is always a contiguous index range.
    """

    def __init__(self, streams: list[StreamSpec], theta: int = 1, pipes=None, discipline: str = "priority"):
        if theta < 1:
            raise ValueError("feedback delay must be >= 1")
        if discipline not in ("priority", "fifo"):
            raise ValueError(f"unknown service discipline {discipline!r}")
        self.streams = streams
        self.order = sorted(range(len(streams)), key=lambda i: streams[i].priority)
        self.pipes = list(pipes) if pipes is not None else [BitPipe(s.rate) for s in streams]
        self.theta = theta
        self.discipline = discipline
        self.time = 0
        self.arrived = [0] * len(streams)
        self.head = [1] * len(streams)
        self._inflight: deque = deque()  # (t, stream, j, erased) awaiting feedback
        self._fifo: deque = deque()  # shared arrival-ordered queue (fifo discipline only)

    def queue_lengths(self) -> list[int]:
        return [a - h + 1 for a, h in zip(self.arrived, self.head)]

    def advance(self, t: int) -> list[int]:
        """Apply feedback due at t and the arrivals of step t; returns per-stream arrivals."""
        if t != self.time + 1:
            raise ValueError(f"steps must be consecutive: expected {self.time + 1}, got {t}")
        self.time = t
        while self._inflight and self._inflight[0][0] <= t - self.theta:
            _, i, j, erased = self._inflight.popleft()
            if i >= 0 and not erased and self.head[i] == j:
                self.head[i] = j + 1
                if self._fifo and self._fifo[0] == (i, j):
                    self._fifo.popleft()
        new = []
        for i, pipe in enumerate(self.pipes):
            c = pipe.cumulative(t)
            new.append(c - self.arrived[i])
            if self.discipline == "fifo":
                self._fifo.extend((i, j) for j in range(self.arrived[i] + 1, c + 1))
            self.arrived[i] = c
        return new

    def select(self) -> tuple[int, int]:
        """(stream, bit index) to send now, or (-1, 0) for a dummy."""
        if self.discipline == "fifo":
            return self._fifo[0] if self._fifo else (-1, 0)
        for i in self.order:
            if self.head[i] <= self.arrived[i]:
                return i, self.head[i]
        return -1, 0

    def sent(self, t: int, i: int, j: int, erased: bool) -> None:
        self._inflight.append((t, i, j, erased))


class PriorityEncoder:
    """Encoder holding the actual bit values."""

    def __init__(
        self,
        streams: list[StreamSpec],
        theta: int = 1,
        rng: np.random.Generator | None = None,
        pipes=None,
        discipline: str = "priority",
    ):
        self.book = _QueueBook(streams, theta, pipes, discipline)
        self.streams = streams
        self.bits: list[list[int]] = [[] for _ in streams]
        self._rng = rng if rng is not None else np.random.default_rng(0)
        self._pinned: list[list[int] | None] = [None] * len(streams)
        self.last_selection: tuple[int, int] = (-1, 0)

    @property
    def time(self) -> int:
        return self.book.time

    def pin_bits(self, stream: int, bits) -> None:
        """Use a fixed bit sequence for a stream instead of uniform draws."""
        self._pinned[stream] = [int(b) for b in bits]

    def push_bits(self, stream: int, bits) -> None:
        """Append bits supplied by an upstream source (e.g. a quantizer)."""
        pinned = self._pinned[stream]
        if pinned is None:
            self._pinned[stream] = pinned = list(self.bits[stream])
        pinned.extend(int(b) for b in bits)

    def queue_lengths(self) -> list[int]:
        return self.book.queue_lengths()


def enqueue_arrivals(enc: PriorityEncoder, t: int) -> list[int]:
    """Advance the encoder to step t and draw/append the newly arrived bits."""
    new = enc.book.advance(t)
    for i, k in enumerate(new):
        if k == 0:
            continue
        pinned = enc._pinned[i]
        have = len(enc.bits[i])
        if pinned is not None:
            if len(pinned) < have + k:
                raise ValueError(f"stream {i}: only {len(pinned)} bits supplied, need {have + k}")
            enc.bits[i].extend(pinned[have : have + k])
        else:
            enc.bits[i].extend(int(b) for b in enc._rng.integers(0, 2, size=k))
    return new


def select_and_transmit(enc: PriorityEncoder, erased: bool) -> ChannelEvent:
    """Send the head of the highest-priority nonempty queue through one channel use.

    ``erased`` is the channel's verdict for this use (drawn by the caller so
    that several schemes can share one erasure sequence). A dummy bit is 0.
    """
    t = enc.book.time
    i, j = enc.book.select()
    enc.last_selection = (i, j)
    bit = enc.bits[i][j - 1] if i >= 0 else 0
    enc.book.sent(t, i, j, erased)
    return ChannelEvent(t, bit, bool(erased))


def transmit_step(enc: PriorityEncoder, ch: ErasureChannel, rng: np.random.Generator, t: int) -> ChannelEvent:
    enqueue_arrivals(enc, t)
    return select_and_transmit(enc, bool(rng.random() < ch.beta))


class DecoderMirror:
    """Receiver-side replica of the encoder queues plus the delivered prefixes."""

    def __init__(
        self,
        streams: list[StreamSpec],
        theta: int = 1,
        track_queues: bool = False,
        pipes=None,
        discipline: str = "priority",
    ):
        self.book = _QueueBook(streams, theta, pipes, discipline)
        self.streams = streams
        self.values: list[list[int]] = [[] for _ in streams]
        self.delivery_times: list[array] = [array("q") for _ in streams]
        self.track_queues = track_queues
        self.queue_trace: list[array] = [array("q") for _ in streams]
        self.last_delivery: tuple[int, int] = (-1, 0)

    @property
    def time(self) -> int:
        return self.book.time

    def delivered(self, stream: int) -> int:
        return len(self.values[stream])

    def arrival_time(self, stream: int, j: int) -> int:
        return self.book.pipes[stream].arrival_step(j)

    def records(self, stream: int):
        pipe = self.book.pipes[stream]
        for j, t_del in enumerate(self.delivery_times[stream], start=1):
            a = pipe.arrival_step(j)
            yield DelayRecord(stream, j, a, t_del, t_del - a + 1)

    def delays(self, stream: int) -> np.ndarray:
        n = len(self.delivery_times[stream])
        if n == 0:
            return np.zeros(0, dtype=np.int64)
        pipe = self.book.pipes[stream]
        if isinstance(pipe, BitPipe):
            r = pipe.exact_rate
            j = np.arange(1, n + 1, dtype=np.int64)
            arrival = -((-j * r.denominator) // r.numerator)
        else:
            arrival = np.array([pipe.arrival_step(j) for j in range(1, n + 1)], dtype=np.int64)
        return np.frombuffer(self.delivery_times[stream], dtype=np.int64) - arrival + 1


def mirror_update(dec: DecoderMirror, event: ChannelEvent) -> tuple[int, int]:
    """Advance the mirror through one channel event; returns the (stream, j) it carried."""
    book = dec.book
    book.advance(event.t)
    i, j = book.select()
    book.sent(event.t, i, j, event.erased)
    dec.last_delivery = (-1, 0)
    if i >= 0 and not event.erased and j == len(dec.values[i]) + 1:
        dec.values[i].append(int(event.output))
        dec.delivery_times[i].append(event.t)
        dec.last_delivery = (i, j)
    if dec.track_queues:
        for k, q in enumerate(book.queue_lengths()):
            dec.queue_trace[k].append(q)
    return i, j


def check_mirror(enc: PriorityEncoder, dec: DecoderMirror) -> None:
    if enc.book.queue_lengths() != dec.book.queue_lengths() or enc.book.head != dec.book.head:
        raise MirrorDivergence(
            f"t={enc.time}: encoder queues {enc.book.queue_lengths()} != mirror {dec.book.queue_lengths()}"
        )


def anytime_estimate(dec: DecoderMirror, stream: int, t: int | None = None) -> np.ndarray:
    """Current estimate of bits 1..floor(R t); undelivered positions read as 0."""
    t = dec.time if t is None else t
    if t < 1:
        raise ValueError("t must be >= 1")
    n = dec.book.pipes[stream].cumulative(t)
    out = np.zeros(n, dtype=np.int8)
    k = min(n, len(dec.values[stream]))
    out[:k] = dec.values[stream][:k]
    return out


def run_code(
    rates,
    erasures: np.ndarray,
    priorities=None,
    theta: int = 1,
    rng: np.random.Generator | None = None,
    verify_mirror: bool = False,
    track_queues: bool = False,
    discipline: str = "priority",
) -> tuple[PriorityEncoder, DecoderMirror]:
    """Drive encoder and mirror over a whole erasure pattern (one entry per channel use)."""
    streams = make_streams(rates, priorities)
    enc = PriorityEncoder(streams, theta, rng, discipline=discipline)
    dec = DecoderMirror(streams, theta, track_queues, discipline=discipline)
    for t, er in enumerate(erasures, start=1):
        enqueue_arrivals(enc, t)
        ev = select_and_transmit(enc, bool(er))
        mirror_update(dec, ev)
        if verify_mirror:
            check_mirror(enc, dec)
    return enc, dec


def fifo_delays(rates, erasures: np.ndarray, priorities=None) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Counter-only strict-priority queue with unit-delay feedback.

    Same service rule as :func:`run_code` without bit values or event
    objects, for long Monte Carlo runs. Returns per-stream delay arrays and
    per-stream queue-length traces (sampled after each channel use).
    """
    streams = make_streams(rates, priorities)
    order = sorted(range(len(streams)), key=lambda i: streams[i].priority)
    fr = [BitPipe(s.rate).exact_rate for s in streams]
    nums = [f.numerator for f in fr]
    dens = [f.denominator for f in fr]
    k = len(streams)
    T = len(erasures)
    delivery = [array("q") for _ in range(k)]
    qtrace = [np.zeros(T, dtype=np.int64) for _ in range(k)]
    arrived = [0] * k
    head = [1] * k
    er = erasures.tolist()
    for t in range(1, T + 1):
        for i in range(k):
            arrived[i] = (nums[i] * t) // dens[i]
        if not er[t - 1]:
            for i in order:
                if head[i] <= arrived[i]:
                    delivery[i].append(t)
                    head[i] += 1
                    break
        for i in range(k):
            qtrace[i][t - 1] = arrived[i] - head[i] + 1
    delays = []
    for i in range(k):
        n = len(delivery[i])
        j = np.arange(1, n + 1, dtype=np.int64)
        arrival = -((-j * dens[i]) // nums[i])
        delays.append(np.frombuffer(delivery[i], dtype=np.int64) - arrival + 1 if n else np.zeros(0, np.int64))
    return delays, qtrace


def delay_tail(delays) -> dict[int, float]:
    """Empirical P(D >= d) for d = 1 .. max delay."""
    d = np.asarray(delays, dtype=np.int64)
    if d.size == 0:
        raise ValueError("need at least one delay record")
    counts = np.bincount(d)
    ge = np.cumsum(counts[::-1])[::-1] / d.size
    return {int(k): float(ge[k]) for k in range(1, len(ge))}


def conditional_delay_tail(delays, rate: float, beta: float, ds) -> dict[int, float]:
    """P(D >= d) for the top-priority stream, averaged over the queue position each bit met.

    A top-priority bit that finds itself k-th in its queue on arrival is
    delivered once k of the following channel uses get through, so
    P(D >= d | k) = P(Binomial(d - 1, 1 - beta) < k) exactly. Averaging that
    conditional probability over the simulated k gives an unbiased estimate
    that reaches tails far below 1 / (number of bits). Only valid for a
    stream that no other stream can preempt, with unit-delay feedback.
    """
    d = np.asarray(delays, dtype=np.int64)
    if d.size == 0:
        raise ValueError("need at least one delay record")
    r = BitPipe(rate).exact_rate
    j = np.arange(1, d.size + 1, dtype=np.int64)
    arrival = -((-j * r.denominator) // r.numerator)
    delivered = d + arrival - 1
    # bits of the stream still queued when bit j arrives, j included
    k = j - np.searchsorted(delivered, arrival, side="left")
    return {int(x): float(np.mean(binom.cdf(k - 1, int(x) - 1, 1.0 - beta))) for x in ds}


def queue_tail(queue_lengths) -> dict[int, float]:
    """Empirical P(Q >= q) for q = 0 .. max queue length."""
    q = np.asarray(queue_lengths, dtype=np.int64)
    counts = np.bincount(q)
    ge = np.cumsum(counts[::-1])[::-1] / q.size
    return {int(k): float(ge[k]) for k in range(len(ge))}


def delay_queue_crosscheck(delays, queue_lengths, rate: float, ds) -> list[tuple[int, float, float]]:
    """(d, P(D >= d), P(Q >= R d)) rows for comparing delay and queue tails."""
    dt = delay_tail(delays)
    qt = queue_tail(queue_lengths)
    rows = []
    for d in ds:
        q = int(np.ceil(rate * d))
        rows.append((int(d), dt.get(int(d), 0.0), qt.get(q, 0.0)))
    return rows


def fit_exponent(tail: dict[int, float], d_min: int, d_max: int) -> float:
    """Negated least-squares slope of log2 P(D >= d) against d on [d_min, d_max]."""
    pts = [(d, p) for d, p in tail.items() if d_min <= d <= d_max and p > 0]
    if len(pts) < 5:
        raise InsufficientTailError(
            f"only {len(pts)} tail points with positive mass in [{d_min}, {d_max}]: "
            "increase trials or lower d_max"
        )
    d, p = np.array(pts, dtype=float).T
    slope = np.polyfit(d, np.log2(p), 1)[0]
    return float(-slope)


def tail_window(tail: dict[int, float], n: int, min_count: int = 1000, d_min: int = 5) -> tuple[int, int]:
    """Fit window [d_min, d_max] where d_max is the last delay still backed by min_count records."""
    supported = [d for d, p in tail.items() if p * n >= min_count]
    if not supported or max(supported) < d_min + 4:
        raise InsufficientTailError("too few delay records for a tail fit: increase trials or lower d_max")
    return d_min, max(supported)
