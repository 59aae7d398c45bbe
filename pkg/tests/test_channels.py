import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anytime_lab.channels import (
    BatchedPipe,
    BitPipe,
    ChannelEvent,
    ErasureChannel,
    FeedbackLink,
    budget_schedule,
    feedback_view,
    pipe_budget,
    transmit,
    trial_rng,
)

rates = st.sampled_from([0.05, 0.051, 0.341, 0.392, 0.5146, 1.0, 1.1, 2.0, 2.5])


@settings(max_examples=100, deadline=None)
@given(rates, st.integers(1, 5000))
def test_pipe_schedule_is_floor_rt(rate, t):
    p = BitPipe(rate)
    assert budget_schedule(rate, t).sum() == p.cumulative(t) == math.floor(round(rate * 10**6) * t / 10**6)
    assert pipe_budget(p, t) == p.cumulative(t) - p.cumulative(t - 1)


@settings(max_examples=100, deadline=None)
@given(rates, st.integers(1, 3000))
def test_arrival_step_inverts_cumulative(rate, j):
    p = BitPipe(rate)
    a = p.arrival_step(j)
    assert p.cumulative(a) >= j > p.cumulative(a - 1)


@settings(max_examples=50, deadline=None)
@given(rates, st.integers(1, 4), st.integers(1, 2000))
def test_batched_pipe(rate, period, t):
    b = BatchedPipe(rate, period)
    base = BitPipe(rate)
    assert b.cumulative(t) == base.cumulative(period * (t // period))
    if period == 1:
        assert b.cumulative(t) == base.cumulative(t)
    j = max(1, b.cumulative(t))
    a = b.arrival_step(j)
    assert a % period == 0 and b.cumulative(a) >= j > b.cumulative(a - 1)


def test_erasure_frequency_and_determinism():
    ch = ErasureChannel(0.4)
    e1 = ch.erasures(trial_rng(3, 7), 200_000)
    e2 = ch.erasures(trial_rng(3, 7), 200_000)
    assert np.array_equal(e1, e2)
    assert abs(e1.mean() - 0.4) < 0.005
    assert not np.array_equal(e1, ch.erasures(trial_rng(3, 8), 200_000))
    assert not ErasureChannel(0.0).erasures(trial_rng(1), 1000).any()


def test_transmit_and_feedback_view():
    ev = transmit(ErasureChannel(0.0), 1, trial_rng(0), t=4)
    assert ev.output == 1 and not ev.erased
    assert ChannelEvent(2, 1, True).output is None
    hist = [ChannelEvent(t, 0, False) for t in range(1, 6)]
    assert [e.t for e in feedback_view(hist, 5, FeedbackLink(2))] == [1, 2, 3]
    with pytest.raises(ValueError):
        FeedbackLink(0)
    with pytest.raises(ValueError):
        ErasureChannel(1.0)
