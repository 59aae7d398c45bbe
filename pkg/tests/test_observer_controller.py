import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anytime_lab.bounds import RateError
from anytime_lab.observer_controller import (
    BatchPlanner,
    ClosedLoop,
    ControllerShadow,
    LoopConfig,
    RecoveryMap,
    VirtualProcess,
    bits_to_label,
    box_profile,
    cell_center,
    cell_label,
    controller_apply,
    counter_controls,
    dance_decode,
    dance_encode,
    dance_plan,
    delta_min,
    jordan_plan,
    label_budgets,
    label_to_bits,
    virtual_step,
)
from anytime_lab.state_space import StateSpaceModel, StructureError

A_EX = 2**0.34
B_EX = 2**0.05


def siso_example(gamma=0.0, omega=1.0):
    At = np.array([[A_EX, B_EX - A_EX], [0.0, B_EX]])
    return StateSpaceModel(At, [[0.0], [1.0]], np.eye(2), [[1.0, 1.0]], omega, gamma)


def test_delta_min_formula_and_rejection():
    assert delta_min(2.0, 2.0, 1.0) == pytest.approx(2.0)
    assert delta_min(3.0, 2.0, 1.0) == pytest.approx(1.0 / (1 - 2 / 8))
    with pytest.raises(RateError):
        delta_min(1.0, 2.0, 1.0)


@pytest.mark.parametrize("rate,lam", [(2, 2.0), (3, 2.0), (2, 3.0), (1, 1.5)])
def test_constant_budget_profile_is_half_delta_min(rate, lam):
    prof = box_profile(lam, 1.0, label_budgets(rate))
    assert prof.size == 1
    assert prof[0] == pytest.approx(delta_min(rate, lam, 1.0) / 2)


def test_fractional_rate_schedule():
    b = label_budgets(0.341)
    assert b.size == 1000 and b.sum() == 341
    assert label_budgets(0.5, period=2).tolist() == [1]
    with pytest.raises(RateError):
        box_profile(2.0, 1.0, label_budgets(0.9))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 8), st.floats(0.1, 100), st.floats(-1, 1))
def test_cells_cover_interval(bits, W, frac):
    y = frac * W
    lab = cell_label(y, W, bits)
    assert 0 <= lab < 2**bits
    assert abs(y - cell_center(lab, W, bits)) <= W / 2**bits * (1 + 1e-12)
    assert bits_to_label(label_to_bits(lab, bits)) == lab


@settings(max_examples=40, deadline=None)
@given(
    st.floats(1.05, 4.0),
    st.sampled_from([0.5, 1, 1.1, 1.5, 2, 2.5, 3]),
    st.integers(0, 2**31),
    st.sampled_from(["extremal", "uniform"]),
)
def test_virtual_process_never_leaves_box(lam, rate, seed, kind):
    if rate <= math.log2(lam) + 0.02:
        return
    vp = VirtualProcess.create(lam, rate, 1.0)
    rng = np.random.default_rng(seed)
    for _ in range(2000):
        w = rng.choice([-0.5, 0.5]) if kind == "extremal" else rng.uniform(-0.5, 0.5)
        virtual_step(vp, w)
        assert abs(vp.xbar) <= vp.bound * (1 + 1e-9)


@settings(max_examples=30, deadline=None)
@given(st.floats(1.05, 3.0), st.floats(0.0, 0.5), st.integers(0, 2**31))
def test_virtual_process_tolerates_estimate_error(lam, gamma, seed):
    rate = 2
    if rate <= math.log2(lam) + 0.05:
        return
    vp = VirtualProcess.create(lam, rate, 1.0, gamma=gamma)
    rng = np.random.default_rng(seed)
    for _ in range(1000):
        est = vp.xbar + rng.uniform(-gamma, gamma)
        virtual_step(vp, rng.choice([-0.5, 0.5]), est)
        assert abs(vp.xbar) <= vp.bound * (1 + 1e-9)


def test_jordan_plan_example_values():
    plan = jordan_plan([[2.0, 1.0], [0.0, 2.0]], 2, 1.0)
    assert plan.deltas.tolist() == [6.0, 2.0]
    assert plan.omegas.tolist() == [3.0, 1.0]
    with pytest.raises(ValueError):
        jordan_plan([[2.0, 0.0], [1.0, 2.0]], 2, 1.0)


def test_late_labels_replay_to_on_time_state():
    M = np.array([[1.7, 0.4], [0.0, 1.7]])
    shadow = ControllerShadow(M)
    labels = [(0, 0, 0.3), (1, 1, -0.2), (2, 0, 0.1)]
    # learned at steps 3, 3 and 5
    controller_apply(shadow, labels[:2], 3)
    controller_apply(shadow, labels[2:], 5)
    K = 8
    on_time = sum(np.linalg.matrix_power(M, K - 1 - k0)[:, i] * ub for k0, i, ub in labels)
    assert np.allclose(shadow.xtilde(K), on_time)
    with pytest.raises(ValueError):
        controller_apply(shadow, [(9, 0, 1.0)], 4)


def test_batch_planner_hits_target():
    m = siso_example()
    planner = BatchPlanner(m.A, m.B_u, 2)
    target = np.array([0.7, -1.3])
    u = planner.plan(target)
    x = np.zeros(2)
    for k in range(2):
        x = m.A @ x + m.B_u @ u[k]
    assert np.allclose(x, target)
    with pytest.raises(StructureError):
        BatchPlanner(np.eye(2), [[1.0], [0.0]], 2)


def test_recovery_error_bound_matches_closed_form():
    gamma, omega = 0.2, 1.0
    m = siso_example(gamma, omega)
    rm = RecoveryMap(m, 2)
    den = 2 * (2**1.34 - 2**1.05)
    expect1 = ((2**1.05 - 2**0.34 + 1) * gamma + 2 * omega) / den
    expect2 = ((2**0.34 + 1) * gamma + 2 * omega) / den
    assert rm.bound == pytest.approx([expect1, expect2], rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_recovery_error_within_bound(seed):
    m = siso_example(0.2)
    rm = RecoveryMap(m, 2)
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=2) * 10
    u0 = rng.normal(size=1)
    w0 = rng.choice([-0.5, 0.5], size=2)
    n = rng.choice([-0.1, 0.1], size=2)
    x1 = m.A @ x0 + m.B_u @ u0 + w0
    y = np.concatenate([m.C_y @ x0 + n[0], m.C_y @ x1 + n[1]])
    err = np.abs(rm.estimate(y, u0) - x0)
    assert np.all(err <= rm.bound * (1 + 1e-9) + 1e-12)


def test_dance_symbols_round_trip_and_cancel():
    m = siso_example(0.2)
    plan = dance_plan(m, 3)
    assert plan.theta == 0
    assert plan.amplitude * plan.psibar > 2 * plan.gamma2
    for z in (1, 2, 3):
        shift = plan.psi[plan.output_index] * plan.amplitude * z
        assert dance_decode(plan, shift + 0.99 * plan.gamma2 * np.sign(plan.psi[plan.output_index])) == z
    # the offset and its counter-controls leave no state behind
    cancel = counter_controls(plan, m, 2)
    x = m.B_u @ dance_encode(plan, 1, m.m_u)
    for q in range(2):
        x = m.A @ x + m.B_u @ cancel[q]
    assert np.allclose(x, 0)


def test_closed_loop_rejects_slow_rates():
    m = StateSpaceModel.full_actuation([[2.0]])
    with pytest.raises(RateError, match="log2"):
        ClosedLoop(m, LoopConfig((0.9,), transport="pipe"))


def test_scalar_pipe_loop_is_bounded():
    m = StateSpaceModel.full_actuation([[2.0]])
    loop = ClosedLoop(m, LoopConfig((2,), transport="pipe"))
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(5000):
        x = loop.step(rng.choice([-0.5, 0.5], size=1), np.zeros(1))
        worst = max(worst, abs(x[0]))
    assert loop.box_violations == 0 and not loop.diverged
    assert worst <= 2 * delta_min(2, 2.0, 1.0)


def test_closed_loop_over_erasure_channel_stays_in_box():
    m = StateSpaceModel.full_actuation(np.diag([A_EX, B_EX]))
    loop = ClosedLoop(m, LoopConfig((0.341, 0.051), (0, 1)))
    rng = np.random.default_rng(1)
    er = rng.random(5000) < 0.4
    for t in range(5000):
        loop.step(rng.uniform(-0.5, 0.5, 2), np.zeros(2), er[t])
    assert loop.box_violations == 0 and not loop.diverged


def test_loop_config_validation():
    with pytest.raises(ValueError):
        LoopConfig((1.0,), transport="wire")
    with pytest.raises(ValueError):
        LoopConfig((1.0,), transport="pipe", feedback="dance")
