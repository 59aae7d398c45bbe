import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anytime_lab import bounds
from anytime_lab.bounds import RateError

from oracles import bec_anytime_capacity as oracle_capacity
from oracles import binary_divergence

betas = st.floats(0.01, 0.9)


def test_reference_values():
    assert bounds.bec_anytime_capacity(1.02, 0.4) == pytest.approx(0.3795, abs=1e-3)
    assert bounds.bec_anytime_capacity_inverse(0.341, 0.4) == pytest.approx(1.11, abs=1e-2)
    assert bounds.low_priority_exponent(0.341, 0.051, 0.4) == pytest.approx(0.196, abs=2e-3)
    assert bounds.rho_hl(0.392, 0.4) == pytest.approx(2.51, abs=0.01)


@settings(max_examples=200, deadline=None)
@given(betas, st.floats(0.01, 0.99))
def test_capacity_matches_closed_form(beta, frac):
    alpha = frac * bounds.max_reliability(beta)
    assert bounds.bec_anytime_capacity(alpha, beta) == pytest.approx(oracle_capacity(alpha, beta), rel=1e-9)


@settings(max_examples=200, deadline=None)
@given(betas, st.floats(0.02, 0.98))
def test_capacity_inverse_round_trip(beta, frac):
    # the gap to -log2(beta) is about 2^-(alpha (1-R)/R); keep it above double resolution
    top = bounds.max_reliability(beta)
    floor = top / (40.0 + top)
    rate = floor + frac * (1 - beta - floor)
    alpha = bounds.bec_anytime_capacity_inverse(rate, beta)
    assert bounds.bec_anytime_capacity(alpha, beta) == pytest.approx(rate, abs=1e-7)


def test_capacity_inverse_saturates_at_tiny_rates():
    beta = 0.0625
    alpha = bounds.bec_anytime_capacity_inverse(0.01, beta)
    assert alpha <= bounds.max_reliability(beta)
    assert alpha == pytest.approx(bounds.max_reliability(beta), rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(betas, st.floats(0.01, 0.9), st.floats(0.01, 0.9))
def test_capacity_decreasing_in_alpha(beta, f1, f2):
    top = bounds.max_reliability(beta)
    a1, a2 = sorted((f1 * top, f2 * top))
    if a2 - a1 > 1e-9:
        assert bounds.bec_anytime_capacity(a1, beta) >= bounds.bec_anytime_capacity(a2, beta)


@settings(max_examples=100, deadline=None)
@given(betas, st.floats(0.05, 0.95))
def test_parametric_point_and_rho_hl_agree(beta, frac):
    rate = frac * (1 - beta)
    rho = bounds.rho_hl(rate, beta)
    r, a = bounds.parametric_point(rho, beta)
    assert r == pytest.approx(rate, abs=1e-7)
    assert a == pytest.approx(rho * rate, abs=1e-6)


def test_e0_limits():
    assert bounds.gallager_e0(0.0, 0.4) == 0.0
    assert bounds.gallager_e0(60.0, 0.4) == pytest.approx(-math.log2(0.4), abs=1e-6)
    assert bounds.gallager_e0_prime(0.0, 0.4) == pytest.approx(0.6)


@settings(max_examples=100, deadline=None)
@given(betas, st.floats(0.0, 1.0))
def test_sphere_packing_is_binary_divergence(beta, frac):
    rate = 0.001 + frac * (1 - beta - 0.002)
    assert bounds.sphere_packing(rate, beta) == pytest.approx(binary_divergence(1 - rate, beta), rel=1e-9, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.1, 0.6), st.floats(0.05, 0.6), st.floats(0.0, 0.9))
def test_low_priority_closed_form_matches_grid(beta, fh, fl):
    rh = fh * (1 - beta)
    rl = fl * (1 - beta - rh)
    exact = bounds.low_priority_exponent(rh, rl, beta)
    grid = bounds.low_priority_exponent_grid(rh, rl, beta, points=4001)
    assert exact >= grid - 1e-9
    assert exact == pytest.approx(grid, abs=1e-3)


def test_low_priority_saturates_at_sphere_packing():
    # below the rho cap the optimum is the stationary point, whose value is D(1 - R_H || beta)
    v = bounds.low_priority_exponent(0.341, 0.051, 0.4)
    assert v == pytest.approx(bounds.sphere_packing(0.341, 0.4), abs=1e-9)


def test_errors():
    with pytest.raises(RateError):
        bounds.bec_anytime_capacity(2.0, 0.4)
    with pytest.raises(RateError):
        bounds.bec_anytime_capacity_inverse(0.7, 0.4)
    with pytest.raises(ValueError):
        bounds.gallager_e0(1.0, 1.2)
    with pytest.raises(RateError):
        bounds.low_priority_exponent(0.341, 0.3, 0.4)


def test_beta_zero_degenerates():
    assert bounds.bec_anytime_capacity(5.0, 0.0) == 1.0
    assert math.isinf(bounds.max_reliability(0.0))
    assert all(r == 1.0 for r, _ in bounds.anytime_capacity_curve(0.0, points=5))


def test_region_bounds_on_example():
    cap = bounds.capacity_function(0.4)
    demand = bounds.stabilizability_demand(np.diag([2**0.34, 2**0.05]), eta=3)
    q = demand.query()
    assert not bounds.inner_bound_contains(q, cap)
    assert bounds.outer_bound_contains(q, cap)
    assert not demand.sum_test_holds(cap)
    # with eta = 1 a single shared stream is enough
    easy = bounds.stabilizability_demand(np.diag([2**0.34, 2**0.05]), eta=1)
    assert easy.sum_test_holds(cap)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0.0, 0.3), st.floats(0.05, 1.2)), min_size=1, max_size=4), betas)
def test_inner_region_inside_outer_region(pairs, beta):
    cap = bounds.capacity_function(beta)
    q = bounds.RateRegionQuery.of(pairs)
    if bounds.inner_bound_contains(q, cap):
        assert bounds.outer_bound_contains(q, cap)


def test_rho_sweep_peaks_at_low_priority_value():
    sweep = bounds.rho_sweep(0.341, 0.4, points=4000)
    peak = max(v for _, _, v in sweep)
    assert peak == pytest.approx(0.1967, abs=1e-3)
