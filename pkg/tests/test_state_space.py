import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anytime_lab.state_space import (
    StateSpaceModel,
    StructureError,
    intrinsic_delay,
    is_observable,
    is_reachable,
    observe,
    real_jordan,
    rotating_frame,
    step,
    unstable_spectrum,
)

from oracles import intrinsic_delay as oracle_delay
from oracles import observable as oracle_observable
from oracles import reachable as oracle_reachable


def random_system(rng, n=None):
    n = n or int(rng.integers(1, 5))
    mu, my = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    # sparse small integers: rank-deficient cases show up often
    def mat(r, c):
        M = rng.integers(-2, 3, size=(r, c)).astype(float)
        M[rng.random((r, c)) < 0.5] = 0.0
        return M

    return mat(n, n), mat(n, mu), mat(my, n)


def test_structural_tests_match_exact_oracles():
    rng = np.random.default_rng(10)
    for _ in range(300):
        A, B, C = random_system(rng)
        assert is_reachable(A, B) == oracle_reachable(A, B)
        assert is_observable(A, C) == oracle_observable(A, C)
        expect = oracle_delay(A, B, C)
        m = StateSpaceModel(A, B, np.eye(A.shape[0]), C)
        if expect is None:
            with pytest.raises(StructureError):
                intrinsic_delay(m)
        else:
            assert intrinsic_delay(m) == expect


def test_model_rejects_bad_shapes_and_negative_widths():
    with pytest.raises(ValueError):
        StateSpaceModel(np.eye(2), np.ones((3, 1)), np.eye(2), np.eye(2))
    with pytest.raises(ValueError):
        StateSpaceModel(np.eye(2), np.eye(2), np.eye(2), np.eye(2), omega=-1.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=4, max_size=4))
def test_model_round_trips_through_json(vals):
    m = StateSpaceModel.full_actuation(np.array(vals).reshape(2, 2), omega=0.5, gamma=0.1)
    back = StateSpaceModel.from_json(m.to_json())
    assert np.array_equal(back.A, m.A) and back.omega == m.omega and back.gamma == m.gamma


def test_step_and_observe():
    m = StateSpaceModel([[2.0]], [[1.0]], [[1.0]], [[1.0]], omega=1.0, gamma=0.2)
    assert step(m, [1.0], [-1.5], [0.25])[0] == pytest.approx(0.75)
    assert observe(m, [3.0], [0.1])[0] == pytest.approx(3.1)
    with pytest.raises(ValueError):
        observe(m, [3.0], [0.2])


def test_example_siso_system_structure():
    a, b = 2**0.34, 2**0.05
    At = np.array([[a, b - a], [0, b]])
    m = StateSpaceModel(At, [[0.0], [1.0]], np.eye(2), [[1.0, 1.0]])
    assert is_observable(m.A, m.C_y) and is_reachable(m.A, m.B_u)
    assert intrinsic_delay(m) == 0


@pytest.mark.parametrize(
    "A",
    [
        [[2.0, 1.0], [0.0, 2.0]],
        [[1.26575659, 0.23049167], [0.0, 1.03526492]],
        [[0.0, -2.0], [2.0, 0.0]],
        [[-3.0, 0.0], [0.0, 0.5]],
        [[2.0, 1.0, 0.0], [0.0, 2.0, 1.0], [0.0, 0.0, 2.0]],
    ],
)
def test_real_jordan_reconstructs(A):
    jf = real_jordan(A)
    assert jf.residual(A) < 1e-8
    # Lambda is upper triangular inside each block
    for b in jf.blocks:
        s = slice(b.start, b.start + b.size)
        if b.angle is None:
            assert np.allclose(np.tril(jf.Lambda[s, s], -1), 0)
            assert np.allclose(np.diag(jf.Lambda[s, s]), b.magnitude)


def test_jordan_of_defective_block_keeps_chain():
    jf = real_jordan([[2.0, 1.0], [0.0, 2.0]])
    assert len(jf.blocks) == 1 and jf.blocks[0].size == 2
    assert abs(jf.Lambda[0, 1]) > 1e-6


def test_rotating_frame_undoes_rotation():
    A = np.array([[0.0, -2.0], [2.0, 0.0]])
    jf = real_jordan(A)
    x = np.array([1.0, 0.5])
    # R^-k V A^k x = Lambda^k V x
    for k in range(1, 6):
        lhs = rotating_frame(k, jf, np.linalg.matrix_power(A, k) @ x)
        rhs = np.linalg.matrix_power(jf.Lambda, k) @ (jf.V @ x)
        assert np.allclose(lhs, rhs)


def test_unstable_spectrum_of_example():
    sp = unstable_spectrum(np.diag([2**0.34, 2**0.05, 0.5]))
    assert sp.log_magnitudes == pytest.approx([0.34, 0.05])
