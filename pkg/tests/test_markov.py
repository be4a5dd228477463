import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from muxncs.markov import (ExploitParams, ModeDistribution, SwitchDistribution,
                           TransitionMatrix, convex_combination_check,
                           corner_case, mode_distribution, switch_distribution,
                           transition_matrix)

probs = st.floats(0.0, 1.0, allow_nan=False)
epsilons = st.floats(0.0, 1.0, allow_nan=False)


def exploit_params():
    # (p, q) uniform over the simplex p + q <= 1
    return st.tuples(probs, probs).map(
        lambda t: ExploitParams(p=t[0] * (1 - t[1]), q=t[1]))


# ------------------------------------------------------------- constructors

def test_switch_distribution_must_sum_to_one():
    with pytest.raises(ValueError, match="sum"):
        SwitchDistribution(0.5, 0.5, 0.5)


def test_switch_distribution_rejects_out_of_range():
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        SwitchDistribution(1.2, -0.2, 0.0)


def test_exploit_params_rejects_excess_mass():
    with pytest.raises(ValueError, match="<= 1"):
        ExploitParams(p=0.7, q=0.7)


def test_mode_distribution_validates():
    with pytest.raises(ValueError, match="5 mode"):
        ModeDistribution(np.ones(4) / 4)
    with pytest.raises(ValueError, match="sum"):
        ModeDistribution(np.array([0.5, 0.5, 0.5, 0, 0]))


def test_transition_matrix_requires_identical_rows():
    rows = np.tile([0.2, 0.2, 0.2, 0.2, 0.2], (5, 1))
    rows[3, 0], rows[3, 1] = 0.3, 0.1
    with pytest.raises(ValueError, match="identical"):
        TransitionMatrix(rows)


# -------------------------------------------------------------- frozen cases

def test_pure_exploration():
    d = switch_distribution(1.0, ExploitParams(p=0.3, q=0.3))
    assert (d.prob_plus, d.prob_zero, d.prob_minus) == (0.5, 0.0, 0.5)


def test_corner2_at_eps_02():
    d = switch_distribution(0.2, ExploitParams(p=1.0, q=0.0))
    assert np.allclose(d.as_array(), [0.9, 0.0, 0.1], atol=1e-15)


def test_pure_exploitation():
    d = switch_distribution(0.0, ExploitParams(p=0.3, q=0.4))
    assert np.allclose(d.as_array(), [0.3, 0.3, 0.4], atol=1e-15)


def test_corner3_values():
    d = corner_case(3, 0.2)
    assert np.allclose(d.as_array(), [0.1, 0.8, 0.1], atol=1e-15)


def test_corner1_degenerate():
    d = corner_case(1, 0.0)
    assert (d.prob_plus, d.prob_zero, d.prob_minus) == (0.0, 0.0, 1.0)


def test_corner_rejects_bad_index():
    with pytest.raises(ValueError, match="corner"):
        corner_case(4, 0.2)


def test_mode_distribution_worked_point():
    dist = mode_distribution(0.8, corner_case(1, 0.2))
    assert np.allclose(dist.probs, [0.08, 0.02, 0.72, 0.18, 0.0], atol=1e-15)


def test_mode_distribution_lossless():
    dist = mode_distribution(1.0, corner_case(2, 0.3))
    assert dist[1] == 0.0 and dist[3] == 0.0


def test_mode_distribution_symmetric():
    dist = mode_distribution(0.5, SwitchDistribution(0.5, 0.0, 0.5))
    assert np.allclose(dist.probs, [0.25, 0.25, 0.25, 0.25, 0.0], atol=1e-15)


def test_mode_distribution_rejects_delta_zero():
    with pytest.raises(ValueError, match="delta"):
        mode_distribution(0.0, corner_case(1, 0.2))


def test_transition_matrix_point_mass():
    tm = transition_matrix(ModeDistribution(np.array([1.0, 0, 0, 0, 0])))
    assert np.array_equal(tm.rows, np.tile([1.0, 0, 0, 0, 0], (5, 1)))


def test_transition_matrix_worked_row():
    tm = transition_matrix(mode_distribution(0.8, corner_case(2, 0.2)))
    assert np.allclose(tm.rows[0], [0.72, 0.18, 0.08, 0.02, 0.0], atol=1e-15)
    for i in range(1, 5):
        assert np.array_equal(tm.rows[0], tm.rows[i])


def test_convex_check_specific():
    assert convex_combination_check(0.3, ExploitParams(p=0.25, q=0.5)) < 1e-12


def test_convex_check_collapses_at_corner1():
    assert convex_combination_check(0.4, ExploitParams(p=0.0, q=1.0)) == 0.0


# -------------------------------------------------------------- properties

@settings(max_examples=200, deadline=None)
@given(epsilons, st.data())
def test_switch_distribution_normalized(epsilon, data):
    exploit = data.draw(exploit_params())
    d = switch_distribution(epsilon, exploit)
    assert abs(d.prob_plus + d.prob_zero + d.prob_minus - 1.0) <= 1e-12


@settings(max_examples=200, deadline=None)
@given(epsilons, st.floats(0.01, 1.0), st.data())
def test_mode_distribution_normalized_and_split_by_delta(epsilon, delta, data):
    exploit = data.draw(exploit_params())
    dist = mode_distribution(delta, switch_distribution(epsilon, exploit))
    assert abs(dist.probs.sum() - 1.0) <= 1e-12
    # delivered/dropped mass splits by delta independent of the switch choice
    for succ, fail in ((0, 1), (2, 3)):
        total = dist[succ] + dist[fail]
        if total > 1e-15:
            assert abs(dist[succ] / total - delta) <= 1e-9


@settings(max_examples=150, deadline=None)
@given(epsilons, st.data())
def test_mixture_identity(epsilon, data):
    exploit = data.draw(exploit_params())
    d = switch_distribution(epsilon, exploit).as_array()
    explore = np.array([0.5, 0.0, 0.5])
    exploit_vec = np.array([exploit.p, 1 - exploit.p - exploit.q, exploit.q])
    target = epsilon * explore + (1 - epsilon) * exploit_vec
    assert np.abs(d - target).max() <= 1e-15


@settings(max_examples=100, deadline=None)
@given(epsilons)
def test_corner2_is_p1_q0(epsilon):
    a = corner_case(2, epsilon)
    b = switch_distribution(epsilon, ExploitParams(p=1.0, q=0.0))
    assert a == b


@settings(max_examples=100, deadline=None)
@given(epsilons, st.data())
def test_convex_combination_identity(epsilon, data):
    exploit = data.draw(exploit_params())
    assert convex_combination_check(epsilon, exploit) < 1e-12
