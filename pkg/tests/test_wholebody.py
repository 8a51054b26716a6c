import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from flexwalk.gait_mpc import SupportPhase
from flexwalk.wholebody import (DistributionInfeasibleError, InfeasibleSwingError, TaskReference, Wrench,
                                distribute_wrench, interface_references, newton_euler_matrix, swing_spline,
                                task_feedback, waist_yaw_reference)

G = 9.81
M = 95.0


def test_degenerate_swing_is_constant():
    tr = swing_spline([0.1, 0.2], [0.1, 0.2], 1.0, 2.2)
    for t in np.linspace(1.0, 2.2, 13):
        p, v, a = tr.evaluate(t)
        np.testing.assert_allclose(p[:2], [0.1, 0.2])
        np.testing.assert_allclose(v[:2], 0.0, atol=1e-15)
        np.testing.assert_allclose(a[:2], 0.0, atol=1e-15)


def test_swing_boundaries():
    tr = swing_spline([0.0, -0.085], [0.35, -0.085], 0.6, 1.8, apex_height=0.05)
    p0, v0, a0 = tr.evaluate(0.6)
    p1, v1, a1 = tr.evaluate(1.8)
    np.testing.assert_allclose(p0, [0.0, -0.085, 0.0], atol=1e-15)
    np.testing.assert_allclose(p1, [0.35, -0.085, 0.0], atol=1e-12)
    for vec in (v0, v1, a0, a1):
        np.testing.assert_allclose(vec, 0.0, atol=1e-12)
    assert tr.evaluate(1.2)[0][2] == pytest.approx(0.05)


def test_swing_peak_speed():
    tr = swing_spline([0.0, 0.0], [0.35, 0.0], 0.0, 1.2)
    assert tr.peak_horizontal_speed() == pytest.approx(0.35 * 15 / 8 / 1.2, rel=1e-6)
    assert tr.peak_horizontal_speed() == pytest.approx(0.547, abs=1e-3)
    with pytest.raises(InfeasibleSwingError):
        swing_spline([0.0, 0.0], [0.35, 0.0], 0.0, 1.2, max_swing_speed=0.5)
    with pytest.raises(ValueError):
        swing_spline([0.0, 0.0], [0.35, 0.0], 1.0, 1.0)


def test_swing_is_c2():
    tr = swing_spline([0.0, 0.1], [0.3, 0.12], 0.0, 1.2)
    h = 1e-6
    for t in (0.3, 0.6, 0.9):  # 0.6 joins the two vertical quintics
        a_lo = tr.evaluate(t - h)[2]
        a_hi = tr.evaluate(t + h)[2]
        np.testing.assert_allclose(a_lo, a_hi, atol=1e-4)
        p_lo, p_hi = tr.evaluate(t - h)[0], tr.evaluate(t + h)[0]
        np.testing.assert_allclose((p_hi - p_lo) / (2 * h), tr.evaluate(t)[1], atol=1e-6)


def test_retarget_continues_smoothly():
    tr = swing_spline([0.0, 0.0], [0.3, 0.0], 0.0, 1.2)
    re = tr.retarget(0.5, [0.32, 0.01])
    for k in range(3):
        np.testing.assert_allclose(re.evaluate(0.5)[k], tr.evaluate(0.5)[k], atol=1e-12)
    np.testing.assert_allclose(re.evaluate(1.2)[0][:2], [0.32, 0.01], atol=1e-12)
    with pytest.raises(InfeasibleSwingError):
        tr.retarget(1.2, [0.3, 0.0])
    with pytest.raises(InfeasibleSwingError):
        tr.retarget(1.1, [0.6, 0.0], max_speed=1.5)


def test_task_feedback_examples():
    ref = TaskReference([1.0, 2.0], [0.1, 0.0], [0.5, -0.5], kp=-10.0, kd=-3.0)
    np.testing.assert_allclose(task_feedback([1.0, 2.0], [0.1, 0.0], ref), [0.5, -0.5])
    ref = TaskReference([0.0], [0.0], [0.0], kp=-1.0)
    np.testing.assert_allclose(task_feedback([0.2], [0.0], ref), [-0.2])
    with pytest.raises(ValueError):
        TaskReference([0.0], [0.0], [0.0], kp=np.inf)


vals = st.floats(-5, 5)


@given(st.lists(vals, min_size=9, max_size=9), st.floats(-50, 0), st.floats(-20, 0))
def test_task_feedback_formula_and_superposition(v, kp, kd):
    g1, gd1, a1, g2, gd2, a2, val, rate, _ = v
    ref1 = TaskReference([val], [rate], [a1], kp, kd)
    expected = kp * (g1 - val) + kd * (gd1 - rate) + a1
    assert task_feedback([g1], [gd1], ref1)[0] == pytest.approx(expected, abs=1e-12)
    # affine: the increment is linear in (gamma, gamma_dot, accel)
    zero = TaskReference([val], [rate], [0.0], kp, kd)
    base = task_feedback([val], [rate], zero)[0]

    def f(g, gd, a):
        return task_feedback([val + g], [rate + gd], TaskReference([val], [rate], [a], kp, kd))[0] - base

    assert f(g1 + g2, gd1 + gd2, a1 + a2) == pytest.approx(f(g1, gd1, a1) + f(g2, gd2, a2), abs=1e-12)


def test_waist_yaw_examples():
    assert waist_yaw_reference(0.0, 0.0) == 0.0
    assert waist_yaw_reference(math.pi / 2, 0.0) == pytest.approx(math.pi / 4)
    assert waist_yaw_reference(0.0, math.pi / 2) == pytest.approx(math.pi / 4)
    assert waist_yaw_reference(-math.pi + 0.1, math.pi - 0.1) == pytest.approx(math.pi)
    # opposite feet: bisector counter-clockwise from the right foot
    assert waist_yaw_reference(math.pi, 0.0) == pytest.approx(math.pi / 2)
    assert waist_yaw_reference(0.0, math.pi) == pytest.approx(-math.pi / 2)


@given(st.floats(-math.pi, math.pi), st.floats(-3.0, 3.0))
def test_waist_yaw_is_unit_vector_mean(a, gap):
    b = a + gap
    got = waist_yaw_reference(a, b)
    mean = math.atan2(math.sin(a) + math.sin(b), math.cos(a) + math.cos(b))
    assert math.cos(got - mean) == pytest.approx(1.0, abs=1e-9)
    assert -math.pi < got <= math.pi


def _double(a, b):
    return SupportPhase("double", (np.asarray(a, float), np.asarray(b, float)), 0.2)


def _check_newton_euler(ws, c, acc, L_dot=np.zeros(3)):
    A = newton_euler_matrix([w.point for w in ws], c)
    phi = np.concatenate([w.as_array() for w in ws])
    total = np.concatenate([M * (np.asarray(acc) + [0, 0, G]), L_dot])
    return np.abs(A @ phi - total).max()


def test_single_support_unique():
    c, acc = np.array([0.02, 0.08, 0.87]), np.array([0.3, -0.2, 0.0])
    ws = distribute_wrench(c, acc, np.zeros(3), SupportPhase("single", (np.array([0.0, 0.085]),), 1.2), M)
    assert len(ws) == 1
    np.testing.assert_allclose(ws[0].force, M * np.array([0.3, -0.2, G]))
    assert _check_newton_euler(ws, c, acc) < 1e-9


def test_symmetric_double_support_split():
    ws = distribute_wrench([0.0, 0.0, 0.87], np.zeros(3), np.zeros(3), _double([0, 0.1], [0, -0.1]), M)
    assert ws[0].force[2] == pytest.approx(M * G / 2)
    assert ws[1].force[2] == pytest.approx(M * G / 2)


def test_asymmetric_matches_pseudo_inverse():
    c = np.array([0.05, 0.03, 0.87])
    acc = np.array([0.2, 0.1, 0.0])
    feet = [np.array([0.0, 0.1, 0.0]), np.array([0.2, -0.1, 0.0])]
    ws = distribute_wrench(c, acc, np.zeros(3), _double(feet[0][:2], feet[1][:2]), M)
    A = newton_euler_matrix(feet, c)
    total = np.concatenate([M * (acc + [0, 0, G]), np.zeros(3)])
    np.testing.assert_allclose(np.concatenate([w.as_array() for w in ws]), np.linalg.pinv(A) @ total,
                               atol=1e-8)


def test_cone_activation_keeps_equalities():
    # a large lateral acceleration pushes the min-norm split out of the pyramid
    c = np.array([0.0, 0.0, 0.87])
    acc = np.array([0.0, 4.0, 0.0])
    ws = distribute_wrench(c, acc, np.zeros(3), _double([0, 0.1], [0, -0.1]), M, mu=0.7)
    assert _check_newton_euler(ws, c, acc) < 1e-8
    mu_in = 0.7 / np.sqrt(2)
    for w in ws:
        assert w.force[2] >= -1e-9
        assert abs(w.force[0]) <= mu_in * w.force[2] + 1e-9
        assert abs(w.force[1]) <= mu_in * w.force[2] + 1e-9


def test_distribution_errors():
    with pytest.raises(DistributionInfeasibleError):
        distribute_wrench([0, 0, 0.87], [0, 0, -20.0], np.zeros(3), _double([0, 0.1], [0, -0.1]), M)
    with pytest.raises(DistributionInfeasibleError):
        distribute_wrench([0, 0, 0.87], [15.0, 0, 0], np.zeros(3), SupportPhase("single", (np.zeros(2),), 1.0), M)
    with pytest.raises(ValueError):
        distribute_wrench([0, 0, 0.87], np.zeros(3), np.zeros(3), _double([0, 0.1], [0, -0.1]), 0.0)
    with pytest.raises(ValueError):
        Wrench([0, 0], [0, 0, 0])


def test_bundle_standing_still():
    feet = {"left": np.array([0.0, 0.085]), "right": np.array([0.0, -0.085])}
    x = np.zeros((2, 3))
    b = interface_references(x, 0.87, feet, ("left", "right"), None, 0.0, M)
    np.testing.assert_allclose(b.com.value, [0, 0, 0.87])
    np.testing.assert_array_equal(b.com.accel, 0.0)
    assert b.waist_yaw == 0.0
    for side in feet:
        np.testing.assert_allclose(b.wrenches[side].force, [0, 0, M * G / 2])
        np.testing.assert_allclose(b.feet[side][0][:2], feet[side])


def test_bundle_single_support_pass_through():
    feet = {"left": np.array([0.0, 0.085])}
    tr = swing_spline([0.0, -0.085], [0.3, -0.085], 0.6, 1.8)
    x = np.array([[0.01, 0.2, 0.5], [0.07, -0.05, 0.3]])
    b = interface_references(x, 0.87, feet, ("left",), ("right", tr), 1.0, M)
    np.testing.assert_array_equal(b.com.value[:2], x[:, 0])
    np.testing.assert_array_equal(b.com.rate[:2], x[:, 1])
    np.testing.assert_array_equal(b.com.accel[:2], x[:, 2])
    np.testing.assert_allclose(b.feet["right"][0], tr.evaluate(1.0)[0])
    forces = sum(w.force for w in b.wrenches.values())
    np.testing.assert_allclose(forces / M - [0, 0, G], b.com.accel, atol=1e-9)
