import numpy as np
import pytest
from hypothesis import given, strategies as st

from flexwalk import tube
from flexwalk.centroidal import SystemMatrices


@pytest.fixture(scope="module")
def sys_():
    return SystemMatrices(0.002, 11.276)


@pytest.fixture(scope="module")
def opt_gain(sys_):
    return tube.optimize_gain(sys_, 1.0)


def impulse_response(K, sys_, rows, n):
    """``rows @ A_K^i @ B`` for i < n."""
    AK = tube.closed_loop(K, sys_)
    out, x = np.empty((n, len(rows))), sys_.B.copy()
    for i in range(n):
        out[i] = rows @ x
        x = AK @ x
    return out


def test_deadbeat_is_nilpotent(sys_):
    AK = tube.closed_loop(tube.deadbeat_gain(sys_), sys_)
    assert np.abs(np.linalg.matrix_power(AK, 3)).max() < 1e-9 * np.abs(AK).max() ** 3


def test_deadbeat_exact_sum(sys_):
    K = tube.deadbeat_gain(sys_)
    h = impulse_response(K, sys_, sys_.V[None, :], 3)[:, 0]
    exact = 7.0 * np.abs(h).sum()
    assert tube.mrpi_vrp_bound(K, sys_, 7.0) == pytest.approx(exact, rel=1e-12)
    box = impulse_response(K, sys_, np.eye(3), 3)
    np.testing.assert_allclose(tube.mrpi_state_box(K, sys_, 7.0), 7.0 * np.abs(box).sum(axis=0), rtol=1e-12)


def test_unstable_gain_rejected(sys_):
    with pytest.raises(tube.InstabilityError):
        tube.mrpi_vrp_bound(np.zeros(3), sys_, 1.0)


def test_zero_disturbance_gives_zero_box(sys_, opt_gain):
    assert tube.mrpi_vrp_bound(opt_gain.K, sys_, 0.0) == 0.0
    np.testing.assert_array_equal(tube.mrpi_state_box(opt_gain.K, sys_, 0.0), 0.0)


def test_negative_disturbance_bound_rejected(sys_, opt_gain):
    with pytest.raises(ValueError):
        tube.mrpi_vrp_bound(opt_gain.K, sys_, -1.0)


@given(st.floats(1e-3, 1e4))
def test_bound_linear_in_disturbance(lam):
    s = SystemMatrices(0.002, 11.276)
    K = tube.deadbeat_gain(s)
    assert tube.mrpi_vrp_bound(K, s, lam * 3.0) == pytest.approx(lam * tube.mrpi_vrp_bound(K, s, 3.0), rel=1e-12)


def test_gain_postconditions(sys_, opt_gain):
    g = tube.make_gain(opt_gain.K, sys_, 1000.0)
    assert g.spectral_radius < 1
    assert g.v_tilde_max >= abs(sys_.VB) * 1000.0
    assert np.all(g.omega_box >= np.abs(sys_.B) * 1000.0)


def test_brute_force_matches_series(sys_, opt_gain, rng):
    K, d, N = opt_gain.K, 50.0, 500
    h = impulse_response(K, sys_, sys_.V[None, :], N)[:, 0]
    bound = tube.mrpi_vrp_bound(K, sys_, d)
    seqs = d * rng.choice([-1.0, 1.0], size=(100_000, N))
    seqs[0] = d * np.sign(h)  # extremal sequence
    reached = np.abs(seqs @ h)
    assert reached.max() <= bound + 1e-12
    assert reached.max() >= 0.99 * bound


def test_box_contains_rollouts(sys_, opt_gain, rng):
    K, d = opt_gain.K, 10.0
    box = tube.mrpi_state_box(K, sys_, d)
    AK = tube.closed_loop(K, sys_)
    x = np.zeros((10_000, 3))
    for _ in range(300):
        x = x @ AK.T + np.outer(rng.uniform(-d, d, len(x)), sys_.B)
        assert np.all(np.abs(x) <= box + 1e-15)


def test_rpi_containment(sys_, opt_gain, rng):
    K, d = opt_gain.K, 1000.0
    g = tube.make_gain(K, sys_, d)
    AK = tube.closed_loop(K, sys_)
    # points of the tube reached by extremal sequences, pushed one more step
    h = impulse_response(K, sys_, np.eye(3), 2000)
    seqs = d * rng.choice([-1.0, 1.0], size=(10_000, 2000))
    x = seqs @ h
    assert np.all(np.abs(x) <= g.omega_box + 1e-12)
    e = d * rng.choice([-1.0, 1.0], size=len(x))
    succ = x @ AK.T + np.outer(e, sys_.B)
    assert np.all(np.abs(succ @ sys_.V) <= g.v_tilde_max + 1e-9)


def test_optimized_gain_beats_deadbeat(sys_, opt_gain):
    db = tube.mrpi_vrp_bound(tube.deadbeat_gain(sys_), sys_, 1.0)
    assert opt_gain.spectral_radius < 1
    assert opt_gain.v_tilde_max <= db


def test_optimizer_descends_from_seed(sys_):
    seed = tube.deadbeat_gain(sys_) * np.array([0.5, 0.8, 0.9])
    g = tube.optimize_gain(sys_, 1.0, seed_K=seed, maxfev=400)
    assert g.v_tilde_max <= tube.mrpi_vrp_bound(seed, sys_, 1.0)


def test_optimizer_history_non_increasing(opt_gain):
    hist = np.array(opt_gain.history)
    assert len(hist) > 10
    assert np.all(np.diff(hist) <= 1e-15)


def test_optimizer_deterministic(sys_, opt_gain):
    again = tube.optimize_gain(sys_, 1.0)
    np.testing.assert_array_equal(again.K, opt_gain.K)


def test_unstable_seed_falls_back_to_deadbeat(sys_):
    g = tube.optimize_gain(sys_, 1.0, seed_K=np.zeros(3), maxfev=200)
    assert g.spectral_radius < 1


def saturation_oracle(x_t, x_r, n, support, eu, K, s):
    """Feedback interval whose every value keeps V x+ + n+ in support for both extreme e_u."""
    rest = n + s.V @ (s.A @ x_t + x_r)
    VB = s.V @ s.B
    ends = [(p - rest) / VB - e for p in support for e in eu]
    # each (p, e) pair is a constraint; for VB < 0 pmin bounds fb from above
    if VB > 0:
        return max(ends[0], ends[1]), min(ends[2], ends[3])
    return max(ends[2], ends[3]), min(ends[0], ends[1])


def test_saturation_symmetric(sys_, opt_gain):
    lo, hi = tube.saturation_limits(np.zeros(3), np.zeros(3), 0.0, (-0.1, 0.1), (-50.0, 50.0), opt_gain.K, sys_)
    assert lo == pytest.approx(-hi, rel=1e-12)


def test_saturation_zero_width(sys_, opt_gain):
    lo, hi = tube.saturation_limits(np.zeros(3), np.zeros(3), 0.0, (0.0, 0.0), (0.0, 0.0), opt_gain.K, sys_)
    assert lo == hi


def test_saturation_spot_case(sys_, opt_gain):
    x_t = np.array([0.01, 0.0, 0.0])
    for eu in ((-100.0, 100.0), (-20.0, 60.0)):
        got = tube.saturation_limits(x_t, np.zeros(3), 0.0, (-0.11, 0.11), eu, opt_gain.K, sys_)
        np.testing.assert_allclose(got, saturation_oracle(x_t, np.zeros(3), 0.0, (-0.11, 0.11), eu, None, sys_),
                                   rtol=1e-12)
    # the full 5370 m/s^3 disturbance interval cannot be absorbed within one 2 ms tick
    lo, hi = saturation_oracle(x_t, np.zeros(3), 0.0, (-0.11, 0.11), (-5370.0, 5370.0), None, sys_)
    assert lo > hi
    with pytest.raises(tube.SaturationInfeasibleError):
        tube.saturation_limits(x_t, np.zeros(3), 0.0, (-0.11, 0.11), (-5370.0, 5370.0), opt_gain.K, sys_)


@given(st.lists(st.floats(-0.01, 0.01), min_size=3, max_size=3), st.floats(-0.05, 0.05),
       st.floats(-30, 0), st.floats(0, 30), st.floats(-1e4, 1e4), st.floats(0, 1))
def test_saturated_command_keeps_cop_inside(xt, vr, emin, emax, fb_raw, frac):
    s = SystemMatrices(0.002, 11.276)
    K = tube.deadbeat_gain(s)
    x_t = np.array(xt) * np.array([1.0, 0.1, 10.0])
    x_r = np.array([vr, 0.0, 0.0])
    support = (-0.11, 0.11)
    try:
        lo, hi = tube.saturation_limits(x_t, x_r, 0.0, support, (emin, emax), K, s)
    except tube.SaturationInfeasibleError:
        return
    fb = min(max(fb_raw, lo), hi)
    e = emin + frac * (emax - emin)
    p_next = s.V @ (s.A @ x_t + x_r) + s.VB * (fb + e)
    assert support[0] - 1e-9 <= p_next <= support[1] + 1e-9


def test_stabilize_zero_error(sys_, opt_gain):
    x = np.array([0.1, 0.2, 0.3])
    x_next, jerk = tube.stabilize_step(x, x, 4.0, opt_gain, (-1.0, 1.0), sys_)
    assert jerk == 4.0
    np.testing.assert_allclose(x_next, sys_.A @ x + sys_.B * 4.0)


def test_stabilize_clamps(sys_, opt_gain):
    x_hat = np.array([-0.01, 0.0, 0.0])  # K has negative entries, so K x~ > 0
    assert float(opt_gain.K @ x_hat) > 5.0
    _, jerk = tube.stabilize_step(x_hat, np.zeros(3), 1.0, opt_gain.K, (-5.0, 5.0), sys_)
    assert jerk == 6.0


def test_tube_rollout_stays_bounded(sys_, opt_gain, rng):
    d = 1000.0
    bound = tube.mrpi_vrp_bound(opt_gain.K, sys_, d)
    x_ref, x_hat = np.zeros(3), np.zeros(3)
    for _ in range(20_000):
        x_hat, _ = tube.stabilize_step(x_hat, x_ref, 0.0, opt_gain, (-np.inf, np.inf), sys_)
        x_hat = x_hat + sys_.B * rng.uniform(-d, d)
        assert abs(sys_.V @ x_hat) <= bound + 1e-9
