from dataclasses import replace

import numpy as np
import pytest
from hypothesis import example, given, strategies as st

from flexwalk.config import ScenarioConfig
from flexwalk.flex import FlexParams, HipConfiguration, approx_flex_torque
from flexwalk.identification import (IdentificationFailedError, StaticTraceError, cell_intersections,
                                     contour_intersections, identify_stiffness, record_single_stance,
                                     static_deflection, zero_contour)
from flexwalk.sim import SIDES

TRUE_K = (2180.0, 4900.0)


@pytest.fixture(scope="module")
def cfg():
    return ScenarioConfig()


@pytest.fixture(scope="module")
def records(cfg):
    return {s: record_single_stance(cfg, s) for s in SIDES}


def test_static_deflection_balances_spring():
    load = HipConfiguration(np.zeros(3), tau_hip=np.array([40.0, -300.0, 0.0]),
                            f_hip=np.array([0.0, 0.0, 900.0]))
    lever = np.array([0.0, 0.0, 0.09])
    th = static_deflection(load, 4900.0, lever)
    p = FlexParams(4900.0, 0.0, lever)
    np.testing.assert_allclose(approx_flex_torque(load, th, p) + 4900.0 * th, 0.0, atol=1e-10)


def test_linear_contours_cross_at_root():
    x, y = np.linspace(0.0, 4.0, 5), np.linspace(-1.0, 3.0, 5)
    X, Y = np.meshgrid(x, y, indexing="ij")
    f = (X - 1.3) + 0.5 * (Y - 0.7)
    g = -(X - 1.3) + 2.0 * (Y - 0.7)
    hits = contour_intersections(x, y, f, g)
    assert len(hits) == 1
    np.testing.assert_allclose(hits[0][0], [1.3, 0.7], atol=1e-12)
    np.testing.assert_allclose(hits[0][1], [[1.0, 0.5], [-1.0, 2.0]], atol=1e-12)
    for p, q in zero_contour(x, y, f):
        for pt in (p, q):
            assert (pt[0] - 1.3) + 0.5 * (pt[1] - 0.7) == pytest.approx(0.0, abs=1e-12)


coef = st.floats(-2, 2, allow_nan=False)


@given(st.lists(coef, min_size=8, max_size=8))
@example([0.0, 0.0, 1.175494351e-38, 1.0, 1.0, 0.0, 0.0, 0.0])  # g never vanishes
def test_cell_intersections_are_common_zeros(c):
    fc, gc = tuple(c[:4]), tuple(c[4:])
    for u, v in cell_intersections(fc, gc):
        assert 0 <= u <= 1 and 0 <= v <= 1
        f = fc[0] + fc[1] * u + fc[2] * v + fc[3] * u * v
        g = gc[0] + gc[1] * u + gc[2] * v + gc[3] * u * v
        assert abs(f) < 1e-6 and abs(g) < 1e-6


def test_two_by_two_bracketing_grid(records, cfg):
    res = identify_stiffness(records, [2000.0, 2400.0], [4600.0, 5200.0], cfg)
    assert 2000.0 <= res.k_left <= 2400.0
    assert 4600.0 <= res.k_right <= 5200.0
    # the reported point is a common zero of both bilinear interpolants
    for s in SIDES:
        e = res.errors[s]
        u = (res.k_left - 2000.0) / 400.0
        v = (res.k_right - 4600.0) / 600.0
        val = e[0, 0] * (1 - u) * (1 - v) + e[1, 0] * u * (1 - v) + e[0, 1] * (1 - u) * v + e[1, 1] * u * v
        assert abs(val) < 1e-12


def test_grid_missing_truth_fails(records, cfg):
    with pytest.raises(IdentificationFailedError) as info:
        identify_stiffness(records, [3000.0, 3300.0], [6000.0, 7000.0], cfg)
    assert len(info.value.closest) == 2


def test_moving_trace_rejected(records, cfg):
    moving = dict(records)
    moving["left"] = replace(records["left"], max_speed=0.1)
    with pytest.raises(StaticTraceError):
        identify_stiffness(moving, [2000.0, 2400.0], [4600.0, 5200.0], cfg)


def test_input_validation(records, cfg):
    with pytest.raises(ValueError):
        identify_stiffness(records, [2000.0], [4600.0, 5200.0], cfg)
    with pytest.raises(ValueError):
        identify_stiffness({"left": records["left"]}, [2000.0, 2400.0], [4600.0, 5200.0], cfg)
    with pytest.raises(ValueError):
        record_single_stance(cfg, "middle")


def test_rigid_plant_is_unobservable(cfg):
    rigid = cfg.replace(plant={"rigid": True})
    recs = {s: record_single_stance(rigid, s) for s in SIDES}
    k_left = np.linspace(*cfg.identification.k_left_range, 10)
    k_right = np.linspace(*cfg.identification.k_right_range, 10)
    with pytest.raises(IdentificationFailedError):
        identify_stiffness(recs, k_left, k_right, rigid)
