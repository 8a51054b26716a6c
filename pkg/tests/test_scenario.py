import numpy as np
import pytest

from flexwalk.config import ScenarioConfig
from flexwalk.scenario import quasi_static_segments, run_scenario, tube_setup

SHORT = {"in_place_steps": 2, "growing_steps": 1, "steady_steps": 1, "settle_time": 1.0}


@pytest.fixture(scope="module")
def short_cfg():
    return ScenarioConfig().replace(scenario={"kind": "walk-in-place"}, walk=SHORT, plant={"rigid": True})


def test_replayed_reference_matches_online_planner(short_cfg):
    a = run_scenario(short_cfg).trace
    b = run_scenario(short_cfg.replace(scenario={"mpc": False})).trace
    assert b.meta["mpc"] is False
    for name, col in a.columns.items():
        if name == "phase":
            assert list(col) == list(b.columns[name])
        else:
            np.testing.assert_array_equal(np.asarray(col, float), np.asarray(b.columns[name], float), err_msg=name)


def test_tube_setup_scales_with_margins():
    tubes = tube_setup(ScenarioConfig())
    np.testing.assert_allclose(tubes.d_max, np.array([0.025, 0.015]) / tubes.unit_bound, rtol=1e-12)
    np.testing.assert_allclose(tubes.d_max, [70.24, 42.14], atol=0.01)


@pytest.mark.parametrize("estimator_on", [True, False])
def test_quasi_static_com_held_over_stance_foot(estimator_on):
    cfg = ScenarioConfig()
    offset = 0.0 if estimator_on else cfg.quasi_static.interior_offset
    singles = [s for s in quasi_static_segments(cfg, estimator_on) if s[6] != "double"]
    assert len(singles) == cfg.quasi_static.steps
    for duration, c0, c1, feet, stance, swing, phase in singles:
        np.testing.assert_array_equal(c0, c1)
        foot = feet[phase]
        assert c0[0] == foot[0]
        assert abs(c0[1]) == pytest.approx(abs(foot[1]) - offset, abs=1e-15)
        assert swing[0] != phase


def test_unknown_kind_rejected():
    from flexwalk.config import ConfigError
    with pytest.raises(ConfigError):
        ScenarioConfig().replace(scenario={"kind": "moonwalk"})
