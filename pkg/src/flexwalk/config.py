"""Scenario configuration: TOML sections mapped onto dataclasses.

Unknown sections or keys are rejected; values are checked against the
preconditions of the modules they feed. ``None`` fields are omitted when
writing, since TOML has no null.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import tomli_w

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

SCENARIOS = ("walk-in-place", "quasi-static", "dynamic-walk", "stop",
             "identify-stiffness", "tune-gain", "mrpi")


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class ScenarioSection:
    kind: str = "dynamic-walk"
    seed: int = 0
    estimator: bool = True
    mpc: bool = True


@dataclass
class WalkSection:
    in_place_steps: int = 2
    growing_steps: int = 8
    steady_steps: int = 8
    aimed_velocity: float = 0.25
    t_first_swing: float = 0.6
    # stop scenario: aimed velocity drops to 0 after this many steady steps
    stop_after_steady_steps: int = 4
    stop_extra_steps: int = 2
    settle_time: float = 5.0
    initial_feet_y: float = 0.085


@dataclass
class QuasiStaticSection:
    steps: int = 6
    step_length: float = 0.10
    transfer_time: float = 1.5
    single_support_time: float = 1.5
    # CoM offset toward the feet interior used when the estimator is off
    interior_offset: float = 0.02


@dataclass
class IdentificationSection:
    k_left_range: list = field(default_factory=lambda: [1090.0, 3270.0])
    k_right_range: list = field(default_factory=lambda: [2450.0, 7350.0])
    grid: int = 30
    shift_time: float = 1.5
    hold_time: float = 3.0
    record_time: float = 1.0


@dataclass
class PlantSection:
    rigid: bool = False
    k_left: float = 2180.0
    k_right: float = 4900.0
    d_left: Optional[float] = None
    d_right: Optional[float] = None
    J_eff: float = 1.0
    total_mass: float = 95.0
    leg_mass: float = 12.0
    com_height: float = 0.87
    gravity: float = 9.81
    hip_half_width: float = 0.085
    support_lever: list = field(default_factory=lambda: [0.0, 0.0, -0.9])
    torque_lever: list = field(default_factory=lambda: [0.0, 0.0, 0.09])
    foot_half_length: float = 0.11
    foot_half_width: float = 0.065
    sim_dt: float = 1e-3
    load_model: str = "weight"  # weight | wrench


@dataclass
class ControllerSection:
    T: float = 0.002
    margins: list = field(default_factory=lambda: [0.025, 0.015])
    gain: Optional[list] = None  # fixed K; optimized when absent
    tail_tol: float = 1e-9
    lpf_cutoff: float = 20.0
    k_estimate_left: Optional[float] = None  # assumed stiffness, plant value when absent
    k_estimate_right: Optional[float] = None
    saturation_eu: list = field(default_factory=lambda: [0.0, 0.0])
    mu: float = 0.7
    apex_height: float = 0.05


@dataclass
class MpcSection:
    T_mpc: float = 0.1
    N: int = 16
    step_duration: float = 1.4
    ss_fraction: float = 1.2 / 1.4
    stepping_area: list = field(default_factory=lambda: [[-0.4, 0.4], [0.16, 0.32]])
    max_swing_speed: float = 1.5
    weights: list = field(default_factory=lambda: [1.0, 1e-6, 1e-3])
    instant_velocity_share: float = 0.1
    lock_at_swing_start: bool = False
    replan_period: float = 0.2


@dataclass
class DisturbanceSection:
    kind: str = "none"  # none | uniform | bang-bang
    amplitude: float = 0.0  # m/s^3


@dataclass
class SensorSection:
    cop_noise_sigma: float = 0.5  # N m on the sole torque


@dataclass
class MrpiSection:
    K: Optional[list] = None
    d_max: float = 1000.0


@dataclass
class ScenarioConfig:
    scenario: ScenarioSection = field(default_factory=ScenarioSection)
    walk: WalkSection = field(default_factory=WalkSection)
    quasi_static: QuasiStaticSection = field(default_factory=QuasiStaticSection)
    identification: IdentificationSection = field(default_factory=IdentificationSection)
    plant: PlantSection = field(default_factory=PlantSection)
    controller: ControllerSection = field(default_factory=ControllerSection)
    mpc: MpcSection = field(default_factory=MpcSection)
    disturbance: DisturbanceSection = field(default_factory=DisturbanceSection)
    sensor: SensorSection = field(default_factory=SensorSection)
    mrpi: MrpiSection = field(default_factory=MrpiSection)

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            sec = getattr(self, f.name)
            out[f.name] = {k: v for k, v in dataclasses.asdict(sec).items() if v is not None}
        return out

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def replace(self, **sections) -> "ScenarioConfig":
        """Copy with fields of named sections overridden, e.g. ``replace(plant={"rigid": True})``."""
        data = self.to_dict()
        for name, values in sections.items():
            data.setdefault(name, {}).update(values)
        return from_dict(data)


def _coerce(key: str, value, default, annotation: str):
    if isinstance(default, bool) or annotation == "bool":
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int) or annotation == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float) or "float" in annotation:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return value
    if isinstance(default, list) or "list" in annotation:
        if not isinstance(value, list):
            raise ConfigError(key, f"expected an array, got {value!r}")
        return value
    return value


def from_dict(data: dict) -> ScenarioConfig:
    cfg = ScenarioConfig()
    sections = {f.name: f for f in dataclasses.fields(cfg)}
    for name, values in data.items():
        if name not in sections:
            raise ConfigError(name, "unknown section")
        if not isinstance(values, dict):
            raise ConfigError(name, "expected a table")
        sec = getattr(cfg, name)
        fields = {f.name: f for f in dataclasses.fields(sec)}
        kwargs = {}
        for key, value in values.items():
            if key not in fields:
                raise ConfigError(f"{name}.{key}", "unknown key")
            default = getattr(sec, key)
            kwargs[key] = _coerce(f"{name}.{key}", value, default, str(fields[key].type))
        setattr(cfg, name, dataclasses.replace(sec, **kwargs))
    validate(cfg)
    return cfg


def _require(cond: bool, key: str, message: str):
    if not cond:
        raise ConfigError(key, message)


def _pair(v, key):
    _require(isinstance(v, list) and len(v) == 2 and all(isinstance(x, (int, float)) for x in v),
             key, "expected two numbers")


def validate(cfg: ScenarioConfig):
    s, w, q, i, p, c, m, d = (cfg.scenario, cfg.walk, cfg.quasi_static, cfg.identification,
                              cfg.plant, cfg.controller, cfg.mpc, cfg.disturbance)
    _require(s.kind in SCENARIOS, "scenario.kind", f"must be one of {', '.join(SCENARIOS)}")
    _require(s.seed >= 0, "scenario.seed", "must be non-negative")
    for key in ("in_place_steps", "growing_steps", "steady_steps", "stop_after_steady_steps", "stop_extra_steps"):
        _require(getattr(w, key) >= 0, f"walk.{key}", "must be non-negative")
    _require(w.t_first_swing > 0, "walk.t_first_swing", "must be positive")
    _require(w.settle_time >= 0, "walk.settle_time", "must be non-negative")
    _require(q.steps >= 1, "quasi_static.steps", "must be at least 1")
    _require(q.transfer_time > 0 and q.single_support_time > 0, "quasi_static.transfer_time",
             "phase durations must be positive")
    _require(q.interior_offset >= 0, "quasi_static.interior_offset", "must be non-negative")
    _pair(i.k_left_range, "identification.k_left_range")
    _pair(i.k_right_range, "identification.k_right_range")
    for key in ("k_left_range", "k_right_range"):
        lo, hi = getattr(i, key)
        _require(0 < lo < hi, f"identification.{key}", "must be an increasing positive range")
    _require(i.grid >= 2, "identification.grid", "needs at least 2 points per axis")
    _require(i.record_time <= i.hold_time, "identification.record_time", "must not exceed hold_time")
    for key in ("k_left", "k_right", "J_eff", "total_mass", "com_height", "gravity", "foot_half_length",
                "foot_half_width"):
        _require(getattr(p, key) > 0, f"plant.{key}", "must be positive")
    for key in ("d_left", "d_right"):
        v = getattr(p, key)
        _require(v is None or v >= 0, f"plant.{key}", "must be non-negative")
    _require(0 < p.sim_dt <= 1e-3, "plant.sim_dt", "must lie in (0, 1e-3]")
    _require(p.load_model in ("weight", "wrench"), "plant.load_model", "must be 'weight' or 'wrench'")
    _require(p.total_mass > 2 * p.leg_mass >= 0, "plant.leg_mass", "two legs must weigh less than the robot")
    for key in ("support_lever", "torque_lever"):
        _require(len(getattr(p, key)) == 3, f"plant.{key}", "expected a 3-vector")
    _require(c.T > 0, "controller.T", "must be positive")
    _pair(c.margins, "controller.margins")
    _require(min(c.margins) > 0, "controller.margins", "must be positive")
    _require(c.margins[0] < p.foot_half_length and c.margins[1] < p.foot_half_width, "controller.margins",
             "must be smaller than the foot half-dimensions")
    _require(c.gain is None or len(c.gain) == 3, "controller.gain", "expected three gains")
    _require(c.lpf_cutoff > 0, "controller.lpf_cutoff", "must be positive")
    for key in ("k_estimate_left", "k_estimate_right"):
        v = getattr(c, key)
        _require(v is None or v > 0, f"controller.{key}", "must be positive")
    _pair(c.saturation_eu, "controller.saturation_eu")
    _require(c.saturation_eu[0] <= c.saturation_eu[1], "controller.saturation_eu", "must be ordered")
    _require(c.mu > 0, "controller.mu", "must be positive")
    _require(c.apex_height > 0, "controller.apex_height", "must be positive")
    _require(m.T_mpc > 0, "mpc.T_mpc", "must be positive")
    _require(m.N >= 2, "mpc.N", "must be at least 2")
    _require(0 < m.ss_fraction < 1, "mpc.ss_fraction", "must lie in (0, 1)")
    _require(len(m.weights) == 3 and min(m.weights) >= 0 and m.weights[0] > 0, "mpc.weights",
             "three non-negative weights with a positive velocity weight")
    _require(0 <= m.instant_velocity_share <= 1, "mpc.instant_velocity_share", "must lie in [0, 1]")
    ratio = m.replan_period / c.T
    _require(m.replan_period > 0 and abs(ratio - round(ratio)) < 1e-9, "mpc.replan_period",
             "must be a positive multiple of controller.T")
    _require(m.replan_period < m.N * m.T_mpc, "mpc.replan_period", "must be shorter than the horizon")
    _require(d.kind in ("none", "uniform", "bang-bang"), "disturbance.kind", "must be none, uniform or bang-bang")
    _require(d.amplitude >= 0, "disturbance.amplitude", "must be non-negative")
    _require(cfg.sensor.cop_noise_sigma >= 0, "sensor.cop_noise_sigma", "must be non-negative")
    _require(cfg.mrpi.K is None or len(cfg.mrpi.K) == 3, "mrpi.K", "expected three gains")
    _require(cfg.mrpi.d_max >= 0, "mrpi.d_max", "must be non-negative")


def loads(text: str) -> ScenarioConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("<file>", f"malformed TOML: {exc}") from None
    return from_dict(data)


def load(path) -> ScenarioConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("--config", f"no such file {path}")
    return loads(path.read_text())
