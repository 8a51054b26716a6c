"""Closed-loop experiments: reference source -> tube stabilizer -> whole-body interface -> plant.

The planner always restarts from its own nominal state (tube MPC), so the
reference never depends on the plant. Running with the MPC disabled replays
a reference computed ahead of time; for the walking scenarios that is the same
plan, which makes the two modes agree tick for tick.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np

from . import tube
from .centroidal import SystemMatrices, omega_from_height
from .config import ScenarioConfig
from .flex import FlexParams, FlexState, approx_flex_torque, estimate_deflection
from .gait_mpc import GaitConfig, GaitPlanner, GaitSchedule, replan_shift
from .sim import (SIDES, SIDE_SIGN, FlexibleLipPlant, PlantParams, SimTrace, estimation_offset, hip_loads,
                  measure_cop, plant_step, sole_torque, support_shares, weight_loads)

from .wholebody import interface_references, swing_spline


class ScenarioError(RuntimeError):
    """A run stopped early; carries the simulation time."""

    def __init__(self, t: float, cause: Exception):
        super().__init__(f"t={t:.3f} s: {type(cause).__name__}: {cause}")
        self.t = t
        self.cause = cause


# ---------------------------------------------------------------- setup

def plant_params(cfg: ScenarioConfig) -> PlantParams:
    p = cfg.plant
    flex = None
    if not p.rigid:
        flex = {
            "left": FlexParams(p.k_left, p.d_left, p.torque_lever),
            "right": FlexParams(p.k_right, p.d_right, p.torque_lever),
        }
    return PlantParams(flex=flex, J_eff=p.J_eff, total_mass=p.total_mass, leg_mass=p.leg_mass,
                       com_height=p.com_height, gravity=p.gravity, hip_half_width=p.hip_half_width,
                       support_lever=tuple(p.support_lever), foot_half_length=p.foot_half_length,
                       foot_half_width=p.foot_half_width, sim_dt=p.sim_dt)


def estimator_params(cfg: ScenarioConfig) -> dict:
    """Flexibility model assumed by the estimator (plant damping and lever, assumed stiffness)."""
    p, c = cfg.plant, cfg.controller
    kl = p.k_left if c.k_estimate_left is None else c.k_estimate_left
    kr = p.k_right if c.k_estimate_right is None else c.k_estimate_right
    return {"left": FlexParams(kl, None, p.torque_lever), "right": FlexParams(kr, None, p.torque_lever)}


def gait_config(cfg: ScenarioConfig) -> GaitConfig:
    m, p = cfg.mpc, cfg.plant
    return GaitConfig(T_mpc=m.T_mpc, N=m.N, step_duration=m.step_duration, ss_fraction=m.ss_fraction,
                      foot_half_length=p.foot_half_length, foot_half_width=p.foot_half_width,
                      stepping_area=tuple(tuple(a) for a in m.stepping_area),
                      max_swing_speed=m.max_swing_speed, weights=tuple(m.weights),
                      instant_velocity_share=m.instant_velocity_share,
                      lock_at_swing_start=m.lock_at_swing_start, replan_period=m.replan_period)


@lru_cache(maxsize=8)
def _optimized_gain(T: float, omega_sq: float, tail_tol: float) -> tuple:
    sys = SystemMatrices(T, omega_sq)
    g = tube.optimize_gain(sys, 1.0, tail_tol=tail_tol)
    return tuple(g.K)


@dataclass
class TubeSetup:
    sys: SystemMatrices
    K: np.ndarray
    margins: np.ndarray  # per axis, m
    d_max: np.ndarray  # per axis, m/s^3, implied by the margins
    unit_bound: float  # VRP bound per unit disturbance


def tube_setup(cfg: ScenarioConfig) -> TubeSetup:
    """Gain and the disturbance bounds the configured margins certify."""
    c = cfg.controller
    omega_sq = omega_from_height(cfg.plant.com_height, cfg.plant.gravity)
    sys = SystemMatrices(c.T, omega_sq)
    K = np.array(c.gain, float) if c.gain is not None else np.array(_optimized_gain(c.T, omega_sq, c.tail_tol))
    unit = tube.mrpi_vrp_bound(K, sys, 1.0, c.tail_tol)
    margins = np.array(c.margins, float)
    return TubeSetup(sys, K, margins, margins / unit, unit)


# ---------------------------------------------------------------- references

@dataclass
class RefSample:
    x: np.ndarray  # (2, 3)
    u: np.ndarray  # (2,)
    feet: dict  # side -> (x, y) for feet on the ground
    stance: tuple  # sides carrying load
    swing: Optional[tuple]  # (side, SwingTrajectory)
    phase: str  # "double" | "left" | "right"
    shares: dict  # side -> fraction of the weight it carries


class PlannerSource:
    """Receding-horizon reference over a walking schedule."""

    def __init__(self, cfg: ScenarioConfig, tubes: TubeSetup, schedule: GaitSchedule, aimed, feet0: dict,
                 stop_time: Optional[float] = None, stop_extra_steps: int = 2):
        self.cfg = cfg
        self.gcfg = gait_config(cfg)
        self.omega_sq = tubes.sys.omega_sq
        self.schedule = schedule
        self.planner = GaitPlanner(self.gcfg, schedule, self.omega_sq)
        self.aimed = aimed
        self.margins = tubes.margins
        self.T = cfg.controller.T
        self.replan_ticks = int(round(self.gcfg.replan_period / self.T))
        self.positions = {0: tuple(feet0["left"]), 1: tuple(feet0["right"])}
        self.stop_time = stop_time
        self.stop_extra_steps = stop_extra_steps
        self.stopped = False
        self.plan = None
        self.x_nom = np.zeros((2, 3))
        self.swings = {}  # footstep index -> SwingTrajectory
        self.plans = 0
        self.max_kkt = 0.0
        self.max_retarget_speed = 0.0

    def _aimed(self, t):
        return (0.0, 0.0) if self.stopped else self.aimed(t)

    def replan(self, k: int, t: float):
        if self.stop_time is not None and not self.stopped and t >= self.stop_time - 1e-9:
            self.stopped = True
            self.schedule = self.schedule.truncated(t, self.stop_extra_steps)
            self.planner = GaitPlanner(self.gcfg, self.schedule, self.omega_sq)
        if self.plan is not None:
            self.x_nom, _ = replan_shift(self.plan, t - self.plan.t0)
        self.plan = self.planner.plan(t, self.x_nom, self._aimed(t), self.positions, self.margins)
        self.plans += 1
        self.max_kkt = max(self.max_kkt, self.plan.kkt_residual)
        for i in self.plan.free_footsteps:
            self.positions[i] = tuple(self.plan.footsteps[i])

    def _swing(self, t: float):
        fs = self.schedule.swing_at(t)
        if fs is None:
            return None
        target = np.asarray(self.positions[fs.index], float)
        traj = self.swings.get(fs.index)
        if traj is None:
            start = self.positions[self.schedule.previous_same_side(fs.index)]
            traj = swing_spline(start, target, fs.swing_start, fs.land_time, self.cfg.controller.apex_height,
                                self.gcfg.max_swing_speed)
        elif not np.allclose(traj.target, target, atol=1e-12, rtol=0):
            traj = traj.retarget(t, target)
            self.max_retarget_speed = max(self.max_retarget_speed, traj.peak_horizontal_speed())
        self.swings[fs.index] = traj
        return fs.side, traj

    def sample(self, k: int) -> RefSample:
        t = k * self.T
        if k % self.replan_ticks == 0:
            self.replan(k, t)
        x, u = replan_shift(self.plan, t - self.plan.t0)
        on = self.schedule.feet_on_ground(t)
        feet = {s: np.asarray(self.positions[i], float) for s, i in on.items()}
        swing = self._swing(t)
        if swing is not None:
            feet.pop(swing[0], None)
        slot = self.schedule.slot_at(t)
        if slot.kind == "single":
            side = self.schedule.footsteps[slot.feet[0]].side
            stance, phase = (side,), side
            shares = {side: 1.0}
        else:
            stance, phase = tuple(s for s in SIDES if s in feet), "double"
            shares = _transfer_shares(slot, t, self.schedule)
        return RefSample(x, u, feet, stance, swing, phase, shares)


def _smoothstep(r: float) -> float:
    r = min(max(r, 0.0), 1.0)
    return r * r * (3.0 - 2.0 * r)


def _transfer_shares(slot, t: float, schedule: GaitSchedule) -> dict:
    """Weight split during a double-support slot: the slot blend eased at both ends,
    so the load, and the hip deflection it causes, changes with a continuous rate."""
    a0, a1 = slot.alpha
    r0, r1 = slot.ramp
    frac = 1.0 if r1 <= r0 else _smoothstep((t - r0) / (r1 - r0))
    w = a0 + (a1 - a0) * frac
    first, second = (schedule.footsteps[i].side for i in slot.feet)
    return {first: 1.0 - w, second: w}


def _quintic_profile(a, b, T, tau):
    """Position, velocity, acceleration of a rest-to-rest quintic from ``a`` to ``b``."""
    s = np.clip(tau / T, 0.0, 1.0)
    d = np.asarray(b, float) - np.asarray(a, float)
    pos = np.asarray(a, float) + d * (10 * s**3 - 15 * s**4 + 6 * s**5)
    vel = d * (30 * s**2 - 60 * s**3 + 30 * s**4) / T
    acc = d * (60 * s - 180 * s**2 + 120 * s**3) / T**2
    return pos, vel, acc


class PrecomputedSource:
    """Replays a fixed reference: per-tick CoM state, jerk and support bookkeeping."""

    def __init__(self, xs, us, feet, stance, swing, phase, shares):
        self.xs, self.us = xs, us
        self.feet, self.stance, self.swing, self.phase = feet, stance, swing, phase
        self.shares = shares
        self.plans = 0
        self.max_kkt = 0.0
        self.max_retarget_speed = 0.0

    def __len__(self):
        return len(self.us)

    def sample(self, k: int) -> RefSample:
        return RefSample(self.xs[k], self.us[k], self.feet[k], self.stance[k], self.swing[k], self.phase[k],
                         self.shares[k])

    @classmethod
    def record(cls, source, n_ticks: int) -> "PrecomputedSource":
        samples = [source.sample(k) for k in range(n_ticks)]
        out = cls([s.x for s in samples], [s.u for s in samples], [s.feet for s in samples],
                  [s.stance for s in samples], [s.swing for s in samples], [s.phase for s in samples],
                  [s.shares for s in samples])
        out.plans, out.max_kkt = getattr(source, "plans", 0), getattr(source, "max_kkt", 0.0)
        out.max_retarget_speed = getattr(source, "max_retarget_speed", 0.0)
        return out

    @classmethod
    def from_segments(cls, segments, T: float, sys: SystemMatrices, half_sizes=(0.0, 0.0)) -> "PrecomputedSource":
        """Build from ``(duration, com_from, com_to, feet, stance, swing_spec, phase)`` segments.

        The CoM moves along a rest-to-rest quintic in each segment. The jerk
        applied over a tick is the tick average of the quintic's jerk, so the
        discrete reference reproduces the quintic's acceleration at every tick.
        The weight split follows the CoM over the soles.
        """
        xs, us, feet_l, stance_l, swing_l, phase_l, shares_l = [], [], [], [], [], [], []
        x = None
        for dur, c0, c1, feet, stance, swing, phase in segments:
            n = int(round(dur / T))
            traj = None
            if swing is not None:
                side, s_from, s_to, t_start, apex = swing
                traj = (side, swing_spline(s_from, s_to, t_start, t_start + n * T, apex))
            for j in range(n):
                _, _, a0 = _quintic_profile(c0, c1, n * T, j * T)
                _, _, a1 = _quintic_profile(c0, c1, n * T, (j + 1) * T)
                if x is None:
                    p0, v0, _ = _quintic_profile(c0, c1, n * T, 0.0)
                    x = np.column_stack([p0, v0, a0])
                u = (a1 - a0) / T
                xs.append(x.copy())
                us.append(u)
                feet_l.append(feet)
                stance_l.append(stance)
                swing_l.append(traj)
                phase_l.append(phase)
                shares_l.append(support_shares(x[:, 0], {s: feet[s] for s in stance}, half_sizes))
                x = x @ sys.A.T + np.outer(u, sys.B)
        return cls(xs, us, feet_l, stance_l, swing_l, phase_l, shares_l)


def walking_schedule(cfg: ScenarioConfig):
    w = cfg.walk
    gcfg = gait_config(cfg)
    n = w.in_place_steps + w.growing_steps + w.steady_steps
    sched = GaitSchedule.walking(gcfg, n, w.t_first_swing)
    t_ramp = w.t_first_swing + w.in_place_steps * gcfg.step_duration
    ramp = w.growing_steps * gcfg.step_duration
    v = w.aimed_velocity

    def aimed(t):
        if t < t_ramp:
            return (0.0, 0.0)
        if ramp <= 0:
            return (v, 0.0)
        return (v * min(1.0, (t - t_ramp) / ramp), 0.0)

    return sched, aimed, t_ramp + ramp


def quasi_static_segments(cfg: ScenarioConfig, estimator_on: bool):
    q, w = cfg.quasi_static, cfg.walk
    apex = cfg.controller.apex_height
    y0 = w.initial_feet_y
    feet = {"left": np.array([0.0, y0]), "right": np.array([0.0, -y0])}
    offset = 0.0 if estimator_on else q.interior_offset
    com = np.zeros(2)
    segs = []
    t = 0.0
    hold = 0.5
    segs.append((hold, com, com, dict(feet), ("left", "right"), None, "double"))
    t += hold
    sides = ("left", "right")
    for j in range(q.steps):
        swing_side = sides[(j + 1) % 2]
        stance_side = sides[j % 2]
        target = feet[stance_side] - np.array([0.0, SIDE_SIGN[stance_side] * offset])
        segs.append((q.transfer_time, com, target, dict(feet), ("left", "right"), None, "double"))
        t += q.transfer_time
        com = target
        s_from = feet[swing_side]
        s_to = np.array([feet[stance_side][0] + q.step_length, s_from[1]])
        stance_feet = {stance_side: feet[stance_side]}
        segs.append((q.single_support_time, com, com, stance_feet, (stance_side,),
                     (swing_side, s_from, s_to, t, apex), stance_side))
        t += q.single_support_time
        feet = dict(feet)
        feet[swing_side] = s_to
    mid = 0.5 * (feet["left"] + feet["right"])
    segs.append((q.transfer_time, com, mid, dict(feet), ("left", "right"), None, "double"))
    segs.append((1.0, mid, mid, dict(feet), ("left", "right"), None, "double"))
    return segs


def single_stance_segments(cfg: ScenarioConfig, stance_side: str):
    """Shift onto one foot, lift the other and hold still."""
    i, w = cfg.identification, cfg.walk
    y0 = w.initial_feet_y
    feet = {"left": np.array([0.0, y0]), "right": np.array([0.0, -y0])}
    com = np.zeros(2)
    target = feet[stance_side].copy()
    swing_side = "right" if stance_side == "left" else "left"
    return [
        (0.2, com, com, dict(feet), ("left", "right"), None, "double"),
        (i.shift_time, com, target, dict(feet), ("left", "right"), None, "double"),
        (i.hold_time, target, target, {stance_side: feet[stance_side]}, (stance_side,), None, stance_side),
    ]


# ---------------------------------------------------------------- closed loop

@dataclass
class RunResult:
    trace: SimTrace
    loads: list = field(default_factory=list)  # per tick {side: HipConfiguration}
    rigid_com: list = field(default_factory=list)  # per tick rigid kinematic CoM estimate (x, y)
    stance_feet: list = field(default_factory=list)  # per tick first stance foot position
    source: object = None
    final_feet: dict = field(default_factory=dict)  # feet on the ground at the last tick


def _disturbance(cfg: ScenarioConfig, rng, n_ticks: int) -> np.ndarray:
    d = cfg.disturbance
    if d.kind == "none" or d.amplitude == 0:
        return np.zeros((n_ticks, 2))
    if d.kind == "uniform":
        return rng.uniform(-d.amplitude, d.amplitude, size=(n_ticks, 2))
    return d.amplitude * rng.choice([-1.0, 1.0], size=(n_ticks, 2))


def _support(feet: dict, axis: int, h: float) -> tuple:
    coords = [f[axis] for f in feet.values()]
    return min(coords) - h, max(coords) + h


def run_closed_loop(cfg: ScenarioConfig, source, n_ticks: int, tubes: TubeSetup,
                    estimator_on: bool, record_loads: bool = False) -> RunResult:
    c, pcfg = cfg.controller, cfg.plant
    params = plant_params(cfg)
    est_params = estimator_params(cfg)
    sys = tubes.sys
    T = c.T
    omega_sq = sys.omega_sq
    rng = np.random.default_rng(cfg.scenario.seed)
    dist = _disturbance(cfg, rng, n_ticks)
    noise = rng.normal(0.0, 1.0, size=(n_ticks, 2))
    mass, g = pcfg.total_mass, pcfg.gravity
    f_z = mass * g
    half = (pcfg.foot_half_length, pcfg.foot_half_width)
    eu = tuple(c.saturation_eu)

    nxt = source.sample(0)
    plant = FlexibleLipPlant.standing(params, nxt.feet, nxt.x)
    est = {s: FlexState() for s in SIDES}
    zero = {s: np.zeros(2) for s in SIDES}
    bias = np.zeros(2)
    bias_rate = np.zeros(2)
    trace = SimTrace()
    out = RunResult(trace, source=source)

    for k in range(n_ticks):
        t = k * T
        try:
            ref = nxt
            nxt = source.sample(k + 1) if k + 1 < n_ticks else ref
            # the plant follows the reference support bookkeeping
            plant_feet = {s: (ref.feet.get(s)) for s in SIDES}
            if any((plant.feet.get(s) is None) != (plant_feet[s] is None) or
                   (plant_feet[s] is not None and not np.array_equal(plant.feet[s], plant_feet[s]))
                   for s in SIDES):
                plant = type(plant)(plant.params, plant.x, plant.theta, plant.theta_dot,
                                    plant_feet, plant.fallen, plant.t)

            theta_hat = {s: est[s].theta for s in SIDES} if estimator_on else zero
            x_hat = plant.x.copy()
            x_hat[:, 0] += bias
            x_hat[:, 1] += bias_rate

            x_ref_next = ref.x @ sys.A.T + np.outer(ref.u, sys.B)
            saturated = 0
            limits = []
            for a in range(2):
                # the CoP must stay on the feet both now and at the next tick
                lo_now, hi_now = _support(ref.feet, a, half[a])
                lo_nxt, hi_nxt = _support(nxt.feet, a, half[a])
                supp = (max(lo_now, lo_nxt), min(hi_now, hi_nxt))
                try:
                    limits.append(tube.saturation_limits(x_hat[a] - ref.x[a], x_ref_next[a], 0.0, supp, eu,
                                                         tubes.K, sys))
                except tube.SaturationInfeasibleError:
                    limits.append((-np.inf, np.inf))
                    saturated = 1
            x_next = np.zeros((2, 3))
            jerk = np.zeros(2)
            for a in range(2):
                x_next[a], jerk[a] = tube.stabilize_step(x_hat[a], ref.x[a], ref.u[a], tubes.K, limits[a], sys)
                fb = float(tubes.K @ (x_hat[a] - ref.x[a]))
                if not limits[a][0] <= fb <= limits[a][1]:
                    saturated = 1

            bundle = interface_references(x_next, pcfg.com_height, ref.feet, ref.stance, ref.swing, t, mass,
                                          c.mu, g)
            if pcfg.load_model == "weight":
                # loads follow the reference, which keeps them out of the feedback loop
                c_ref = np.array([ref.x[0, 0], ref.x[1, 0], pcfg.com_height])
                stance_feet = {s: ref.feet[s] for s in ref.stance}
                shares = ref.shares
                loads = weight_loads(shares, stance_feet, c_ref, params)
            else:
                loads = hip_loads(bundle.wrenches, bundle.com.value, params)
                fz = {s: w.force[2] for s, w in bundle.wrenches.items()}
                total_fz = sum(fz.values())
                shares = {s: fz[s] / total_fz for s in fz}

            if estimator_on:
                for s in SIDES:
                    tau_f = approx_flex_torque(loads[s], est[s].theta, est_params[s])
                    est[s] = estimate_deflection(tau_f, est[s], est_params[s], T, c.lpf_cutoff)

            # record the state at t
            p_true = plant.cop(omega_sq)
            s_ref = ref.feet[ref.stance[0]]
            tau = sole_torque(p_true, f_z, s_ref) + c_noise(cfg, len(ref.feet)) * noise[k]
            p_meas = measure_cop(tau, f_z, s_ref)
            p_ref = ref.x[:, 0] - ref.x[:, 2] / omega_sq
            if ref.swing is not None:
                sw = bundle.feet[ref.swing[0]][0]
            else:
                sw = np.array([np.nan, np.nan, np.nan])
            th = plant.theta
            row = {
                "t": t,
                "c_x": plant.x[0, 0], "c_y": plant.x[1, 0], "cd_x": plant.x[0, 1], "cd_y": plant.x[1, 1],
                "cdd_x": plant.x[0, 2], "cdd_y": plant.x[1, 2],
                "chat_x": x_hat[0, 0], "chat_y": x_hat[1, 0], "chatd_x": x_hat[0, 1], "chatd_y": x_hat[1, 1],
                "cref_x": ref.x[0, 0], "cref_y": ref.x[1, 0], "crefd_x": ref.x[0, 1], "crefd_y": ref.x[1, 1],
                "crefdd_x": ref.x[0, 2], "crefdd_y": ref.x[1, 2],
                "p_x": p_true[0], "p_y": p_true[1], "pm_x": p_meas[0], "pm_y": p_meas[1],
                "pref_x": p_ref[0], "pref_y": p_ref[1],
                "v_x": p_true[0], "v_y": p_true[1], "n_x": 0.0, "n_y": 0.0,
                "th_l_x": th["left"][0], "th_l_y": th["left"][1], "th_r_x": th["right"][0],
                "th_r_y": th["right"][1],
                "thhat_l_x": theta_hat["left"][0], "thhat_l_y": theta_hat["left"][1],
                "thhat_r_x": theta_hat["right"][0], "thhat_r_y": theta_hat["right"][1],
                "u_x": jerk[0], "u_y": jerk[1], "uref_x": ref.u[0], "uref_y": ref.u[1],
                "e_x": dist[k, 0], "e_y": dist[k, 1],
                "swing_x": sw[0], "swing_y": sw[1], "swing_z": sw[2],
                "phase": ref.phase, "saturated": saturated, "fall": int(plant.fallen),
            }
            trace.append(row)
            if record_loads:
                out.loads.append(loads)
                rigid = plant.x[:, 0] + estimation_offset(plant.theta, shares, params) if not params.rigid \
                    else plant.x[:, 0].copy()
                out.rigid_com.append(rigid)
                out.stance_feet.append(np.asarray(s_ref, float))

            plant = plant_step(plant, jerk, loads, dist[k], T, omega_sq)

            if not params.rigid:
                # offset of the estimate from the true CoM; its velocity follows
                # by differencing, as a kinematic velocity estimate would
                d_true = estimation_offset(plant.theta, shares, params)
                if estimator_on:
                    d_hat = estimation_offset({s: est[s].theta for s in SIDES}, shares, params)
                else:
                    d_hat = np.zeros(2)
                bias_new = d_true - d_hat
                bias_rate = (bias_new - bias) / T
                bias = bias_new
        except Exception as exc:
            if isinstance(exc, ScenarioError):
                raise
            raise ScenarioError(t, exc) from exc
    trace.meta["fall"] = bool(plant.fallen)
    out.final_feet = dict(nxt.feet)
    return out


def c_noise(cfg: ScenarioConfig, n_contacts: int) -> float:
    return cfg.sensor.cop_noise_sigma * np.sqrt(max(n_contacts, 1))


# ---------------------------------------------------------------- scenarios

def _walk_source(cfg: ScenarioConfig, tubes: TubeSetup, stop: bool):
    w = cfg.walk
    sched, aimed, t_steady = walking_schedule(cfg)
    gcfg = gait_config(cfg)
    y0 = w.initial_feet_y
    feet0 = {"left": (0.0, y0), "right": (0.0, -y0)}
    stop_time = None
    if stop:
        stop_time = t_steady + w.stop_after_steady_steps * gcfg.step_duration
        end = stop_time + w.settle_time + gcfg.step_duration
    else:
        end = sched.end_time + w.settle_time
    src = PlannerSource(cfg, tubes, sched, aimed, feet0, stop_time, w.stop_extra_steps)
    return src, end, t_steady, stop_time


def run_scenario(cfg: ScenarioConfig, record_loads: bool = False) -> RunResult:
    """Run the configured walking scenario on the plant and return its trace."""
    kind = cfg.scenario.kind
    tubes = tube_setup(cfg)
    T = cfg.controller.T
    estimator_on = cfg.scenario.estimator
    meta = {"scenario": kind, "seed": cfg.scenario.seed, "estimator": estimator_on, "mpc": cfg.scenario.mpc,
            "gain": [float(k) for k in tubes.K], "d_max": [float(d) for d in tubes.d_max]}
    if kind == "quasi-static":
        source = PrecomputedSource.from_segments(quasi_static_segments(cfg, estimator_on), T, tubes.sys,
                                                   (cfg.plant.foot_half_length, cfg.plant.foot_half_width))
        n_ticks = len(source)
    elif kind in ("walk-in-place", "dynamic-walk", "stop"):
        if kind == "walk-in-place":
            cfg = cfg.replace(walk={"aimed_velocity": 0.0})
        source, end, t_steady, stop_time = _walk_source(cfg, tubes, kind == "stop")
        n_ticks = int(round(end / T))
        meta.update({"steady_start": t_steady, "schedule_end": source.schedule.end_time})
        if stop_time is not None:
            meta["stop_time"] = stop_time
        if not cfg.scenario.mpc:
            source = PrecomputedSource.record(source, n_ticks + 1)
    else:
        raise ValueError(f"scenario {kind!r} is not a closed-loop walk")
    res = run_closed_loop(cfg, source, n_ticks, tubes, estimator_on, record_loads)
    meta.update({"plans": source.plans, "max_kkt": source.max_kkt})
    if kind in ("dynamic-walk", "walk-in-place", "stop"):
        meta.update(walk_metrics(cfg, res.trace, source, meta))
    if kind == "stop":
        meta.update(stop_metrics(cfg, res.trace, res.final_feet, tubes, meta["stop_time"]))
    res.trace.meta.update(meta)
    return res


def walk_metrics(cfg: ScenarioConfig, trace: SimTrace, source, meta: dict) -> dict:
    gcfg = gait_config(cfg)
    t = trace.array("t")
    cx = trace.array("c_x")
    out = {}
    if meta.get("stop_time") is None and cfg.walk.steady_steps >= 2:
        # whole steps after the ramp, skipping the first steady step and the last one
        t0 = meta["steady_start"] + gcfg.step_duration
        t1 = meta["steady_start"] + (cfg.walk.steady_steps - 1) * gcfg.step_duration
        i0, i1 = np.searchsorted(t, [t0, t1])
        if i1 > i0:
            out["steady_speed"] = float((cx[i1] - cx[i0]) / (t[i1] - t[i0]))
    positions = getattr(source, "positions", None)
    if positions:
        xs = [positions[i][0] for i in sorted(positions)]
        out["step_lengths"] = [float(b - a) for a, b in zip(xs[1:], xs[2:])]
    return out


def _settle_time(t, ok) -> Optional[float]:
    """First time after which ``ok`` holds until the end of the trace."""
    if not ok[-1]:
        return None
    bad = np.flatnonzero(~ok)
    return float(t[0] if bad.size == 0 else t[bad[-1] + 1])


def stop_metrics(cfg: ScenarioConfig, trace: SimTrace, final_feet: dict, tubes: TubeSetup,
                 stop_time: float) -> dict:
    """When the DCM settles in the final support (shrunk by the tube margins) and when the CoM comes to rest."""
    t = trace.array("t")
    omega = np.sqrt(tubes.sys.omega_sq)
    half = (cfg.plant.foot_half_length, cfg.plant.foot_half_width)
    inside = np.ones(t.shape, bool)
    speed = np.zeros(t.shape)
    for a, ax in enumerate("xy"):
        lo, hi = _support(final_feet, a, half[a])
        m = tubes.margins[a]
        xi = trace.array(f"c_{ax}") + trace.array(f"cd_{ax}") / omega
        inside &= (xi >= lo + m) & (xi <= hi - m)
        speed = np.hypot(speed, trace.array(f"cd_{ax}"))
    t_dcm = _settle_time(t, inside)
    t_rest = _settle_time(t, speed < 1e-3)
    return {
        "dcm_settle_time": None if t_dcm is None else t_dcm - stop_time,
        "rest_time": None if t_rest is None else t_rest - stop_time,
    }
