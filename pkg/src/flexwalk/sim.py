"""Reduced flexible plant: triple-integrator CoM on hips with elastic roll/pitch deflections.

The feet never slide. A hip deflection rotates the leg below it, so the rigid
kinematic estimate of the CoM relative to the stance foot is off by

    D(theta) = sum_k w_k Delta_k - sum_j (m_j / m) Delta_j,   Delta = R(theta^yx) l - l,

where ``w_k`` are the normal-force shares of the feet on the ground and ``l`` is
the effective lever from the deflection point to the sole. A controller that
believes the rigid estimate therefore places the true CoP off its reference.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .centroidal import DEFAULT_COM_HEIGHT, DEFAULT_GRAVITY, S_ROT, SystemMatrices
from .flex import FlexParams, HipConfiguration, approx_flex_torque, cross3, hip_torque_part, lever_offset

SIDES = ("left", "right")
SIDE_SIGN = {"left": 1.0, "right": -1.0}


class SimulationBlowUpError(RuntimeError):
    pass


class NoContactError(ValueError):
    pass


@dataclass(frozen=True)
class PlantParams:
    flex: Optional[dict] = None  # side -> FlexParams; None for a rigid robot
    J_eff: float = 1.0
    total_mass: float = 95.0
    leg_mass: float = 12.0
    com_height: float = DEFAULT_COM_HEIGHT
    gravity: float = DEFAULT_GRAVITY
    hip_half_width: float = 0.085
    support_lever: tuple = (0.0, 0.0, -0.9)
    foot_half_length: float = 0.11
    foot_half_width: float = 0.065
    sim_dt: float = 1e-3

    def __post_init__(self):
        if not 0 < self.sim_dt <= 1e-3:
            raise ValueError(f"sim_dt must lie in (0, 1e-3], got {self.sim_dt}")
        if not self.J_eff > 0:
            raise ValueError("J_eff must be positive")
        if not self.total_mass > 2 * self.leg_mass >= 0:
            raise ValueError("total mass must exceed the two leg masses")

    @property
    def rigid(self) -> bool:
        return self.flex is None


@dataclass(frozen=True)
class FlexibleLipPlant:
    params: PlantParams
    x: np.ndarray  # (2, 3) true centroidal state
    theta: dict  # side -> (2,) true deflection
    theta_dot: dict
    feet: dict  # side -> (x, y) or None while swinging
    fallen: bool = False
    t: float = 0.0

    @classmethod
    def standing(cls, params: PlantParams, feet: dict, x0=None) -> "FlexibleLipPlant":
        x = np.zeros((2, 3)) if x0 is None else np.asarray(x0, float).copy()
        zeros = {s: np.zeros(2) for s in SIDES}
        return cls(params, x, dict(zeros), dict(zeros),
                   {s: (None if v is None else np.asarray(v, float)) for s, v in feet.items()})

    def support_interval(self, axis: int) -> tuple:
        h = self.params.foot_half_length if axis == 0 else self.params.foot_half_width
        coords = [f[axis] for f in self.feet.values() if f is not None]
        if not coords:
            raise NoContactError("no foot on the ground")
        return min(coords) - h, max(coords) + h

    def cop(self, omega_sq: float, n=(0.0, 0.0)) -> np.ndarray:
        """True CoP ``V x + n`` per axis."""
        return self.x[:, 0] - self.x[:, 2] / omega_sq + np.asarray(n, float)


def hip_point(c, side: str, params: PlantParams) -> np.ndarray:
    return np.array([c[0], c[1] + SIDE_SIGN[side] * params.hip_half_width, params.com_height])


def _sole_distance(p, s, half_sizes) -> float:
    d = np.maximum(np.abs(np.asarray(p, float)[:2] - np.asarray(s, float)[:2]) - half_sizes, 0.0)
    return float(np.hypot(d[0], d[1]))


def support_shares(p, feet: dict, half_sizes=(0.0, 0.0)) -> dict:
    """Fraction of the weight on each stance foot for a CoP ``p``.

    A CoP on one sole puts all the weight on that foot. Between the soles the
    split follows the distances to them, so a transfer hands the load over
    continuously and with a continuous rate.
    """
    sides = list(feet)
    if len(sides) == 1:
        return {sides[0]: 1.0}
    h = np.asarray(half_sizes, float)
    da, db = (_sole_distance(p, feet[s], h) for s in sides)
    r = 0.5 if da + db == 0.0 else da / (da + db)
    r = r * r * (3.0 - 2.0 * r)
    return {sides[0]: 1.0 - r, sides[1]: r}


def weight_loads(shares: dict, feet: dict, c, params: PlantParams) -> dict:
    """Hip loads from the supported weight alone: each stance foot pushes up its
    share of the weight at its center. A swing hip carries nothing."""
    weight = params.total_mass * params.gravity
    out = {}
    for side in SIDES:
        if side not in shares:
            out[side] = HipConfiguration(np.zeros(3))
            continue
        f = np.array([0.0, 0.0, shares[side] * weight])
        s = np.asarray(feet[side], float)
        r = np.array([s[0], s[1], 0.0]) - hip_point(c, side, params)
        out[side] = HipConfiguration(np.zeros(3), tau_hip=cross3(r, f), f_hip=f)
    return out


def hip_loads(wrenches: dict, c, params: PlantParams) -> dict:
    """Hip torque and force carried by each leg: the moment of its foot wrench
    about the hip point. A swing leg hangs below its hip and loads it with nothing."""
    out = {}
    for side in SIDES:
        w = wrenches.get(side)
        if w is None:
            out[side] = HipConfiguration(np.zeros(3))
            continue
        h = hip_point(c, side, params)
        tau = cross3(w.point - h, w.force) + w.torque
        out[side] = HipConfiguration(np.zeros(3), tau_hip=tau, f_hip=w.force)
    return out


def flexing_torque(loads: dict, thetas: dict, flex: dict) -> dict:
    return {s: approx_flex_torque(loads[s], thetas[s], flex[s]) for s in SIDES}


def estimation_offset(thetas: dict, shares: dict, params: PlantParams) -> np.ndarray:
    """Planar offset ``D(theta)`` of the rigid CoM estimate from the true CoM."""
    th = np.array([thetas[s] for s in SIDES])
    l = np.asarray(params.support_lever, float)
    deltas = _lever_offsets(th, l)
    w = np.array([shares.get(s, 0.0) for s in SIDES]) - params.leg_mass / params.total_mass
    return w @ deltas


def _lever_offsets(theta, l) -> np.ndarray:
    """Planar part of ``R(theta^yx) l - l`` for stacked deflections (rows)."""
    ca, sa = np.cos(theta[:, 0]), np.sin(theta[:, 0])
    cb, sb = np.cos(theta[:, 1]), np.sin(theta[:, 1])
    vz = sa * l[1] + ca * l[2]
    out = np.empty((theta.shape[0], 2))
    out[:, 0] = cb * l[0] + sb * vz - l[0]
    out[:, 1] = ca * l[1] - sa * l[2] - l[1]
    return out


def _deflection_substep(theta, theta_dot, load, k, d, J: float, dt: float):
    """Linearly implicit Euler step of ``J th'' = load - k th - d th'``.

    Implicit in the spring and damper, so the stored energy of the unloaded
    subsystem never grows whatever the stiffness. Works elementwise on arrays.
    """
    den = J + dt * d + dt * dt * k
    theta_dot_new = (J * theta_dot + dt * (load - k * theta)) / den
    theta_new = theta + dt * theta_dot_new
    return theta_new, theta_dot_new


def _lever_moment(theta, l, f):
    """``(R(theta^yx) l x f)[:2]`` row-wise for stacked deflections, levers and forces."""
    ca, sa = np.cos(theta[:, 0]), np.sin(theta[:, 0])
    cb, sb = np.cos(theta[:, 1]), np.sin(theta[:, 1])
    vy = ca * l[:, 1] - sa * l[:, 2]
    vz0 = sa * l[:, 1] + ca * l[:, 2]
    rx = cb * l[:, 0] + sb * vz0
    rz = -sb * l[:, 0] + cb * vz0
    out = np.empty((theta.shape[0], 2))
    out[:, 0] = vy * f[:, 2] - rz * f[:, 1]
    out[:, 1] = rz * f[:, 0] - rx * f[:, 2]
    return out


def plant_step(plant: FlexibleLipPlant, jerk, loads: Optional[dict], disturbance, T: float,
               omega_sq: float, n=(0.0, 0.0)) -> FlexibleLipPlant:
    """Advance the plant by one control period ``T`` in ``sim_dt`` sub-steps.

    ``loads`` maps side to the commanded :class:`HipConfiguration`; the
    deflection sees the opposite of the flexing torque these commands produce.
    """
    p = plant.params
    jerk = np.asarray(jerk, float) + np.asarray(disturbance, float)
    if not np.all(np.isfinite(jerk)):
        raise SimulationBlowUpError(f"non-finite jerk at t={plant.t:.4f}")
    n_sub = max(1, int(round(T / p.sim_dt)))
    dt = T / n_sub
    sub = SystemMatrices(dt, omega_sq)

    # CoM: exact sub-steps, CoP checked at each
    xs = np.empty((n_sub, 2, 3))
    x = plant.x
    for i in range(n_sub):
        x = x @ sub.A.T + np.outer(jerk, sub.B)
        xs[i] = x
    cop = xs[:, :, 0] - xs[:, :, 2] / omega_sq + np.asarray(n, float)
    fallen = plant.fallen
    for a in range(2):
        lo, hi = plant.support_interval(a)
        if np.any(cop[:, a] < lo - 1e-9) or np.any(cop[:, a] > hi + 1e-9):
            fallen = True

    theta = {s: plant.theta[s] for s in SIDES}
    theta_dot = {s: plant.theta_dot[s] for s in SIDES}
    if not p.rigid:
        th = np.array([plant.theta[s] for s in SIDES])
        thd = np.array([plant.theta_dot[s] for s in SIDES])
        k = np.array([p.flex[s].k_f for s in SIDES])
        d = np.array([p.flex[s].d_f for s in SIDES])
        base = np.array([hip_torque_part(loads[s]) for s in SIDES])
        levers = np.array([p.flex[s].l for s in SIDES])
        forces = np.array([loads[s].f_hip for s in SIDES])
        loaded = bool(np.any(forces))
        for _ in range(n_sub):
            tau_f = base + _lever_moment(th, levers, forces) if loaded else base
            th, thd = _deflection_substep(th, thd, -tau_f, k, d, p.J_eff, dt)
        theta = {s: th[i] for i, s in enumerate(SIDES)}
        theta_dot = {s: thd[i] for i, s in enumerate(SIDES)}
        if not np.all(np.isfinite(th)):
            raise SimulationBlowUpError(f"non-finite deflection at t={plant.t + T:.4f}")
        if np.any(np.abs(th) >= np.pi / 2):
            raise SimulationBlowUpError(f"hip deflection {th.tolist()} beyond the model range")
    if not np.all(np.isfinite(x)):
        raise SimulationBlowUpError(f"non-finite plant state at t={plant.t + T:.4f}")
    return replace(plant, x=x, theta=theta, theta_dot=theta_dot, fallen=fallen, t=plant.t + T)


def measure_cop(tau_sole, f_z: float, s) -> np.ndarray:
    """CoP from a sole torque (about the foot center) and normal force: ``s + S tau / f_z``."""
    if not f_z > 0:
        raise NoContactError(f"normal force {f_z} N does not indicate contact")
    return np.asarray(s, float)[:2] + S_ROT @ np.asarray(tau_sole, float)[:2] / f_z


def sole_torque(p, f_z: float, s) -> np.ndarray:
    """Sole torque producing the CoP ``p`` (inverse of :func:`measure_cop`)."""
    return -S_ROT @ (np.asarray(p, float) - np.asarray(s, float)[:2]) * f_z


def error_duration_profile(errors, n_points: Optional[int] = None):
    """Sorted-magnitude curve: fraction of time vs. error bound held during that fraction.

    Returns ``(fractions, bounds)``; ``bounds[i]`` is the smallest error not
    exceeded during ``fractions[i]`` of the samples.
    """
    e = np.sort(np.abs(np.asarray(errors, float).ravel()))
    if e.size == 0:
        raise ValueError("empty trace")
    fractions = np.arange(1, e.size + 1) / e.size
    if n_points is not None and n_points < e.size:
        idx = np.unique(np.ceil(np.linspace(1, e.size, n_points)).astype(int) - 1)
        return fractions[idx], e[idx]
    return fractions, e


# ---------------------------------------------------------------- trace

TRACE_COLUMNS = [
    ("t", "s"),
    ("c_x", "m"), ("c_y", "m"), ("cd_x", "m/s"), ("cd_y", "m/s"), ("cdd_x", "m/s^2"), ("cdd_y", "m/s^2"),
    ("chat_x", "m"), ("chat_y", "m"), ("chatd_x", "m/s"), ("chatd_y", "m/s"),
    ("cref_x", "m"), ("cref_y", "m"), ("crefd_x", "m/s"), ("crefd_y", "m/s"),
    ("crefdd_x", "m/s^2"), ("crefdd_y", "m/s^2"),
    ("p_x", "m"), ("p_y", "m"), ("pm_x", "m"), ("pm_y", "m"), ("pref_x", "m"), ("pref_y", "m"),
    ("v_x", "m"), ("v_y", "m"), ("n_x", "m"), ("n_y", "m"),
    ("th_l_x", "rad"), ("th_l_y", "rad"), ("th_r_x", "rad"), ("th_r_y", "rad"),
    ("thhat_l_x", "rad"), ("thhat_l_y", "rad"), ("thhat_r_x", "rad"), ("thhat_r_y", "rad"),
    ("u_x", "m/s^3"), ("u_y", "m/s^3"), ("uref_x", "m/s^3"), ("uref_y", "m/s^3"),
    ("e_x", "m/s^3"), ("e_y", "m/s^3"),
    ("swing_x", "m"), ("swing_y", "m"), ("swing_z", "m"),
    ("phase", "-"), ("saturated", "-"), ("fall", "-"),
]
COLUMN_NAMES = [c for c, _ in TRACE_COLUMNS]
FLAG_COLUMNS = ("saturated", "fall")


@dataclass
class SimTrace:
    """Column store, one row per stabilizer tick."""

    columns: dict = field(default_factory=lambda: {c: [] for c in COLUMN_NAMES})
    meta: dict = field(default_factory=dict)

    def append(self, row: dict):
        missing = set(COLUMN_NAMES) - set(row)
        if missing:
            raise KeyError(f"trace row lacks columns {sorted(missing)}")
        for c in COLUMN_NAMES:
            self.columns[c].append(row[c])

    def __len__(self):
        return len(self.columns["t"])

    def array(self, name: str) -> np.ndarray:
        return np.asarray(self.columns[name], float)

    def cop_error(self) -> np.ndarray:
        """Planar distance between true and reference CoP."""
        return np.hypot(self.array("p_x") - self.array("pref_x"), self.array("p_y") - self.array("pref_y"))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMN_NAMES)
        w.writerow([u for _, u in TRACE_COLUMNS])
        cols = [self.columns[c] for c in COLUMN_NAMES]
        for row in zip(*cols):
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "SimTrace":
        rows = list(csv.reader(io.StringIO(text)))
        header, body = rows[0], rows[2:]
        if header != COLUMN_NAMES:
            raise ValueError("CSV header does not match the trace schema")
        tr = cls()
        for r in body:
            for c, v in zip(header, r):
                tr.columns[c].append(v if c == "phase" else int(v) if c in FLAG_COLUMNS else float(v))
        return tr

    def summary(self) -> dict:
        err = self.cop_error()
        q = np.quantile(err, [0.5, 0.9, 1.0]) if len(err) else [np.nan] * 3
        out = {
            "ticks": len(self),
            "duration": float(self.columns["t"][-1]) if len(self) else 0.0,
            "fall": bool(any(self.columns["fall"])),
            "cop_error_median": float(q[0]),
            "cop_error_p90": float(q[1]),
            "cop_error_max": float(q[2]),
            "saturated_fraction": float(np.mean(self.columns["saturated"])) if len(self) else 0.0,
        }
        out.update(self.meta)
        return out

    def summary_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True)
