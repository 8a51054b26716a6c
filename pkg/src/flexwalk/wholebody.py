"""Task references derived from the stabilized centroidal command.

Swing-foot splines, the waist-yaw bisector, the generic task feedback law and
the contact-wrench distribution. The CoM acceleration handed to the wrench
distribution is the same one published as the CoM task reference, so the two
never disagree.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .centroidal import DEFAULT_GRAVITY
from .flex import cross3
from .gait_mpc import SupportPhase
from .qp import solve_qp

QUINTIC_PEAK_SPEED = 15.0 / 8.0


class InfeasibleSwingError(ValueError):
    pass


class DistributionInfeasibleError(RuntimeError):
    pass


# ---------------------------------------------------------------- splines

def _quintic(p0, v0, a0, p1, v1, a1, T) -> np.ndarray:
    """Coefficients (ascending powers, one column per dimension) of a quintic on [0, T]."""
    p0, v0, a0, p1, v1, a1 = (np.atleast_1d(np.asarray(v, float)) for v in (p0, v0, a0, p1, v1, a1))
    M = np.array([
        [T**3, T**4, T**5],
        [3 * T**2, 4 * T**3, 5 * T**4],
        [6 * T, 12 * T**2, 20 * T**3],
    ])
    rhs = np.vstack([
        p1 - (p0 + v0 * T + 0.5 * a0 * T**2),
        v1 - (v0 + a0 * T),
        a1 - a0,
    ])
    c345 = np.linalg.solve(M, rhs)
    return np.vstack([p0, v0, 0.5 * a0, c345])


def _poly_eval(coef, tau):
    """Position, velocity and acceleration of quintic coefficients at ``tau``."""
    t2, t3 = tau * tau, tau * tau * tau
    powers = np.array([1.0, tau, t2, t3, t2 * t2, t3 * t2])
    dpow = np.array([0.0, 1.0, 2 * tau, 3 * t2, 4 * t3, 5 * t2 * t2])
    ddpow = np.array([0.0, 0.0, 2.0, 6 * tau, 12 * t2, 20 * t3])
    return powers @ coef, dpow @ coef, ddpow @ coef


def _peak_speed(coef, T, samples: int = 401) -> float:
    taus = np.linspace(0.0, T, samples)
    return max(float(np.linalg.norm(_poly_eval(coef, t)[1])) for t in taus)


@dataclass(frozen=True)
class SwingTrajectory:
    """Foot path over ``[t_start, t_land]``: quintic horizontally, two quintics vertically."""

    t_start: float
    t_land: float
    apex_height: float
    t_seg: float  # start of the current horizontal segment (later than t_start after a re-target)
    coef_xy: np.ndarray = field(repr=False)
    target: np.ndarray = field(default=None)

    def __post_init__(self):
        half = (self.t_land - self.t_start) / 2.0
        h = self.apex_height
        object.__setattr__(self, "_rise", _quintic(0.0, 0.0, 0.0, h, 0.0, 0.0, half))
        object.__setattr__(self, "_fall", _quintic(h, 0.0, 0.0, 0.0, 0.0, 0.0, half))

    def _vertical(self, t):
        half = (self.t_land - self.t_start) / 2.0
        tau = t - self.t_start
        if tau <= half:
            return _poly_eval(self._rise, tau)
        return _poly_eval(self._fall, tau - half)

    def evaluate(self, t: float):
        """``(position, velocity, acceleration)`` as 3-vectors at time ``t`` (clamped to the swing)."""
        t = min(max(t, self.t_start), self.t_land)
        pxy, vxy, axy = _poly_eval(self.coef_xy, t - self.t_seg)
        pz, vz, az = self._vertical(t)
        return (np.array([pxy[0], pxy[1], pz[0]]),
                np.array([vxy[0], vxy[1], vz[0]]),
                np.array([axy[0], axy[1], az[0]]))

    def peak_horizontal_speed(self) -> float:
        return _peak_speed(self.coef_xy, self.t_land - self.t_seg)

    def retarget(self, t: float, s_to, max_speed: Optional[float] = None) -> "SwingTrajectory":
        """New path leaving from the current state at ``t`` and landing on ``s_to`` on time."""
        s_to = np.asarray(s_to, float)[:2]
        if not self.t_start <= t < self.t_land:
            raise InfeasibleSwingError(f"re-target at {t} outside the swing [{self.t_start}, {self.t_land})")
        p, v, a = _poly_eval(self.coef_xy, t - self.t_seg)
        T = self.t_land - t
        coef = _quintic(p, v, a, s_to, np.zeros(2), np.zeros(2), T)
        out = SwingTrajectory(self.t_start, self.t_land, self.apex_height, t, coef, s_to)
        if max_speed is not None and out.peak_horizontal_speed() > max_speed + 1e-12:
            raise InfeasibleSwingError(
                f"re-targeted swing needs {out.peak_horizontal_speed():.4g} m/s > {max_speed} m/s")
        return out


def swing_spline(s_from, s_to, t_start: float, t_land: float, apex_height: float = 0.05,
                 max_swing_speed: Optional[float] = None) -> SwingTrajectory:
    """Swing from ``s_from`` to ``s_to`` with zero velocity and acceleration at both ends."""
    T = t_land - t_start
    if not T > 0:
        raise ValueError(f"swing duration must be positive, got {T}")
    if not apex_height > 0:
        raise ValueError(f"apex height must be positive, got {apex_height}")
    a = np.asarray(s_from, float)[:2]
    b = np.asarray(s_to, float)[:2]
    peak = QUINTIC_PEAK_SPEED * float(np.linalg.norm(b - a)) / T
    if max_swing_speed is not None and peak > max_swing_speed + 1e-12:
        raise InfeasibleSwingError(f"step needs {peak:.4g} m/s > max swing speed {max_swing_speed} m/s")
    coef = _quintic(a, np.zeros(2), np.zeros(2), b, np.zeros(2), np.zeros(2), T)
    return SwingTrajectory(t_start, t_land, apex_height, t_start, coef, b)


# ---------------------------------------------------------------- tasks

@dataclass(frozen=True)
class TaskReference:
    """Desired value, rate and acceleration of a task with PD gains.

    The feedback law is applied with the gains as given, so stabilizing gains
    are negative.
    """

    value: np.ndarray
    rate: np.ndarray
    accel: np.ndarray
    kp: float = 0.0
    kd: float = 0.0

    def __post_init__(self):
        for name in ("value", "rate", "accel"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), float))
        if not (np.isfinite(self.kp) and np.isfinite(self.kd)):
            raise ValueError("task gains must be finite")


def task_feedback(gamma, gamma_dot, ref: TaskReference) -> np.ndarray:
    """``kp (gamma - value) + kd (gamma_dot - rate) + accel``."""
    gamma = np.asarray(gamma, float)
    gamma_dot = np.asarray(gamma_dot, float)
    return ref.kp * (gamma - ref.value) + ref.kd * (gamma_dot - ref.rate) + ref.accel


def waist_yaw_reference(left_yaw: float, right_yaw: float) -> float:
    """Bisector of the two foot yaws on the circle, in (-pi, pi].

    Measured from the right foot toward the left one; when the feet point in
    opposite directions this picks the bisector on the left foot's
    counter-clockwise side of the right foot.
    """
    delta = left_yaw - right_yaw
    diff = math.atan2(math.sin(delta), math.cos(delta))
    if diff <= -math.pi + 1e-15:
        diff = math.pi
    mid = right_yaw + diff / 2.0
    yaw = math.atan2(math.sin(mid), math.cos(mid))
    return math.pi if yaw <= -math.pi + 1e-15 else yaw


# ---------------------------------------------------------------- wrenches

@dataclass(frozen=True)
class Wrench:
    """Force and torque, the torque taken about ``point``."""

    force: np.ndarray
    torque: np.ndarray
    point: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        for name in ("force", "torque", "point"):
            v = np.asarray(getattr(self, name), float)
            if v.shape != (3,) or not np.all(np.isfinite(v)):
                raise ValueError(f"wrench {name} must be a finite 3-vector, got {v}")
            object.__setattr__(self, name, v)

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.force, self.torque])


def _skew(r) -> np.ndarray:
    x, y, z = r
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _foot_point(f) -> np.ndarray:
    f = np.asarray(f, float)
    return np.array([f[0], f[1], f[2] if f.size > 2 else 0.0])


def newton_euler_matrix(points, c) -> np.ndarray:
    """6 x 6n map from stacked foot wrenches (about their points) to the total wrench about ``c``."""
    blocks = []
    for r in points:
        blk = np.zeros((6, 6))
        blk[:3, :3] = np.eye(3)
        blk[3:, :3] = _skew(np.asarray(r, float) - np.asarray(c, float))
        blk[3:, 3:] = np.eye(3)
        blocks.append(blk)
    return np.hstack(blocks)


def _cone_rows(n: int, mu: float) -> np.ndarray:
    """Rows ``G`` with ``G phi >= 0`` for unilaterality and the inscribed 4-facet pyramid."""
    mu_in = mu / np.sqrt(2.0)
    rows = []
    for i in range(n):
        o = 6 * i
        for ax in (0, 1):
            for sgn in (1.0, -1.0):
                r = np.zeros(6 * n)
                r[o + 2] = mu_in
                r[o + ax] = -sgn
                rows.append(r)
        r = np.zeros(6 * n)
        r[o + 2] = 1.0
        rows.append(r)
    return np.array(rows)


def distribute_wrench(c_des, c_ddot_des, L_dot_des, phase: SupportPhase, mass: float,
                      mu: float = 0.7, gravity: float = DEFAULT_GRAVITY,
                      weights=(1.0, 1.0)) -> list:
    """Contact wrenches (about each foot center, in ``phase.feet`` order) realizing the
    desired CoM acceleration and angular-momentum rate.

    Newton: ``sum f = m (c_ddot - g)``; Euler about the CoM:
    ``sum (r - c) x f + tau = L_dot``. One foot gives the unique solution; two
    feet give the weighted minimum-norm solution inside the friction pyramids.
    """
    if not mass > 0:
        raise ValueError("mass must be positive")
    c = np.asarray(c_des, float)
    acc = np.asarray(c_ddot_des, float)
    total = np.concatenate([mass * (acc + np.array([0.0, 0.0, gravity])), np.asarray(L_dot_des, float)])
    if not total[2] > 0:
        raise DistributionInfeasibleError(f"total normal force {total[2]:.6g} N is not positive")
    points = [_foot_point(f) for f in phase.feet]
    n = len(points)
    G = _cone_rows(n, mu)
    A = newton_euler_matrix(points, c)

    if n == 1:
        # invert the single block
        r = points[0] - c
        f = total[:3]
        tau = total[3:] - cross3(r, f)
        phi = np.concatenate([f, tau])
        if np.any(G @ phi < -1e-9 * max(1.0, abs(total[2]))):
            raise DistributionInfeasibleError("single-support wrench outside the friction pyramid")
        return [Wrench(f, tau, points[0])]

    w = np.tile(np.repeat(np.asarray(weights, float), 3), n)
    if np.any(w <= 0):
        raise ValueError("wrench weights must be positive")
    Winv = 1.0 / w
    # weighted minimum norm: phi = W^-1 A' (A W^-1 A')^-1 b
    phi = Winv * (A.T @ np.linalg.solve((A * Winv) @ A.T, total))
    if np.any(G @ phi < -1e-12 * total[2]):
        try:
            res = solve_qp(np.diag(w), np.zeros(6 * n), A_eq=A, b_eq=total, A_in=G, b_in=np.zeros(G.shape[0]))
        except Exception as exc:
            raise DistributionInfeasibleError(f"no wrench split inside the friction pyramids: {exc}") from None
        phi = res.z
        if np.max(np.abs(A @ phi - total)) > 1e-8 * max(1.0, np.abs(total).max()):
            raise DistributionInfeasibleError("wrench split violates Newton-Euler equations")
    return [Wrench(phi[6 * i:6 * i + 3], phi[6 * i + 3:6 * i + 6], points[i]) for i in range(n)]


# ---------------------------------------------------------------- bundle

@dataclass
class ReferenceBundle:
    com: TaskReference
    feet: dict  # side -> (position, velocity, acceleration)
    waist_yaw: float
    wrenches: dict  # side -> Wrench (stance feet only)


def interface_references(x_next, c_z: float, feet: dict, phase_sides: tuple, swing: Optional[tuple],
                         t: float, mass: float, mu: float = 0.7, gravity: float = DEFAULT_GRAVITY,
                         foot_yaws=(0.0, 0.0), com_gains=(0.0, 0.0),
                         wrench_weights=(1.0, 1.0)) -> ReferenceBundle:
    """Assemble CoM, feet, waist and wrench references for one control tick.

    ``x_next`` holds the stabilized state per horizontal axis (2 x 3). ``feet`` maps
    ``"left"``/``"right"`` to the planar placements of the feet on the ground,
    ``phase_sides`` lists the stance sides and ``swing`` is ``(side, SwingTrajectory)``
    or ``None``.
    """
    x_next = np.asarray(x_next, float)
    value = np.array([x_next[0, 0], x_next[1, 0], c_z])
    rate = np.array([x_next[0, 1], x_next[1, 1], 0.0])
    accel = np.array([x_next[0, 2], x_next[1, 2], 0.0])
    com = TaskReference(value, rate, accel, *com_gains)

    refs = {}
    for side, s in feet.items():
        refs[side] = (_foot_point(s), np.zeros(3), np.zeros(3))
    if swing is not None:
        side, traj = swing
        refs[side] = traj.evaluate(t)

    yaw = waist_yaw_reference(*foot_yaws)
    phase = SupportPhase("single" if len(phase_sides) == 1 else "double",
                         tuple(np.asarray(feet[s], float) for s in phase_sides), 0.0)
    # The wrench uses exactly the CoM task acceleration.
    ws = distribute_wrench(com.value, com.accel, np.zeros(3), phase, mass, mu, gravity, wrench_weights)
    return ReferenceBundle(com, refs, yaw, dict(zip(phase_sides, ws)))
