"""Hip-link flexibility: spring-damper deflections, their estimation and the
rigid-equivalent hip used for posture estimation.

Conventions
-----------
* Deflections ``theta = (roll, pitch)`` are rotations about x then y; the
  composed rotation is ``R(theta^yx) = Ry(pitch) @ Rx(roll)``.
* Hip vectors (angles ``q_hip``, rates, joint torques ``tau_hip``) are indexed by
  axis, ``(x, y, z)``; the joint chain composes as ``Rz(q_z) @ Rx(q_x) @ Ry(q_y)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

HALF_PI = np.pi / 2


class DeflectionRangeError(ValueError):
    pass


class GimbalSingularityError(ValueError):
    pass


def rot_x(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rot_zxy(q) -> np.ndarray:
    """``Rz(q_z) Rx(q_x) Ry(q_y)`` for ``q`` indexed ``(x, y, z)``."""
    return rot_z(q[2]) @ rot_x(q[0]) @ rot_y(q[1])


def rot_deflection(theta) -> np.ndarray:
    """``Ry(theta_y) Rx(theta_x)``."""
    return rot_y(theta[1]) @ rot_x(theta[0])


def euler_zxy(R, tol: float = 1e-6) -> np.ndarray:
    """Angles ``(x, y, z)`` with ``rot_zxy(angles) == R``, middle angle in (-pi/2, pi/2)."""
    sx = np.clip(R[2, 1], -1.0, 1.0)
    qx = np.arcsin(sx)
    if abs(abs(qx) - HALF_PI) < tol:
        raise GimbalSingularityError(f"middle angle {qx:.9f} at gimbal lock")
    qy = np.arctan2(-R[2, 0], R[2, 2])
    qz = np.arctan2(-R[0, 1], R[1, 1])
    return np.array([qx, qy, qz])


def _select(i: int) -> np.ndarray:
    S = np.zeros((3, 3))
    S[i, i] = 1.0
    return S


S_X, S_Y, S_Z = _select(0), _select(1), _select(2)


def _embed(theta) -> np.ndarray:
    return np.array([theta[0], theta[1], 0.0])


@dataclass(frozen=True)
class FlexParams:
    """Per-axis (roll, pitch) stiffness and damping of one hip, plus the lever arm."""

    k_f: np.ndarray
    d_f: np.ndarray = None
    l: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.09]))

    def __post_init__(self):
        k = np.broadcast_to(np.asarray(self.k_f, float), (2,)).copy()
        d = 2.0 * np.sqrt(k) if self.d_f is None else np.broadcast_to(np.asarray(self.d_f, float), (2,)).copy()
        if np.any(k <= 0):
            raise ValueError(f"stiffness must be positive, got {k}")
        if np.any(d < 0):
            raise ValueError(f"damping must be non-negative, got {d}")
        object.__setattr__(self, "k_f", k)
        object.__setattr__(self, "d_f", d)
        object.__setattr__(self, "l", np.asarray(self.l, float))


@dataclass(frozen=True)
class FlexState:
    theta: np.ndarray = field(default_factory=lambda: np.zeros(2))
    theta_dot: np.ndarray = field(default_factory=lambda: np.zeros(2))
    lpf_state: np.ndarray = field(default_factory=lambda: np.zeros(2))
    theta_prev: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        for name in ("theta", "theta_dot", "lpf_state", "theta_prev"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), float))
        if not np.all(np.isfinite(self.theta)) or np.any(np.abs(self.theta) >= HALF_PI):
            raise DeflectionRangeError(f"deflection {self.theta} outside the small-deflection range")


@dataclass(frozen=True)
class HipConfiguration:
    q_hip: np.ndarray
    omega_hip: np.ndarray = field(default_factory=lambda: np.zeros(3))
    tau_hip: np.ndarray = field(default_factory=lambda: np.zeros(3))
    f_hip: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        for name in ("q_hip", "omega_hip", "tau_hip", "f_hip"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), float))


def flex_torque(theta, theta_dot, p: FlexParams) -> np.ndarray:
    return -p.k_f * np.asarray(theta, float) - p.d_f * np.asarray(theta_dot, float)


def lpf_coefficient(dt: float, cutoff_hz: float) -> float:
    """Smoothing factor of a discretized first-order RC low-pass."""
    rc = 1.0 / (2.0 * np.pi * cutoff_hz)
    return dt / (dt + rc)


def estimate_deflection(tau_f, state: FlexState, p: FlexParams, dt: float,
                        lpf_cutoff: float = 20.0) -> FlexState:
    """Implicit spring-damper inversion for the deflection, filtered rate."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    tau_f = np.asarray(tau_f, float)
    theta0 = state.theta
    theta = (p.d_f * theta0 - tau_f * dt) / (p.k_f * dt + p.d_f)
    a = lpf_coefficient(dt, lpf_cutoff)
    rate = state.lpf_state + a * ((theta - theta0) / dt - state.lpf_state)
    return FlexState(theta=theta, theta_dot=rate, lpf_state=rate, theta_prev=theta0)


def cross3(a, b) -> np.ndarray:
    """Cross product of two 3-vectors (cheaper than ``np.cross`` for single vectors)."""
    return np.array([a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]])


def hip_torque_part(hip: HipConfiguration) -> np.ndarray:
    """Deflection-independent part of :func:`approx_flex_torque` (x, y)."""
    q, tau = hip.q_hip, hip.tau_hip
    Rz = rot_z(q[2])
    Rzx = Rz @ rot_x(q[0])
    return (Rz @ S_X @ tau + Rzx @ S_Y @ tau)[:2]


def lever_torque_part(hip: HipConfiguration, theta, p: FlexParams) -> np.ndarray:
    """Moment of the hip force about the deflection point (x, y)."""
    return cross3(rot_deflection(theta) @ p.l, hip.f_hip)[:2]


def approx_flex_torque(hip: HipConfiguration, theta, p: FlexParams) -> np.ndarray:
    """Flexing torque (x, y) approximated from the commanded hip torque and force."""
    return hip_torque_part(hip) + lever_torque_part(hip, theta, p)


def velocity_map(q) -> np.ndarray:
    """Matrix taking hip rates ``(x, y, z)`` to angular velocity for the z-x-y chain."""
    Rz = rot_z(q[2])
    return S_Z + Rz @ S_X + Rz @ rot_x(q[0]) @ S_Y


def equivalent_hip(hip: HipConfiguration, flex: FlexState, tol: float = 1e-6):
    """Rigid 3-joint hip reproducing the rotation of the 5-rotation flexible chain.

    Returns ``(q_hat, q_hat_dot)``, both indexed ``(x, y, z)``.
    """
    theta = flex.theta
    R_hat = rot_deflection(theta) @ rot_zxy(hip.q_hip)
    q_hat = euler_zxy(R_hat, tol)
    td = _embed(flex.theta_dot)
    omega_hat = S_Y @ td + rot_y(theta[1]) @ S_X @ td + rot_deflection(theta) @ hip.omega_hip
    E = velocity_map(q_hat)
    q_hat_dot = np.linalg.solve(E, omega_hat)
    return q_hat, q_hat_dot


def lever_offset(theta, l) -> np.ndarray:
    """Rigid-model error ``R(theta^yx) l - l`` caused by the deflection."""
    l = np.asarray(l, float)
    return rot_deflection(theta) @ l - l


def lever_arm_correction(thetas, params, s_fk, c_fk, leg_masses, total_mass):
    """Correct forward-kinematics feet and CoM for the lever-arm error of each leg.

    ``thetas``, ``params``, ``s_fk`` and ``leg_masses`` are per-leg sequences.
    Returns ``(feet, com)``.
    """
    if not total_mass > 0:
        raise ValueError("total mass must be positive")
    deltas = [lever_offset(th, p.l) for th, p in zip(thetas, params)]
    feet = [np.asarray(s, float) + dl for s, dl in zip(s_fk, deltas)]
    com = np.asarray(c_fk, float) + sum(m * dl for m, dl in zip(leg_masses, deltas)) / total_mass
    return feet, com
