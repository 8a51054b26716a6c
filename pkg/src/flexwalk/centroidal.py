"""Linearized centroidal dynamics driven by piecewise-constant CoM jerk.

Each horizontal axis is an independent triple integrator ``x = (c, c_dot, c_ddot)``
sharing the same :class:`SystemMatrices`. The vertical coordinate only enters
through :func:`bias_term`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

DEFAULT_COM_HEIGHT = 0.87
DEFAULT_GRAVITY = 9.81

# pi/2 rotation in the horizontal plane
S_ROT = np.array([[0.0, -1.0], [1.0, 0.0]])


class DomainError(ValueError):
    """An argument lies outside the domain of a formula."""


class DegenerateContactError(ValueError):
    """The contact set carries no vertical load."""


@dataclass(frozen=True)
class CentroidalState:
    """CoM position, velocity and acceleration along one horizontal axis."""

    c: float = 0.0
    c_dot: float = 0.0
    c_ddot: float = 0.0

    def __post_init__(self):
        if not np.all(np.isfinite([self.c, self.c_dot, self.c_ddot])):
            raise DomainError(f"non-finite centroidal state {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.c, self.c_dot, self.c_ddot])

    @classmethod
    def from_array(cls, x) -> "CentroidalState":
        return cls(float(x[0]), float(x[1]), float(x[2]))


@dataclass(frozen=True)
class SystemMatrices:
    T: float
    omega_sq: float
    A: np.ndarray = field(init=False, repr=False)
    B: np.ndarray = field(init=False, repr=False)
    V: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not self.T > 0:
            raise DomainError(f"sampling period must be positive, got {self.T}")
        if not self.omega_sq > 0:
            raise DomainError(f"omega^2 must be positive, got {self.omega_sq}")
        T = self.T
        A = np.array([[1.0, T, T * T / 2.0], [0.0, 1.0, T], [0.0, 0.0, 1.0]])
        B = np.array([T**3 / 6.0, T * T / 2.0, T])
        V = np.array([1.0, 0.0, -1.0 / self.omega_sq])
        for name, arr in (("A", A), ("B", B), ("V", V)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def omega(self) -> float:
        return float(np.sqrt(self.omega_sq))

    @property
    def VB(self) -> float:
        return float(self.V @ self.B)

    @classmethod
    def from_height(cls, T: float, c_z: float = DEFAULT_COM_HEIGHT,
                    g: float = DEFAULT_GRAVITY) -> "SystemMatrices":
        return cls(T, omega_from_height(c_z, g))


@dataclass(frozen=True)
class CentroidalInputs:
    """Quantities needed to evaluate the nonlinear bias of the CoP.

    ``contacts`` holds ``(r_k, f_k)`` pairs of 3-vectors (point, force).
    ``L_dot`` is the lateral (x, y) part of the angular momentum rate.
    """

    m: float
    g: float = DEFAULT_GRAVITY
    L_dot: Sequence[float] = (0.0, 0.0)
    contacts: Sequence[tuple] = ()

    def __post_init__(self):
        if not self.m > 0:
            raise DomainError(f"mass must be positive, got {self.m}")


def omega_from_height(c_z: float, g: float = DEFAULT_GRAVITY) -> float:
    """Return omega^2 = g / c_z."""
    if not (c_z > 0 and g > 0):
        raise DomainError(f"need c_z > 0 and g > 0, got c_z={c_z}, g={g}")
    return g / c_z


def step_dynamics(x, u: float, sys: SystemMatrices):
    """Exact constant-jerk update ``x+ = A x + B u``.

    Accepts a :class:`CentroidalState` or a length-3 array and returns the
    same kind.
    """
    if isinstance(x, CentroidalState):
        return CentroidalState.from_array(sys.A @ x.as_array() + sys.B * u)
    return sys.A @ np.asarray(x, dtype=float) + sys.B * u


def vrp(x, sys: SystemMatrices) -> float:
    """Virtual repellent point ``v = c - c_ddot / omega^2``."""
    arr = x.as_array() if isinstance(x, CentroidalState) else np.asarray(x, dtype=float)
    return float(sys.V @ arr)


def dcm(x, omega: float) -> float:
    """Divergent component of motion ``xi = c + c_dot / omega``."""
    if not omega > 0:
        raise DomainError(f"omega must be positive, got {omega}")
    arr = x.as_array() if isinstance(x, CentroidalState) else np.asarray(x, dtype=float)
    return float(arr[0] + arr[1] / omega)


def bias_term(x_xy: Sequence, c_z: float, c_ddot_z: float,
              inputs: CentroidalInputs, sys: SystemMatrices) -> np.ndarray:
    """Bias ``n = p - v`` for both horizontal axes.

    ``x_xy`` holds the x and y centroidal states, ``c_z``/``c_ddot_z`` the
    vertical CoM height and acceleration.
    """
    if len(inputs.contacts) == 0:
        raise DegenerateContactError("no contacts")
    states = [s.as_array() if isinstance(s, CentroidalState) else np.asarray(s, float)
              for s in x_xy]
    c_ddot = np.array([states[0][2], states[1][2]])
    r = np.array([np.asarray(rk, float) for rk, _ in inputs.contacts])
    f = np.array([np.asarray(fk, float) for _, fk in inputs.contacts])
    fz = f[:, 2].sum()
    if not fz > 0:
        raise DegenerateContactError(f"total normal force {fz} is not positive")
    denom = inputs.m * (c_ddot_z + inputs.g)
    if denom == 0:
        raise DegenerateContactError("zero effective vertical load")
    L_dot = np.asarray(inputs.L_dot, float)
    momentum = (inputs.m * c_z * c_ddot - S_ROT @ L_dot) / denom
    contact_height = (r[:, 2:3] * f[:, :2]).sum(axis=0) / fz
    return c_ddot / sys.omega_sq - momentum + contact_height
