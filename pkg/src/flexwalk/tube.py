"""Tube stabilizer: mRPI bounds, optimal feedback gain and saturated tracking.

The tracking error ``x~ = x - x_ref`` evolves as ``x~+ = (A + BK) x~ + B w``
with a scalar lumped disturbance ``|w| <= d_max``. The support function of the
minimal robust positively invariant set along a row ``r`` is the series
``d_max * sum_i |r (A + BK)^i B|``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import matrix_balance
from scipy.optimize import minimize

from .centroidal import SystemMatrices

REL_TAIL = np.finfo(float).eps / 2
MAX_TERMS = 1_000_000
STABILITY_MARGIN = 1e-6
PENALTY = 1e6


class InstabilityError(ValueError):
    pass


class SeriesConvergenceError(RuntimeError):
    pass


class GainInitializationError(RuntimeError):
    pass


class SaturationInfeasibleError(RuntimeError):
    pass


@dataclass(frozen=True)
class DisturbanceBound:
    d_max: float

    def __post_init__(self):
        if not self.d_max >= 0:
            raise ValueError(f"d_max must be non-negative, got {self.d_max}")


@dataclass
class TubeGain:
    K: np.ndarray
    v_tilde_max: float
    omega_box: np.ndarray
    spectral_radius: float
    d_max: float
    history: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "K": [float(k) for k in self.K],
            "v_tilde_max": self.v_tilde_max,
            "omega_box": [float(b) for b in self.omega_box],
            "spectral_radius": self.spectral_radius,
            "d_max": self.d_max,
        }


def closed_loop(K, sys: SystemMatrices) -> np.ndarray:
    return sys.A + np.outer(sys.B, np.asarray(K, float))


def spectral_radius(K, sys: SystemMatrices) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(closed_loop(K, sys)))))


def _as_d(d) -> float:
    return d.d_max if isinstance(d, DisturbanceBound) else DisturbanceBound(float(d)).d_max


def _series(K, sys: SystemMatrices, rows: np.ndarray, d_max: float, tail_tol: float, rel_tail: float = REL_TAIL):
    """Per-row ``d_max * sum_i |row A_K^i B|`` plus a certified tail bound."""
    AK = closed_loop(K, sys)
    rho = float(np.max(np.abs(np.linalg.eigvals(AK))))
    if not rho < 1.0:
        raise InstabilityError(f"closed loop not strictly stable (spectral radius {rho:.12g})")
    rows = np.atleast_2d(np.asarray(rows, float))
    if d_max == 0.0:
        return np.zeros(rows.shape[0]), rho

    # Balancing leaves the series unchanged and tightens the norm contraction.
    Ab, scale = matrix_balance(AK, permute=False)
    s = np.diag(scale)
    rows_b = rows * s
    b = sys.B / s

    # Smallest power of two p with ||Ab^p||_inf < 1.
    p, Mp = 1, Ab.copy()
    while np.linalg.norm(Mp, np.inf) >= 1.0:
        p *= 2
        if p > MAX_TERMS:
            raise SeriesConvergenceError("no contracting power of the closed loop within 1e6 terms")
        Mp = Mp @ Mp
    contraction = np.linalg.norm(Mp, np.inf)

    L = max(p, 256)
    Y, M = b[:, None], Ab.copy()
    while Y.shape[1] < L:
        Y = np.hstack([Y, M @ Y])
        M = M @ M
    Y = Y[:, :L]
    AL = np.linalg.matrix_power(Ab, L)

    row_norm = np.abs(rows_b).sum(axis=1)
    sums = np.zeros(rows.shape[0])
    n = 0
    while True:
        head = np.abs(Y[:, :p]).max(axis=0).sum()
        tail = row_norm * head / (1.0 - contraction)
        # the relative test keeps the term count independent of d_max, so the bound is linear in it
        if np.all(d_max * tail <= tail_tol) and np.all(tail <= rel_tail * sums):
            return d_max * (sums + tail), rho
        sums += np.abs(rows_b @ Y).sum(axis=1)
        n += L
        if n >= MAX_TERMS:
            raise SeriesConvergenceError(f"tail bound above {tail_tol} after {n} terms")
        Y = AL @ Y


def mrpi_vrp_bound(K, sys: SystemMatrices, d, tail_tol: float = 1e-9) -> float:
    """Maximum VRP tracking error over the mRPI set (over-approximated by <= tail_tol)."""
    vals, _ = _series(K, sys, sys.V, _as_d(d), tail_tol)
    return float(vals[0])


def mrpi_state_box(K, sys: SystemMatrices, d, tail_tol: float = 1e-9) -> np.ndarray:
    """Componentwise bound on the mRPI set: (position, velocity, acceleration)."""
    vals, _ = _series(K, sys, np.eye(3), _as_d(d), tail_tol)
    return vals


def deadbeat_gain(sys: SystemMatrices) -> np.ndarray:
    """Gain placing all closed-loop eigenvalues at the origin (Ackermann)."""
    A, B = sys.A, sys.B
    ctrb = np.column_stack([B, A @ B, A @ A @ B])
    return -np.linalg.solve(ctrb.T, np.array([0.0, 0.0, 1.0])) @ np.linalg.matrix_power(A, 3)


def optimize_gain(sys: SystemMatrices, d, seed_K=None, tail_tol: float = 1e-9,
                  xtol: float = 1e-8, maxfev: int = 10_000) -> TubeGain:
    """Search the gain minimizing the VRP tube width with adaptive Nelder-Mead.

    The simplex lives in coordinates normalized by ``|seed_K|`` so the three
    gains, which differ by orders of magnitude, move on a common scale. The
    objective is the bound per unit disturbance; non-stabilizing points get a
    finite penalty.
    """
    d_max = _as_d(d)
    seed = deadbeat_gain(sys) if seed_K is None else np.asarray(seed_K, float)
    if spectral_radius(seed, sys) >= 1.0 - STABILITY_MARGIN:
        seed = deadbeat_gain(sys)
        if spectral_radius(seed, sys) >= 1.0 - STABILITY_MARGIN:
            raise GainInitializationError("no stabilizing initial gain")
    scale = np.where(np.abs(seed) > 0, np.abs(seed), 1.0)
    unit_tol = tail_tol / d_max if d_max > 0 else tail_tol

    def objective(z):
        K = z * scale
        rho = spectral_radius(K, sys)
        if rho >= 1.0 - STABILITY_MARGIN:
            return PENALTY * (1.0 + rho)
        try:
            # only the absolute tolerance matters while searching
            return float(_series(K, sys, sys.V, 1.0, unit_tol, rel_tail=np.inf)[0][0])
        except (InstabilityError, SeriesConvergenceError):
            return PENALTY * (1.0 + rho)

    z0 = seed / scale
    simplex = np.vstack([z0] + [z0 + 0.05 * np.eye(3)[i] * np.where(z0[i] != 0, z0[i], 1.0) for i in range(3)])
    history = []
    res = minimize(objective, z0, method="Nelder-Mead",
                   callback=lambda zk: history.append(objective(zk)),
                   options={"adaptive": True, "initial_simplex": simplex, "xatol": xtol, "fatol": 0.0,
                            "maxfev": maxfev})
    K = res.x * scale
    if objective(res.x) >= PENALTY:
        raise GainInitializationError("optimizer ended on a non-stabilizing gain")
    return make_gain(K, sys, d_max, tail_tol, history=history)


def make_gain(K, sys: SystemMatrices, d, tail_tol: float = 1e-9, history=None) -> TubeGain:
    K = np.asarray(K, float)
    d_max = _as_d(d)
    vals, rho = _series(K, sys, np.vstack([sys.V, np.eye(3)]), d_max, tail_tol)
    return TubeGain(K, float(vals[0]), vals[1:], rho, d_max, list(history or []))


def saturation_limits(x_tilde_hat, x_ref_next, n_next: float, support, e_u_bounds,
                      K, sys: SystemMatrices) -> tuple[float, float]:
    """Interval for the feedback term keeping the next CoP inside ``support``.

    Robust against any lumped disturbance in ``e_u_bounds``. For ``VB > 0``
    this is ``(p_lim - n+ - V(A x~ + x_ref+)) / VB - e_u_lim`` per bound; for
    ``VB < 0`` the division reverses the order, so the support bounds and the
    disturbance bounds both swap roles.
    """
    p_min, p_max = support
    e_min, e_max = e_u_bounds
    VB = sys.VB
    x_t = np.asarray(x_tilde_hat, float)
    x_r = np.asarray(x_ref_next, float)
    rest = n_next + sys.V @ (sys.A @ x_t + x_r)
    if VB > 0:
        lo = (p_min - rest) / VB - e_min
        hi = (p_max - rest) / VB - e_max
    else:
        lo = (p_max - rest) / VB - e_min
        hi = (p_min - rest) / VB - e_max
    if lo > hi:
        raise SaturationInfeasibleError(
            f"support [{p_min:.4g}, {p_max:.4g}] too small for the current error: "
            f"feedback interval [{lo:.6g}, {hi:.6g}] is empty")
    return float(lo), float(hi)


def stabilize_step(x_hat, x_ref, u_ref: float, gain, limits, sys: SystemMatrices):
    """Saturated feedback step; returns ``(x_hat_next, commanded_jerk)``."""
    K = gain.K if isinstance(gain, TubeGain) else np.asarray(gain, float)
    x_hat = np.asarray(x_hat, float)
    fb = float(K @ (x_hat - np.asarray(x_ref, float)))
    lo, hi = limits
    jerk = u_ref + min(max(fb, lo), hi)
    return sys.A @ x_hat + sys.B * jerk, jerk
