"""Hip stiffness identification from two static single-stance experiments.

The robot balances on one foot while the controller trusts the rigid
kinematic CoM estimate. At rest the true CoM sits over the measured CoP, so
for the right stiffness pair the posture-corrected CoM matches the CoP in
both experiments. Each experiment gives an error surface over a grid of
assumed stiffnesses; its zero level is a curve, and the two curves cross at
the identified pair.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .config import ScenarioConfig
from .flex import FlexParams, HipConfiguration, approx_flex_torque, lever_arm_correction
from .scenario import PrecomputedSource, run_closed_loop, single_stance_segments, tube_setup
from .sim import SIDES


class IdentificationFailedError(RuntimeError):
    """The zero contours do not cross inside the grid.

    ``closest`` is the grid-space point ``(k_left, k_right)`` where the two
    contours come nearest (or where the summed squared error is smallest if
    a contour is missing), ``distance`` the normalized gap there.
    """

    def __init__(self, message: str, closest, distance: float):
        super().__init__(message)
        self.closest = tuple(float(v) for v in closest)
        self.distance = float(distance)


class StaticTraceError(ValueError):
    pass


@dataclass
class StanceRecord:
    """Window averages of one static single-stance experiment."""

    side: str  # stance side
    loads: dict  # side -> HipConfiguration (window mean)
    rigid_com: np.ndarray  # (x, y) rigid kinematic CoM estimate
    feet: dict  # side -> (x, y) kinematic foot positions
    cop: np.ndarray  # (x, y) mean measured CoP
    cop_sigma: np.ndarray  # standard error of the mean CoP
    n_samples: int
    max_speed: float  # largest CoM speed in the window (m/s)


@dataclass
class IdentificationResult:
    k_left: float
    k_right: float
    band: np.ndarray  # two standard deviations (left, right)
    intersections: list  # all crossings (k_left, k_right)
    contours: dict  # side -> list of ((kL, kR), (kL, kR)) segments
    k_left_grid: np.ndarray
    k_right_grid: np.ndarray
    errors: dict  # side -> error grid indexed [i_left, i_right]

    def summary(self) -> dict:
        return {
            "k_left": self.k_left,
            "k_right": self.k_right,
            "band_2sigma": [float(b) for b in self.band],
            "intersections": [[float(a), float(b)] for a, b in self.intersections],
            "grid": [len(self.k_left_grid), len(self.k_right_grid)],
        }


# ---------------------------------------------------------------- experiments

def record_single_stance(cfg: ScenarioConfig, side: str, static_speed: float = 1e-3) -> StanceRecord:
    """Simulate one static stance on ``side`` and average the last ``record_time`` seconds."""
    if side not in SIDES:
        raise ValueError(f"unknown side {side!r}")
    cfg = cfg.replace(scenario={"estimator": False})
    tubes = tube_setup(cfg)
    T = cfg.controller.T
    half = (cfg.plant.foot_half_length, cfg.plant.foot_half_width)
    source = PrecomputedSource.from_segments(single_stance_segments(cfg, side), T, tubes.sys, half)
    res = run_closed_loop(cfg, source, len(source), tubes, estimator_on=False, record_loads=True)
    n = int(round(cfg.identification.record_time / T))
    if n < 2 or n > len(source):
        raise ValueError("record window must cover at least two ticks of the experiment")
    tr = res.trace
    pm = np.column_stack([tr.array("pm_x"), tr.array("pm_y")])[-n:]
    speed = np.hypot(tr.array("chatd_x"), tr.array("chatd_y"))[-n:]
    window = res.loads[-n:]
    loads = {}
    for s in SIDES:
        tau = np.mean([w[s].tau_hip for w in window], axis=0)
        f = np.mean([w[s].f_hip for w in window], axis=0)
        loads[s] = HipConfiguration(np.zeros(3), tau_hip=tau, f_hip=f)
    y0 = cfg.walk.initial_feet_y
    feet = {"left": np.array([0.0, y0]), "right": np.array([0.0, -y0])}
    return StanceRecord(
        side=side, loads=loads, rigid_com=np.mean(res.rigid_com[-n:], axis=0), feet=feet,
        cop=pm.mean(axis=0), cop_sigma=pm.std(axis=0, ddof=1) / np.sqrt(n), n_samples=n,
        max_speed=float(speed.max()),
    )


def static_deflection(load: HipConfiguration, k: float, lever, iters: int = 100, tol: float = 1e-14):
    """Deflection balancing the flexing torque of ``load`` against the spring ``k``."""
    p = FlexParams(k, 0.0, lever)
    theta = np.zeros(2)
    for _ in range(iters):
        new = -approx_flex_torque(load, theta, p) / p.k_f
        if np.max(np.abs(new - theta)) < tol:
            return new
        theta = new
    return theta


def stance_error_grid(record: StanceRecord, k_left, k_right, cfg: ScenarioConfig) -> np.ndarray:
    """``c^y(k) - p^y`` over the stiffness grid (rows: left values, columns: right values)."""
    p = cfg.plant
    k_left, k_right = np.asarray(k_left, float), np.asarray(k_right, float)
    th_l = [static_deflection(record.loads["left"], k, p.torque_lever) for k in k_left]
    th_r = [static_deflection(record.loads["right"], k, p.torque_lever) for k in k_right]
    support = [FlexParams(1.0, 0.0, p.support_lever)] * 2
    c_fk = np.array([record.rigid_com[0], record.rigid_com[1], p.com_height])
    s_fk = [np.array([*record.feet[s], 0.0]) for s in SIDES]
    stance = SIDES.index(record.side)
    out = np.empty((k_left.size, k_right.size))
    for i, tl in enumerate(th_l):
        for j, tr in enumerate(th_r):
            feet, com = lever_arm_correction([tl, tr], support, s_fk, c_fk, [p.leg_mass] * 2, p.total_mass)
            # the stance foot stays where it is; the corrected chain places the CoM relative to it
            c_y = s_fk[stance][1] + com[1] - feet[stance][1]
            out[i, j] = c_y - record.cop[1]
    return out


# ---------------------------------------------------------------- contours

def _edge_point(x, y, f, a, b):
    """Zero crossing on the grid edge between nodes ``a`` and ``b`` (index pairs)."""
    fa, fb = f[a], f[b]
    r = fa / (fa - fb)
    return (x[a[0]] + r * (x[b[0]] - x[a[0]]), y[a[1]] + r * (y[b[1]] - y[a[1]]))


def zero_contour(x, y, f) -> list:
    """Marching-squares segments of ``f == 0`` on the grid ``f[i, j] = f(x[i], y[j])``.

    Saddle cells are split by the sign of the cell-center (bilinear) value.
    """
    x, y, f = np.asarray(x, float), np.asarray(y, float), np.asarray(f, float)
    segs = []
    for i in range(x.size - 1):
        for j in range(y.size - 1):
            corners = [(i, j), (i + 1, j), (i + 1, j + 1), (i, j + 1)]
            vals = [f[c] for c in corners]
            pts = []
            for e in range(4):
                a, b = corners[e], corners[(e + 1) % 4]
                fa, fb = f[a], f[b]
                if fa == 0.0 and fb == 0.0:
                    continue
                if (fa <= 0.0 < fb) or (fb <= 0.0 < fa) or (fa < 0.0 <= fb) or (fb < 0.0 <= fa):
                    pts.append(_edge_point(x, y, f, a, b))
            # drop duplicates from contours through a node
            uniq = []
            for q in pts:
                if not any(np.allclose(q, u, rtol=0, atol=1e-12) for u in uniq):
                    uniq.append(q)
            if len(uniq) == 2:
                segs.append((uniq[0], uniq[1]))
            elif len(uniq) == 4:
                center = 0.25 * sum(vals)
                # edges in order: bottom, right, top, left; pair them so the center's side stays connected
                if (center > 0) == (vals[0] > 0):
                    segs += [(uniq[0], uniq[1]), (uniq[2], uniq[3])]
                else:
                    segs += [(uniq[3], uniq[0]), (uniq[1], uniq[2])]
    return segs


def _bilinear(f, i, j):
    """Coefficients ``(a, b, c, d)`` of ``a + b u + c v + d u v`` on cell ``(i, j)``."""
    f00, f10, f01, f11 = f[i, j], f[i + 1, j], f[i, j + 1], f[i + 1, j + 1]
    return f00, f10 - f00, f01 - f00, f11 - f10 - f01 + f00


def cell_intersections(f_coef, g_coef, tol: float = 1e-12, res_tol: float = 1e-9) -> list:
    """Common zeros ``(u, v)`` in the unit square of two bilinear functions.

    A point is kept when both functions vanish there to ``res_tol`` times the
    sum of their coefficient magnitudes.
    """
    a, b, c, d = f_coef
    e, h, k, m = g_coef
    f_size = abs(a) + abs(b) + abs(c) + abs(d)
    g_size = abs(e) + abs(h) + abs(k) + abs(m)
    # eliminate v: (a + b u)(k + m u) - (e + h u)(c + d u) = 0
    q2 = b * m - h * d
    q1 = a * m + b * k - e * d - h * c
    q0 = a * k - e * c
    scale = max(abs(q2), abs(q1), abs(q0), 1e-300)
    if abs(q2) > tol * scale:
        roots = np.roots([q2, q1, q0])
        us = [r.real for r in roots if abs(r.imag) <= 1e-9 * max(1.0, abs(r.real))]
    elif abs(q1) > tol * scale:
        us = [-q0 / q1]
    else:
        return []  # the curves coincide or never meet
    out = []
    for u in us:
        if not -1e-12 <= u <= 1 + 1e-12:
            continue
        u = min(max(u, 0.0), 1.0)
        # v from either curve, larger denominator first; keep it only if both curves vanish there
        cands = sorted([(c + d * u, a + b * u), (k + m * u, e + h * u)], key=lambda p: -abs(p[0]))
        for den, num in cands:
            if den == 0.0 or abs(num) > (1 + 1e-12) * abs(den):
                continue  # no isolated v in [0, 1]
            v = -num / den
            if v < -1e-12:
                continue
            v = min(max(v, 0.0), 1.0)
            if abs(_eval(f_coef, u, v)) <= res_tol * f_size and abs(_eval(g_coef, u, v)) <= res_tol * g_size:
                out.append((u, v))
                break
    return out


def _eval(coef, u: float, v: float) -> float:
    a, b, c, d = coef
    return a + b * u + c * v + d * u * v


def contour_intersections(x, y, f, g) -> list:
    """Crossings of ``f == 0`` and ``g == 0`` with the bilinear interpolants of both grids.

    Returns ``(point, jacobian)`` pairs; the Jacobian is ``d(f, g) / d(x, y)`` there.
    """
    x, y, f, g = (np.asarray(v, float) for v in (x, y, f, g))
    found = []
    for i in range(x.size - 1):
        for j in range(y.size - 1):
            fc, gc = _bilinear(f, i, j), _bilinear(g, i, j)
            for u, v in cell_intersections(fc, gc):
                dx, dy = x[i + 1] - x[i], y[j + 1] - y[j]
                pt = np.array([x[i] + u * dx, y[j] + v * dy])
                if any(np.allclose(pt, q, rtol=1e-9, atol=0) for q, _ in found):
                    continue  # shared cell edge
                jac = np.array([[(fc[1] + fc[3] * v) / dx, (fc[2] + fc[3] * u) / dy],
                                [(gc[1] + gc[3] * v) / dx, (gc[2] + gc[3] * u) / dy]])
                found.append((pt, jac))
    return found


def _closest_approach(x, y, segs_a, segs_b, f, g):
    """Nearest pair of contour points in grid-normalized coordinates, else the best grid node."""
    span = np.array([x[-1] - x[0], y[-1] - y[0]])
    if segs_a and segs_b:
        pa = np.array([p for s in segs_a for p in s]) / span
        pb = np.array([p for s in segs_b for p in s]) / span
        dist = np.linalg.norm(pa[:, None, :] - pb[None, :, :], axis=2)
        ia, ib = np.unravel_index(np.argmin(dist), dist.shape)
        return 0.5 * (pa[ia] + pb[ib]) * span, float(dist[ia, ib])
    score = np.asarray(f) ** 2 + np.asarray(g) ** 2
    i, j = np.unravel_index(np.argmin(score), score.shape)
    return np.array([x[i], y[j]]), float(np.sqrt(score[i, j]))


# ---------------------------------------------------------------- identification

def identify_stiffness(records: dict, k_left, k_right, cfg: ScenarioConfig,
                       static_speed: float = 1e-3) -> IdentificationResult:
    """Stiffness pair where both stance experiments' CoM/CoP errors vanish.

    ``records`` maps the stance side to its :class:`StanceRecord`. The band is
    two standard deviations of the CoP measurement noise carried through the
    local Jacobian of the two error surfaces.
    """
    k_left, k_right = np.asarray(k_left, float), np.asarray(k_right, float)
    if k_left.size < 2 or k_right.size < 2:
        raise ValueError("the grid needs at least two points per axis")
    if set(records) != set(SIDES):
        raise ValueError("need one stance experiment per side")
    for side, rec in records.items():
        if rec.max_speed >= static_speed:
            raise StaticTraceError(f"{side} stance trace is not static: CoM speed {rec.max_speed:.3g} m/s")
    errors = {s: stance_error_grid(records[s], k_left, k_right, cfg) for s in SIDES}
    contours = {s: zero_contour(k_left, k_right, errors[s]) for s in SIDES}
    hits = contour_intersections(k_left, k_right, errors["left"], errors["right"])
    if not hits:
        pt, gap = _closest_approach(k_left, k_right, contours["left"], contours["right"],
                                    errors["left"], errors["right"])
        raise IdentificationFailedError(
            f"zero contours do not cross in the grid; closest near k=({pt[0]:.1f}, {pt[1]:.1f})", pt, gap)
    # prefer the crossing with the best-conditioned Jacobian
    pt, jac = max(hits, key=lambda h: abs(np.linalg.det(h[1])))
    sig = np.array([records[s].cop_sigma[1] for s in SIDES])
    try:
        jinv = np.linalg.inv(jac)
        cov = jinv @ np.diag(sig**2) @ jinv.T
        band = 2.0 * np.sqrt(np.diag(cov))
    except np.linalg.LinAlgError:
        band = np.array([np.inf, np.inf])
    return IdentificationResult(float(pt[0]), float(pt[1]), band, [tuple(h[0]) for h in hits], contours,
                                k_left, k_right, errors)


def stiffness_grid(cfg: ScenarioConfig):
    i = cfg.identification
    return (np.linspace(*i.k_left_range, i.grid), np.linspace(*i.k_right_range, i.grid))


def run_identification(cfg: ScenarioConfig) -> IdentificationResult:
    """Both stance experiments on the simulated plant, then the grid search."""
    records = {s: record_single_stance(cfg, s) for s in SIDES}
    k_left, k_right = stiffness_grid(cfg)
    return identify_stiffness(records, k_left, k_right, cfg)
