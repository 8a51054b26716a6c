"""Reference motion generator: a linear MPC over CoM jerks and footstep placements.

Each horizontal axis is planned by its own dense QP. Step timing is fixed by a
:class:`GaitSchedule`; the planner chooses jerks and the positions of footsteps
that have not landed yet (or, with ``lock_at_swing_start``, whose swing has not
started).

Forward velocity is tracked mostly through its stride average: the CoM speed
oscillates within each step, and penalizing the instantaneous error biases the
receding-horizon solution toward short steps.

Support model used inside the planner
-------------------------------------
Single support constrains the VRP to the stance foot interval. In double
support the admissible interval slides from the previous stance foot to the new
one, ``center = (1 - a) s_prev + a s_new`` with ``a`` ramping over the phase.
This sliding interval always lies inside the interval hull of both feet and
stays linear in the footstep variables.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import linprog

from .centroidal import CentroidalState, SystemMatrices, step_dynamics
from .qp import QPInfeasibleError, solve_qp

AXES = ("x", "y")
SIDE_SIGN = {"left": 1.0, "right": -1.0}


class PlannerInfeasibleError(RuntimeError):
    def __init__(self, message, violated=()):
        super().__init__(message + (f" (violated: {', '.join(violated)})" if violated else ""))
        self.violated = tuple(violated)


class MarginTooLargeError(ValueError):
    pass


class StalePlanError(ValueError):
    pass


@dataclass(frozen=True)
class GaitConfig:
    T_mpc: float = 0.1
    N: int = 16
    step_duration: float = 1.4
    ss_fraction: float = 1.2 / 1.4
    foot_half_length: float = 0.11
    foot_half_width: float = 0.065
    # x: forward displacement between consecutive steps; y: lateral distance
    # left-minus-right between consecutive steps (mirrored for right steps).
    stepping_area: tuple = ((-0.4, 0.4), (0.16, 0.32))
    max_swing_speed: float = 1.5
    # (velocity tracking, jerk, ankle torque)
    weights: tuple = (1.0, 1e-6, 1e-3)
    # Share of the forward velocity weight on the instantaneous error; the rest
    # goes on step-long averages. 1 disables averaging.
    instant_velocity_share: float = 0.1
    lock_at_swing_start: bool = False
    replan_period: float = 0.2

    def __post_init__(self):
        problems = []
        if not self.T_mpc > 0:
            problems.append("T_mpc must be positive")
        if self.N < 2:
            problems.append("N must be >= 2")
        if not 0 < self.ss_fraction < 1:
            problems.append("ss_fraction must lie in (0, 1)")
        if not (self.foot_half_length > 0 and self.foot_half_width > 0):
            problems.append("foot half-dimensions must be positive")
        if min(self.weights) < 0 or not self.weights[0] > 0:
            problems.append("weights must be >= 0 with a positive velocity weight")
        if not 0 <= self.instant_velocity_share <= 1:
            problems.append("instant_velocity_share must lie in [0, 1]")
        if not self.max_swing_speed > 0:
            problems.append("max_swing_speed must be positive")
        for lo, hi in self.stepping_area:
            if lo > hi:
                problems.append(f"empty stepping area [{lo}, {hi}]")
        if problems:
            raise ValueError("; ".join(problems))

    @property
    def ss_duration(self) -> float:
        return self.step_duration * self.ss_fraction

    @property
    def ds_duration(self) -> float:
        return self.step_duration - self.ss_duration

    @property
    def horizon(self) -> float:
        return self.N * self.T_mpc

    def half_size(self, axis: int) -> float:
        return self.foot_half_length if axis == 0 else self.foot_half_width

    def step_bounds(self, axis: int, side: str) -> tuple:
        lo, hi = self.stepping_area[axis]
        if axis == 1 and side == "right":
            return -hi, -lo
        return lo, hi


@dataclass(frozen=True)
class SupportPhase:
    kind: str  # "single" | "double"
    feet: tuple  # one or two (x, y) placements
    duration: float

    def __post_init__(self):
        want = {"single": 1, "double": 2}.get(self.kind)
        if want is None or len(self.feet) != want:
            raise ValueError(f"{self.kind} support needs {want} feet, got {len(self.feet)}")


def support_interval(phase: SupportPhase, cfg: GaitConfig, axis: int) -> tuple:
    """Per-axis CoP interval of an axis-aligned rectangular support (hull in double support)."""
    h = cfg.half_size(axis)
    coords = [float(f[axis]) for f in phase.feet]
    return min(coords) - h, max(coords) + h


@dataclass(frozen=True)
class Footstep:
    index: int
    side: str
    swing_start: float  # -inf for initial feet
    land_time: float


@dataclass(frozen=True)
class PhaseSlot:
    start: float
    end: float  # inf for the final stance
    kind: str
    feet: tuple  # footstep indices; for double support (from, to)
    alpha: tuple = (1.0, 1.0)  # blend weight of feet[1] at ramp start/end
    ramp: tuple = (0.0, 0.0)

    def blend(self, t: float) -> float:
        a0, a1 = self.alpha
        r0, r1 = self.ramp
        if r1 <= r0:
            return a1
        return a0 + (a1 - a0) * min(max((t - r0) / (r1 - r0), 0.0), 1.0)


class GaitSchedule:
    """Fixed-timing footstep sequence.

    Footsteps 0 and 1 are the initial left and right feet. Step ``j >= 2``
    swings the foot of its side, starting ``ss_duration`` before landing.
    """

    def __init__(self, footsteps, slots):
        self.footsteps = list(footsteps)
        self.slots = list(slots)

    @classmethod
    def walking(cls, cfg: GaitConfig, n_steps: int, t_first_swing: float = 0.6,
                first_side: str = "right") -> "GaitSchedule":
        ss, ds = cfg.ss_duration, cfg.ds_duration
        steps = [Footstep(0, "left", -np.inf, -np.inf), Footstep(1, "right", -np.inf, -np.inf)]
        sides = ("left", "right")
        first = sides.index(first_side)
        slots = []
        if n_steps == 0:
            slots.append(PhaseSlot(0.0, np.inf, "double", (0, 1), (0.5, 0.5), (0.0, 0.0)))
            return cls(steps, slots)
        first_stance = 1 - first
        # standing, then shift the VRP onto the first stance foot
        slots.append(PhaseSlot(0.0, t_first_swing, "double", (first, first_stance), (0.5, 1.0),
                               (max(t_first_swing - ds, 0.0), t_first_swing)))
        t = t_first_swing
        prev_idx = {sides[first]: first, sides[first_stance]: first_stance}
        stance = first_stance
        for j in range(n_steps):
            side = sides[(first + j) % 2]
            idx = len(steps)
            steps.append(Footstep(idx, side, t, t + ss))
            slots.append(PhaseSlot(t, t + ss, "single", (stance,)))
            t += ss
            last = j == n_steps - 1
            if last:
                slots.append(PhaseSlot(t, np.inf, "double", (stance, idx), (0.0, 0.5), (t, t + ds)))
            else:
                slots.append(PhaseSlot(t, t + ds, "double", (stance, idx), (0.0, 1.0), (t, t + ds)))
                t += ds
            prev_idx[side] = idx
            stance = idx
        return cls(steps, slots)

    def truncated(self, t: float, extra_steps: int = 2) -> "GaitSchedule":
        """Same timing up to ``t``, then at most ``extra_steps`` more footsteps and a final stance.

        A step already swinging at ``t`` is kept and does not count as extra.
        """
        if extra_steps < 0:
            raise ValueError("extra_steps must be non-negative")
        keep = [fs for fs in self.footsteps if fs.swing_start <= t + 1e-9]
        later = [fs for fs in self.footsteps if fs.swing_start > t + 1e-9][:extra_steps]
        steps = keep + later
        if len(steps) == len(self.footsteps):
            return self
        last = steps[-1]
        slots = []
        for sl in self.slots:
            if sl.kind == "double" and sl.start >= last.land_time - 1e-9:
                r0 = sl.start
                slots.append(PhaseSlot(sl.start, np.inf, "double", sl.feet, (0.0, 0.5),
                                       (r0, r0 + (sl.ramp[1] - sl.ramp[0]))))
                break
            slots.append(sl)
        return GaitSchedule(steps, slots)

    @property
    def end_time(self) -> float:
        """Start of the final standing phase."""
        return self.slots[-1].start

    def slot_at(self, t: float) -> PhaseSlot:
        for s in self.slots:
            if t < s.end - 1e-9:
                return s
        return self.slots[-1]

    def previous_same_side(self, index: int) -> int:
        side = self.footsteps[index].side
        for j in range(index - 1, -1, -1):
            if self.footsteps[j].side == side:
                return j
        raise ValueError(f"no earlier {side} footstep before {index}")

    def previous_other_side(self, index: int) -> int:
        side = self.footsteps[index].side
        for j in range(index - 1, -1, -1):
            if self.footsteps[j].side != side:
                return j
        raise ValueError(f"no earlier opposite footstep before {index}")

    def phase_at(self, t: float, positions) -> SupportPhase:
        """Physical support at time ``t`` (both feet in double support)."""
        slot = self.slot_at(t)
        feet = tuple(np.asarray(positions[i], float) for i in slot.feet)
        kind = slot.kind
        if kind == "double" and np.allclose(feet[0], feet[1]):
            feet, kind = feet[:1], "single"
        return SupportPhase(kind, feet, slot.end - slot.start)

    def swing_at(self, t: float) -> Optional[Footstep]:
        for fs in self.footsteps:
            if fs.swing_start <= t < fs.land_time:
                return fs
        return None

    def feet_on_ground(self, t: float) -> dict:
        """Index of the footstep currently representing each side (last landed)."""
        out = {}
        for fs in self.footsteps:
            if fs.land_time <= t + 1e-9:
                out[fs.side] = fs.index
        return out


@dataclass
class ReferencePlan:
    t0: float
    T_mpc: float
    states: np.ndarray  # (2, N+1, 3): x0 followed by N predicted states
    jerks: np.ndarray  # (2, N)
    footsteps: dict  # index -> (x, y)
    phases: list  # SupportPhase at each predicted sample
    bias: np.ndarray
    margin: np.ndarray
    objective: np.ndarray
    kkt: list
    free_footsteps: tuple = ()

    @property
    def N(self) -> int:
        return self.jerks.shape[1]

    @property
    def horizon(self) -> float:
        return self.N * self.T_mpc

    @property
    def terminal_state(self) -> list:
        return [CentroidalState.from_array(self.states[a, -1]) for a in range(2)]

    @property
    def kkt_residual(self) -> float:
        return max(max(k.values()) for k in self.kkt)


def _prediction_matrices(sys: SystemMatrices, N: int):
    """States x_1..x_N as ``Px @ x0 + Pu @ u``; shapes (N, 3, 3) and (N, 3, N)."""
    Px = np.zeros((N, 3, 3))
    Pu = np.zeros((N, 3, N))
    Ak = np.eye(3)
    powers = [np.eye(3)]
    for _ in range(N):
        powers.append(sys.A @ powers[-1])
    for k in range(N):
        Ak = powers[k + 1]
        Px[k] = Ak
        for j in range(k + 1):
            Pu[k, :, j] = powers[k - j] @ sys.B
    return Px, Pu


class GaitPlanner:
    """Receding-horizon reference generator over a fixed :class:`GaitSchedule`."""

    def __init__(self, cfg: GaitConfig, schedule: GaitSchedule, omega_sq: float):
        self.cfg = cfg
        self.schedule = schedule
        self.sys = SystemMatrices(cfg.T_mpc, omega_sq)
        self.Px, self.Pu = _prediction_matrices(self.sys, cfg.N)

    def free_footsteps(self, t0: float) -> list:
        """Footsteps landing within the horizon that are still adjustable."""
        t_end = t0 + self.cfg.horizon
        out = []
        for fs in self.schedule.footsteps:
            lock = fs.swing_start if self.cfg.lock_at_swing_start else fs.land_time
            if lock > t0 + 1e-9 and fs.land_time < t_end + 1e-9:
                out.append(fs.index)
        return out

    def _sample_supports(self, t0: float):
        """Per predicted sample: list of (footstep index, weight) defining the interval center."""
        out = []
        for k in range(1, self.cfg.N + 1):
            t = t0 + k * self.cfg.T_mpc
            slot = self.schedule.slot_at(t)
            if slot.kind == "single":
                out.append(((slot.feet[0], 1.0),))
            else:
                a = slot.blend(t)
                out.append(((slot.feet[0], 1.0 - a), (slot.feet[1], a)))
        return out

    def plan(self, t0: float, x0, aimed_velocity, positions: dict, margin, bias=(0.0, 0.0),
             fixed: Optional[dict] = None) -> ReferencePlan:
        """Solve both axis QPs from the reference state ``x0`` (two states) at time ``t0``.

        ``positions`` maps already-decided footstep indices to (x, y). Footsteps in
        ``fixed`` are held at the given value even if their swing has not started.
        """
        cfg = self.cfg
        margin = np.broadcast_to(np.asarray(margin, float), (2,))
        bias = np.broadcast_to(np.asarray(bias, float), (2,))
        aimed = np.broadcast_to(np.asarray(aimed_velocity, float), (2,))
        if np.any(margin < 0):
            raise ValueError("margin must be non-negative")
        for a in range(2):
            if cfg.half_size(a) - margin[a] < 0:
                raise MarginTooLargeError(
                    f"margin {margin[a]} exceeds foot half-size {cfg.half_size(a)} on axis {AXES[a]}")
        fixed = dict(fixed or {})
        free = [i for i in self.free_footsteps(t0) if i not in fixed]
        known = dict(positions)
        known.update(fixed)
        supports = self._sample_supports(t0)
        needed = {i for s in supports for i, _ in s}
        for i in free:
            needed.add(self.schedule.previous_other_side(i))
            needed.add(self.schedule.previous_same_side(i))
        for i in sorted(needed):
            if i not in free and i not in known:
                known[i] = self._nominal(i, known, aimed)

        states = np.zeros((2, cfg.N + 1, 3))
        jerks = np.zeros((2, cfg.N))
        steps = {i: np.array(known[i], float) for i in known}
        for i in free:
            steps[i] = np.zeros(2)
        objectives, kkts = np.zeros(2), []
        for a in range(2):
            xa = x0[a].as_array() if isinstance(x0[a], CentroidalState) else np.asarray(x0[a], float)
            res, U, S = self._solve_axis(a, xa, aimed[a], supports, free, known, margin[a], bias[a])
            states[a, 0] = xa
            states[a, 1:] = self.Px @ xa + self.Pu @ U
            jerks[a] = U
            for i, v in zip(free, S):
                steps[i][a] = v
            objectives[a] = res.objective
            kkts.append(res.kkt)

        phases = []
        for k in range(1, cfg.N + 1):
            phases.append(self.schedule.phase_at(t0 + k * cfg.T_mpc, steps))
        return ReferencePlan(t0, cfg.T_mpc, states, jerks, {i: tuple(v) for i, v in steps.items()},
                             phases, bias.copy(), margin.copy(), objectives, kkts, tuple(free))

    def _nominal(self, index: int, known: dict, aimed) -> tuple:
        """Fallback placement: previous same-side foot advanced by one stride."""
        prev = self.schedule.previous_same_side(index)
        if prev not in known:
            known[prev] = self._nominal(prev, known, aimed)
        stride = np.array([2.0 * aimed[0] * self.cfg.step_duration, 0.0])
        return tuple(np.asarray(known[prev], float) + stride)

    def _solve_axis(self, a, x0, v_aim, supports, free, known, margin, n):
        cfg = self.cfg
        N = cfg.N
        nf = len(free)
        nz = N + nf
        col = {i: N + j for j, i in enumerate(free)}
        w_v, w_j, w_a = cfg.weights
        h = cfg.half_size(a)
        omega = self.sys.omega
        V = self.sys.V

        # VRP_k = vx0[k] + vu[k] @ u
        vx0 = np.array([V @ self.Px[k] @ x0 for k in range(N)])
        vu = np.array([V @ self.Pu[k] for k in range(N)])
        velx0 = np.array([self.Px[k][1] @ x0 for k in range(N)])
        velu = np.array([self.Pu[k][1] for k in range(N)])

        # interval center_k = cc[k] + cs[k] @ s_free
        cc = np.zeros(N)
        cs = np.zeros((N, nf))
        for k, sup in enumerate(supports):
            for i, w in sup:
                if i in col:
                    cs[k, col[i] - N] += w
                else:
                    cc[k] += w * known[i][a]

        # rows over z = [u, s]; vrp offset r_k = VRP_k + n - center_k
        R = np.hstack([vu, -cs])
        r0 = vx0 + n - cc
        Vel = np.hstack([velu, np.zeros((N, nf))])
        vel0 = velx0 - v_aim
        share = cfg.instant_velocity_share
        m = int(round(cfg.step_duration / cfg.T_mpc))
        if a == 0 and share < 1 and m <= N:
            pos0 = np.concatenate([[x0[0]], [self.Px[k][0] @ x0 for k in range(N)]])
            posu = np.vstack([np.zeros(N), [self.Pu[k][0] for k in range(N)]])
            span = m * cfg.T_mpc
            avg = np.array([posu[k + m] - posu[k] for k in range(N + 1 - m)]) / span
            avg0 = np.array([pos0[k + m] - pos0[k] for k in range(N + 1 - m)]) / span - v_aim
            rest = np.sqrt(1.0 - share)
            Vel = np.vstack([np.sqrt(share) * Vel, rest * np.hstack([avg, np.zeros((len(avg), nf))])])
            vel0 = np.concatenate([np.sqrt(share) * vel0, rest * avg0])

        H = 2 * (w_v * Vel.T @ Vel + w_a * R.T @ R)
        H[:N, :N] += 2 * w_j * np.eye(N)
        g = 2 * (w_v * Vel.T @ vel0 + w_a * R.T @ r0)
        if nf:
            H[N:, N:] += 2e-9 * np.eye(nf)

        rows, rhs, groups = [], [], []
        hm = h - margin
        # -hm <= r_k <= hm
        for k in range(N):
            rows.append(R[k]); rhs.append(-hm - r0[k]); groups.append(f"vrp[{k}]")
            rows.append(-R[k]); rhs.append(-hm + r0[k]); groups.append(f"vrp[{k}]")
        # terminal DCM: xi_N + n - center_N in [-hm, hm]
        xi_row = np.array([1.0, 1.0 / omega, 0.0])
        T = np.hstack([xi_row @ self.Pu[N - 1], -cs[N - 1]])
        t0v = xi_row @ self.Px[N - 1] @ x0 + n - cc[N - 1]

        rows.append(T); rhs.append(-hm - t0v); groups.append("terminal")
        rows.append(-T); rhs.append(-hm + t0v); groups.append("terminal")
        # stepping area and swing speed
        reach = cfg.max_swing_speed * cfg.ss_duration * 8.0 / 15.0
        for i in free:
            fs = self.schedule.footsteps[i]
            lo, hi = cfg.step_bounds(a, fs.side)
            for prev, blo, bhi, name in (
                (self.schedule.previous_other_side(i), lo, hi, "stepping"),
                (self.schedule.previous_same_side(i), -reach, reach, "swing_speed"),
            ):
                row = np.zeros(nz)
                row[col[i]] = 1.0
                const = 0.0
                if prev in col:
                    row[col[prev]] -= 1.0
                else:
                    const = known[prev][a]
                rows.append(row); rhs.append(blo + const); groups.append(f"{name}[{i}]")
                rows.append(-row); rhs.append(-bhi - const); groups.append(f"{name}[{i}]")

        A_in = np.array(rows)
        b_in = np.array(rhs)
        try:
            res = solve_qp(H, g, A_in=A_in, b_in=b_in)
        except QPInfeasibleError:
            violated = _diagnose(A_in, b_in, groups)
            raise PlannerInfeasibleError(f"axis {AXES[a]} plan infeasible", violated) from None
        if res.kkt["primal_ineq"] > 1e-6:
            raise PlannerInfeasibleError(f"axis {AXES[a]} plan infeasible",
                                         _diagnose(A_in, b_in, groups))
        return res, res.z[:N], res.z[N:]


def _diagnose(A_in, b_in, groups) -> list:
    """Constraint groups needing slack in the minimum-total-slack elastic LP."""
    m, n = A_in.shape
    # A z + s >= b, s >= 0, min sum s
    c = np.concatenate([np.zeros(n), np.ones(m)])
    A_ub = -np.hstack([A_in, np.eye(m)])
    bounds = [(None, None)] * n + [(0, None)] * m
    res = linprog(c, A_ub=A_ub, b_ub=-b_in, bounds=bounds, method="highs")
    if not res.success:
        return ["unknown"]
    slack = res.x[n:]
    names = []
    for gname, s in zip(groups, slack):
        base = gname.split("[")[0]
        if s > 1e-9 and base not in names:
            names.append(base)
    return names


def is_feasible(A_in, b_in) -> bool:
    """Independent LP feasibility check of ``A_in z >= b_in``."""
    n = A_in.shape[1]
    res = linprog(np.zeros(n), A_ub=-A_in, b_ub=-b_in, bounds=[(None, None)] * n, method="highs")
    return res.status == 0


def replan_shift(plan: ReferencePlan, elapsed: float, T_fine: float = None):
    """Reference sample ``elapsed`` seconds into ``plan``.

    Returns ``(x_ref (2, 3), u_ref (2,))``, integrating the plan's piecewise
    constant jerk exactly from the last planner sample.
    """
    if not 0 <= elapsed < plan.horizon - 1e-12:
        raise StalePlanError(f"elapsed {elapsed} outside plan horizon {plan.horizon}")
    k = min(int(np.floor(elapsed / plan.T_mpc + 1e-9)), plan.N - 1)
    tau = elapsed - k * plan.T_mpc
    x = plan.states[:, k].copy()
    u = plan.jerks[:, k].copy()
    if tau > 1e-12:
        if T_fine is None:
            sys = SystemMatrices(tau, 1.0)
            x = np.array([step_dynamics(x[a], u[a], sys) for a in range(2)])
        else:
            sys = SystemMatrices(T_fine, 1.0)
            for _ in range(int(round(tau / T_fine))):
                x = np.array([step_dynamics(x[a], u[a], sys) for a in range(2)])
    return x, u
