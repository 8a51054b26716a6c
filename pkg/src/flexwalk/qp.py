"""Dense convex QP solve with KKT diagnostics (Goldfarb-Idnani via quadprog)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import quadprog


class QPInfeasibleError(RuntimeError):
    pass


@dataclass
class QPResult:
    z: np.ndarray
    objective: float
    eq_multipliers: np.ndarray
    ineq_multipliers: np.ndarray
    kkt: dict

    @property
    def kkt_residual(self) -> float:
        return max(self.kkt.values())


def kkt_residuals(H, g, A_eq, b_eq, A_in, b_in, z, lam_eq, lam_in) -> dict:
    """Infinity-norm KKT residuals of ``min 1/2 z'Hz + g'z, A_eq z = b_eq, A_in z >= b_in``."""
    grad = H @ z + g - A_eq.T @ lam_eq - A_in.T @ lam_in
    slack = A_in @ z - b_in
    out = {
        "stationarity": float(np.max(np.abs(grad), initial=0.0)),
        "primal_eq": float(np.max(np.abs(A_eq @ z - b_eq), initial=0.0)),
        "primal_ineq": float(np.max(-slack, initial=0.0)),
        "dual": float(np.max(-lam_in, initial=0.0)),
        "complementarity": float(np.max(np.abs(lam_in * slack), initial=0.0)),
    }
    return {k: max(v, 0.0) for k, v in out.items()}


def solve_qp(H, g, A_eq=None, b_eq=None, A_in=None, b_in=None) -> QPResult:
    H = np.asarray(H, float)
    g = np.asarray(g, float)
    n = g.size
    A_eq = np.zeros((0, n)) if A_eq is None else np.atleast_2d(np.asarray(A_eq, float))
    b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, float).ravel()
    A_in = np.zeros((0, n)) if A_in is None else np.atleast_2d(np.asarray(A_in, float))
    b_in = np.zeros(0) if b_in is None else np.asarray(b_in, float).ravel()
    meq = A_eq.shape[0]
    C = np.vstack([A_eq, A_in]).T
    b = np.concatenate([b_eq, b_in])
    Hs = 0.5 * (H + H.T)
    try:
        if C.shape[1] == 0:
            z = np.linalg.solve(Hs, -g)
            lam = np.zeros(0)
        else:
            z, _, _, _, lam, _ = quadprog.solve_qp(Hs, -g, C, b, meq)
    except ValueError as exc:
        raise QPInfeasibleError(str(exc)) from exc
    lam_eq, lam_in = lam[:meq], lam[meq:]
    kkt = kkt_residuals(Hs, g, A_eq, b_eq, A_in, b_in, z, lam_eq, lam_in)
    obj = float(0.5 * z @ Hs @ z + g @ z)
    return QPResult(z, obj, lam_eq, lam_in, kkt)
