"""Dense convex quadratic programming for the planner subproblems.

    minimize   0.5 z' P z + q' z
    subject to A z <= b,  lb <= z <= ub

Primal-dual interior point (Mehrotra predictor-corrector) on the folded
inequality set.  The barrier path is indifferent to the degenerate vertices
the avoidance rows produce (slack-envelope kinks put redundant rows at the
optimum), where active-set logic cycles and operator splitting stalls.  A
final non-negative-least-squares polish sharpens the active multipliers.

Infeasibility is declared by a phase-1 feasibility LP with positive optimum
(solved exactly; the planner treats max_iter and infeasible alike).

Solver calls are stateless, deterministic, and independent across threads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import linprog, nnls

STATIONARITY_TOL = 1e-6
PRIMAL_TOL = 1e-7
COMPLEMENTARITY_TOL = 1e-6

_IPM_MAX_ITER_DEFAULT = 50
_PHASE1_TOL = 1e-9


@dataclass(frozen=True)
class QpProblem:
    P: np.ndarray
    q: np.ndarray
    A: np.ndarray
    b: np.ndarray
    lb: np.ndarray
    ub: np.ndarray

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float)
        q = np.asarray(self.q, dtype=float)
        A = np.asarray(self.A, dtype=float)
        b = np.asarray(self.b, dtype=float)
        n = q.size
        if A.size == 0:
            A = A.reshape(0, n)
            b = b.reshape(0)
        lb = np.asarray(self.lb, dtype=float)
        ub = np.asarray(self.ub, dtype=float)
        if P.shape != (n, n) or A.shape[1] != n or b.size != A.shape[0]:
            raise ValueError("inconsistent problem dimensions")
        if lb.shape != (n,) or ub.shape != (n,):
            raise ValueError("bounds must match the variable count")
        scale = max(np.abs(P).max(initial=0.0), 1.0)
        if np.abs(P - P.T).max(initial=0.0) > 1e-10 * scale:
            raise ValueError("P must be symmetric")
        if np.any(lb > ub):
            raise ValueError("lb must not exceed ub")
        for name, arr in (("P", P), ("q", q), ("A", A), ("b", b)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "lb", lb)
        object.__setattr__(self, "ub", ub)

    @property
    def n(self) -> int:
        return self.q.size

    @property
    def m(self) -> int:
        return self.b.size


@dataclass(frozen=True)
class QpSolution:
    z: np.ndarray
    status: str  # optimal | infeasible | max_iter
    kkt_residuals: tuple[float, float, float]  # stationarity, primal, complementarity
    iterations: int
    objective: float


_HESSIAN_MEMO: dict[bytes, np.ndarray] = {}


def _regularized_hessian(P: np.ndarray) -> np.ndarray:
    # the planner re-submits the same cost matrix thousands of times per
    # episode; key the PSD check and shift on the raw bytes
    key = P.tobytes()
    cached = _HESSIAN_MEMO.get(key)
    if cached is not None:
        return cached
    lam_min = float(np.linalg.eigvalsh(P)[0])
    if lam_min < -1e-9 * max(np.abs(P).max(initial=0.0), 1.0):
        raise ValueError(f"P has eigenvalue {lam_min:.3e}; not PSD")
    out = P + 1e-8 * np.eye(P.shape[0]) if lam_min < 1e-9 else P
    if len(_HESSIAN_MEMO) > 16:
        _HESSIAN_MEMO.clear()
    _HESSIAN_MEMO[key] = out
    return out


def _fold_constraints(p: QpProblem):
    """Stack A z <= b with the finite box rows into G z <= h."""
    blocks = [p.A]
    rhs = [p.b]
    fin_ub = np.isfinite(p.ub)
    fin_lb = np.isfinite(p.lb)
    eye = np.eye(p.n)
    if fin_ub.any():
        blocks.append(eye[fin_ub])
        rhs.append(p.ub[fin_ub])
    if fin_lb.any():
        blocks.append(-eye[fin_lb])
        rhs.append(-p.lb[fin_lb])
    return np.concatenate(blocks, axis=0), np.concatenate(rhs)


def _kkt_residuals_folded(P, q, G, h, z, y):
    # complementarity is measured relative to the row right-hand side, the
    # standard convention; stationarity and primal violation stay absolute
    stat = float(np.abs(P @ z + q + G.T @ y).max(initial=0.0))
    v = G @ z - h
    prim = float(np.maximum(v, 0.0).max(initial=0.0))
    comp = float((np.abs(y * v) / np.maximum(np.abs(h), 1.0)).max(initial=0.0))
    return stat, prim, comp


def _phase1_feasible(G, h, n) -> bool:
    """Exact feasibility check: min t s.t. G z - t <= h, t >= 0."""
    m = G.shape[0]
    A1 = np.hstack([G, -np.ones((m, 1))])
    c = np.zeros(n + 1)
    c[-1] = 1.0
    bounds = [(None, None)] * n + [(0.0, None)]
    res = linprog(c, A_ub=A1, b_ub=h, bounds=bounds, method="highs")
    return bool(res.status == 0 and res.fun <= _PHASE1_TOL)


def _nnls_polish(P, q, G, h, z):
    """Sharpen multipliers on the near-active rows; exact KKT or nothing."""
    v = G @ z - h
    order = np.argsort(v)[::-1]
    rows = order[: min(P.shape[0], np.sum(v > -1e-5))]
    rows = rows[v[rows] > -1e-5]
    if rows.size == 0:
        return None
    Gact = G[rows]
    KKT = np.block([[P, Gact.T], [Gact, -1e-12 * np.eye(rows.size)]])
    rhs = np.concatenate([-q, h[rows]])
    try:
        sol = np.linalg.solve(KKT, rhs)
        for _ in range(2):
            sol += np.linalg.solve(KKT, rhs - KKT @ sol)
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(KKT, rhs, rcond=None)[0]
    z_new = sol[: P.shape[0]]
    if np.max(G @ z_new - h, initial=0.0) > 1e-9:
        return None
    grad = P @ z_new + q
    try:
        lam, resid = nnls(Gact.T, -grad, maxiter=30 * max(rows.size, 1))
    except RuntimeError:
        return None
    if resid > STATIONARITY_TOL * np.sqrt(P.shape[0]):
        return None
    y = np.zeros(G.shape[0])
    y[rows] = lam
    res = _kkt_residuals_folded(P, q, G, h, z_new, y)
    if res[0] <= STATIONARITY_TOL and res[1] <= PRIMAL_TOL and res[2] <= COMPLEMENTARITY_TOL:
        return z_new, y, res
    return None


def solve(p: QpProblem, warm_start: np.ndarray | None = None, max_iter: int = _IPM_MAX_ITER_DEFAULT) -> QpSolution:
    """Solve the QP; see the module docstring for method and statuses."""
    P = _regularized_hessian(p.P)
    n = p.n
    chol = cho_factor(P)
    z_free = cho_solve(chol, -p.q)
    G, h = _fold_constraints(p)
    m = G.shape[0]
    if m == 0 or np.max(G @ z_free - h, initial=-np.inf) <= 1e-10:
        res = _kkt_residuals_folded(P, p.q, G, h, z_free, np.zeros(m))
        return QpSolution(
            z=z_free, status="optimal", kkt_residuals=res, iterations=0,
            objective=float(0.5 * z_free @ P @ z_free + p.q @ z_free),
        )

    h_scale = max(1.0, float(np.abs(h).max(initial=0.0)))
    q_scale = max(1.0, float(np.abs(p.q).max(initial=0.0)))

    # box rows of G are signed unit vectors; their Newton contribution is a
    # diagonal update, so split them off once
    m_a = p.m
    box_cols = np.concatenate(
        [np.flatnonzero(np.isfinite(p.ub)), np.flatnonzero(np.isfinite(p.lb))]
    )

    def newton_matrix(w):
        M = P.copy()
        if m_a:
            M += (p.A.T * w[:m_a]) @ p.A
        np.add.at(M, (box_cols, box_cols), w[m_a:])
        return M

    def max_step(v, dv):
        with np.errstate(divide="ignore", invalid="ignore"):
            ratios = np.where(dv < 0, v / -dv, np.inf)
        return min(1.0, float(ratios.min(initial=np.inf)))

    # infeasible-start Mehrotra predictor-corrector
    z = warm_start.astype(float).copy() if warm_start is not None else z_free.copy()
    s = np.maximum(h - G @ z, 1.0)
    y = np.ones(m)
    for it in range(1, max_iter + 1):
        r_d = P @ z + p.q + G.T @ y
        r_p = G @ z + s - h
        mu = float(s @ y) / m
        res = _kkt_residuals_folded(P, p.q, G, h, z, y)
        if (
            res[0] <= 1e-9 * q_scale
            and res[1] <= 1e-10 * h_scale
            and res[2] <= 1e-2 * COMPLEMENTARITY_TOL
        ):
            break

        if mu > 1e10 * h_scale or np.abs(y).max(initial=0.0) > 1e12:
            break  # diverging dual: settled by the phase-1 check below

        w = np.clip(y / np.maximum(s, 1e-14), 0.0, 1e14)
        M = newton_matrix(w)
        fac = None
        reg = 0.0
        for _ in range(6):
            try:
                fac = cho_factor(M if reg == 0.0 else M + reg * np.eye(n))
                break
            except np.linalg.LinAlgError:
                reg = max(reg * 1e3, 1e-12 * float(M.diagonal().max()))
        if fac is None:
            break

        # affine predictor
        rhs_aff = -r_d + G.T @ y - G.T @ (w * r_p)
        dz_aff = cho_solve(fac, rhs_aff)
        ds_aff = -r_p - G @ dz_aff
        dy_aff = -y - w * ds_aff

        alpha_aff = min(max_step(s, ds_aff), max_step(y, dy_aff))
        mu_aff = float((s + alpha_aff * ds_aff) @ (y + alpha_aff * dy_aff)) / m
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0

        # corrector with centering
        corr = (sigma * mu - ds_aff * dy_aff) / s
        rhs = rhs_aff - G.T @ corr
        dz = cho_solve(fac, rhs)
        ds = -r_p - G @ dz
        dy = -y - w * ds + corr
        alpha = 0.99 * min(max_step(s, ds), max_step(y, dy))
        z += alpha * dz
        s += alpha * ds
        y += alpha * dy

    res = _kkt_residuals_folded(P, p.q, G, h, z, y)
    polished = _nnls_polish(P, p.q, G, h, z)
    if polished is not None:
        z_pol, y_pol, res_pol = polished
        return QpSolution(
            z=z_pol, status="optimal", kkt_residuals=res_pol, iterations=it,
            objective=float(0.5 * z_pol @ P @ z_pol + p.q @ z_pol),
        )
    if res[0] <= STATIONARITY_TOL and res[1] <= PRIMAL_TOL and res[2] <= COMPLEMENTARITY_TOL:
        return QpSolution(
            z=z, status="optimal", kkt_residuals=res, iterations=it,
            objective=float(0.5 * z @ P @ z + p.q @ z),
        )
    status = "max_iter" if _phase1_feasible(G, h, n) else "infeasible"
    return QpSolution(
        z=z, status=status, kkt_residuals=res, iterations=it,
        objective=float(0.5 * z @ P @ z + p.q @ z) if status == "max_iter" else float("nan"),
    )
