"""Receding-horizon avoidance planner.

Each update convexifies the keep-out constraints around the previous
trajectory iterate, assembles the risk rows for every (step, obstacle) pair,
and solves the resulting QP over stacked controls and slack variables with a
shrinking trust region.  States are eliminated through the linear rollout,
so the QP size stays at horizon * (n_u + 3 * n_obs).

One planner instance per episode; instances are independent and safe to run
in parallel worker processes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import qp, risk

GRAVITY = 9.81


@dataclass(frozen=True)
class AgentModel:
    """Discrete-time linear agent x+ = A x + B u, outputs y = G x, position C x."""

    A: np.ndarray
    B: np.ndarray
    G: np.ndarray
    C: np.ndarray
    dt: float

    def __post_init__(self):
        n_x = self.A.shape[0]
        if self.A.shape != (n_x, n_x) or self.B.shape[0] != n_x:
            raise ValueError("A/B dimensions inconsistent")
        if self.G.shape[1] != n_x or self.C.shape != (3, n_x):
            raise ValueError("output maps must act on the state")
        if self.dt <= 0:
            raise ValueError("dt must be positive")

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B.shape[1]

    @property
    def n_y(self) -> int:
        return self.G.shape[0]


# State layout of the simulated quadrotor: [x vx y vy z vz yaw vyaw one].
# The trailing constant-one state carries gravity so the dynamics stay linear.
QUAD_POS = (0, 2, 4)
QUAD_OUT = (0, 2, 4, 6)
QUAD_NX = 9
QUAD_NU = 4


def discretize_quadrotor(dt: float, gravity: float = GRAVITY) -> AgentModel:
    """Zero-order-hold discretization of the four decoupled quadrotor chains.

    Continuous model: xdd = -g * pitch, ydd = g * roll, zdd = -u1 - g,
    yawdd = u4, with inputs u = [u1, pitch, roll, u4].  Each chain becomes
    [[1, dt], [0, 1]] with input column [dt^2/2, dt] times the channel gain;
    gravity enters the z chain through the constant-one state.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    A = np.eye(QUAD_NX)
    for row in (0, 2, 4, 6):
        A[row, row + 1] = dt
    A[4, 8] = -gravity * dt * dt / 2.0
    A[5, 8] = -gravity * dt
    B = np.zeros((QUAD_NX, QUAD_NU))
    gains = {0: (4, -1.0), 1: (0, -gravity), 2: (2, gravity), 3: (6, 1.0)}
    for u_idx, (row, gain) in gains.items():
        B[row, u_idx] = gain * dt * dt / 2.0
        B[row + 1, u_idx] = gain * dt
    G = np.zeros((4, QUAD_NX))
    for i, row in enumerate(QUAD_OUT):
        G[i, row] = 1.0
    C = np.zeros((3, QUAD_NX))
    for i, row in enumerate(QUAD_POS):
        C[i, row] = 1.0
    return AgentModel(A=A, B=B, G=G, C=C, dt=dt)


def quad_initial_state(position, velocity=(0.0, 0.0, 0.0), yaw=0.0, yaw_rate=0.0):
    x = np.zeros(QUAD_NX)
    x[[0, 2, 4]] = position
    x[[1, 3, 5]] = velocity
    x[6], x[7] = yaw, yaw_rate
    x[8] = 1.0
    return x


def _as_weight_matrix(w, n):
    w = np.asarray(w, dtype=float)
    if w.ndim == 1:
        if w.size != n:
            raise ValueError(f"expected {n} weights, got {w.size}")
        return np.diag(w)
    if w.shape != (n, n):
        raise ValueError(f"weight matrix must be {n}x{n}")
    return w


@dataclass(frozen=True)
class PlannerConfig:
    """Horizon, risk budget, trust-region schedule, costs and box sets."""

    horizon: int = 10
    epsilon: float = 0.05
    trust_init: float = 50.0
    trust_decay: float = 0.25
    scp_iters: int = 4
    q_weights: tuple = (10.0, 10.0, 10.0, 1.0)
    r_weights: tuple = (0.1, 1.0, 1.0, 0.1)
    # input effort is measured against the hover trim so altitude holds
    input_reference: tuple = (-GRAVITY, 0.0, 0.0, 0.0)
    input_lb: tuple = (-20.0, -0.5, -0.5, -5.0)
    input_ub: tuple = (20.0, 0.5, 0.5, 5.0)
    state_lb: tuple | None = None  # physical states, None = unbounded
    state_ub: tuple | None = None
    agent_radius: float = 0.25
    trust_from_init: bool = False  # radius trust_init*decay^(w-1) instead of ^w
    # iteration cap per subproblem; hitting it counts as an infeasible update,
    # which in practice only happens on (near-)infeasible grazing geometries
    qp_max_iter: int = 50

    def __post_init__(self):
        if not 0.0 < self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in (0, 1]")
        if not 0.0 < self.trust_decay < 1.0:
            raise ValueError("trust_decay must lie in (0, 1)")
        if self.scp_iters < 1 or self.horizon < 1:
            raise ValueError("scp_iters and horizon must be positive")

    def trust_radius(self, w: int) -> float:
        exponent = w - 1 if self.trust_from_init else w
        return self.trust_init * self.trust_decay**exponent


@dataclass
class PlanResult:
    controls: np.ndarray      # horizon x n_u
    states: np.ndarray        # (horizon + 1) x n_x, row 0 = x_init
    feasible: bool
    scp_trace: list[dict] = field(default_factory=list)
    solve_time: float = 0.0


def rollout(model: AgentModel, x_init: np.ndarray, controls: np.ndarray) -> np.ndarray:
    states = np.empty((controls.shape[0] + 1, model.n_x))
    states[0] = x_init
    for i, u in enumerate(controls):
        states[i + 1] = model.A @ states[i] + model.B @ u
    return states


def prediction_matrices(model: AgentModel, horizon: int):
    """Stacked rollout maps: x_i = Phi[i] x0 + Psi[i] U for i = 1..horizon."""
    n_x, n_u = model.n_x, model.n_u
    phi = np.empty((horizon, n_x, n_x))
    psi = np.zeros((horizon, n_x, horizon * n_u))
    phi[0] = model.A
    psi[0, :, :n_u] = model.B
    for i in range(1, horizon):
        phi[i] = model.A @ phi[i - 1]
        psi[i] = model.A @ psi[i - 1]
        psi[i, :, i * n_u:(i + 1) * n_u] = model.B
    return phi, psi


def tracking_cost(model: AgentModel, cfg: PlannerConfig, x_init, reference, phi, psi):
    """Quadratic tracking cost in the stacked controls: 0.5 U' P U + q' U."""
    H = cfg.horizon
    Q = _as_weight_matrix(cfg.q_weights, model.n_y)
    R = _as_weight_matrix(cfg.r_weights, model.n_u)
    GG = model.G
    # residual y_i - y_ref_i = G (phi_i x0 + psi_i U) - ref_i
    M = np.concatenate([GG @ psi[i] for i in range(H)], axis=0)   # (H*n_y, H*n_u)
    r0 = np.concatenate([GG @ (phi[i] @ x_init) - reference[i] for i in range(H)])
    Qb = np.kron(np.eye(H), Q)
    Rb = np.kron(np.eye(H), R)
    u_ref = np.tile(cfg.input_reference, H)
    P = 2.0 * (M.T @ Qb @ M + Rb)
    q = 2.0 * (M.T @ Qb @ r0 - Rb @ u_ref)
    return P, q


def lq_tracking_controls(model, cfg, x_init, reference, phi=None, psi=None):
    """Unconstrained finite-horizon tracking optimum (also the cold warm start)."""
    if phi is None or psi is None:
        phi, psi = prediction_matrices(model, cfg.horizon)
    P, q = tracking_cost(model, cfg, x_init, reference, phi, psi)
    U = np.linalg.solve(P, -q)
    return U.reshape(cfg.horizon, model.n_u)


def warm_start(prev_plan, x_init, reference, model, cfg):
    """Initial trajectory iterate: shifted previous plan, else the tracking optimum."""
    if prev_plan is not None and prev_plan.controls is not None:
        controls = np.vstack([prev_plan.controls[1:], prev_plan.controls[-1:]])
    else:
        controls = lq_tracking_controls(model, cfg, x_init, reference)
    return rollout(model, x_init, controls), controls


def shifted_fallback(prev_plan, model, x_init, controls_ws):
    if prev_plan is not None and prev_plan.controls is not None:
        controls = np.vstack([prev_plan.controls[1:], prev_plan.controls[-1:]])
    else:
        controls = controls_ws
    return controls, rollout(model, x_init, controls)


# Physical state rows (the constant-one state is exempt from boxes and trust).
def _physical_rows(n_x: int):
    return np.arange(n_x - 1)


def plan(
    x_init: np.ndarray,
    reference: np.ndarray,
    ensembles,
    r_bars,
    prev_plan: PlanResult | None,
    cfg: PlannerConfig,
    model: AgentModel,
) -> PlanResult:
    """One receding-horizon update.

    ``ensembles`` is a list of ForecastEnsemble (may be empty), ``r_bars`` the
    matching keep-out radii (obstacle radius estimate plus agent radius).
    Infeasibility of any subproblem aborts the sweep: the result reuses the
    previous plan shifted one step and is flagged infeasible for the metrics.
    """
    t0 = time.perf_counter()
    H = cfg.horizon
    n_x, n_u = model.n_x, model.n_u
    n_obs = len(ensembles)
    if reference.shape != (H, model.n_y):
        raise ValueError(f"reference must be {H}x{model.n_y}")
    if len(r_bars) != n_obs:
        raise ValueError("need one keep-out radius per ensemble")

    phi, psi = prediction_matrices(model, H)
    P_u, q_u = tracking_cost(model, cfg, x_init, reference, phi, psi)
    x_bar, controls = warm_start(prev_plan, x_init, reference, model, cfg)

    n_ctrl = H * n_u
    n_slack = 3 * H * n_obs
    n_var = n_ctrl + n_slack
    P = np.zeros((n_var, n_var))
    P[:n_ctrl, :n_ctrl] = P_u
    # tiny quadratic cost keeps the slack block well conditioned without
    # perturbing which constraints can be satisfied
    P[range(n_ctrl, n_var), range(n_ctrl, n_var)] = 1e-4
    q = np.zeros(n_var)
    q[:n_ctrl] = q_u

    lb = np.full(n_var, -np.inf)
    ub = np.full(n_var, np.inf)
    lb[:n_ctrl] = np.tile(cfg.input_lb, H)
    ub[:n_ctrl] = np.tile(cfg.input_ub, H)

    phys = _physical_rows(n_x)
    psi_phys = psi[:, phys, :]          # (H, n_phys, n_ctrl)
    phi_x0 = phi @ x_init               # (H, n_x)

    # state box rows (only finite entries contribute)
    state_rows = []
    state_rhs = []
    if cfg.state_lb is not None or cfg.state_ub is not None:
        s_lb = np.full(phys.size, -np.inf) if cfg.state_lb is None else np.asarray(cfg.state_lb)
        s_ub = np.full(phys.size, np.inf) if cfg.state_ub is None else np.asarray(cfg.state_ub)
        for i in range(H):
            for j, row in enumerate(phys):
                if np.isfinite(s_ub[j]):
                    state_rows.append((i, row, 1.0, s_ub[j]))
                if np.isfinite(s_lb[j]):
                    state_rows.append((i, row, -1.0, -s_lb[j]))

    trace: list[dict] = []
    feasible = True
    warm = None
    for w in range(1, cfg.scp_iters + 1):
        radius = cfg.trust_radius(w)
        rows_A = []
        rows_b = []
        for k, ens in enumerate(ensembles):
            preds = ens.predictions
            for i in range(1, H + 1):
                p_bar = model.C @ x_bar[i]
                grads, offsets = risk.linearize_ensemble(p_bar, preds[:, i - 1, :], r_bars[k])
                m = risk.moments_from_arrays(grads, offsets)
                c = risk.conditional_stats(m)
                rr = risk.build_risk_rows(m, c, cfg.epsilon, n_obs, model.C)
                lam_x = rr.matrix[:, :n_x]
                lam_s = rr.matrix[:, n_x:]
                block = np.zeros((7, n_var))
                block[:, :n_ctrl] = lam_x @ psi[i - 1]
                s0 = n_ctrl + 3 * (k * H + (i - 1))
                block[:, s0:s0 + 3] = lam_s
                rows_A.append(block)
                rows_b.append(rr.rhs - lam_x @ phi_x0[i - 1])
        # trust region around the current iterate, physical states only
        for i in range(H):
            blk = np.zeros((2 * phys.size, n_var))
            blk[: phys.size, :n_ctrl] = psi_phys[i]
            blk[phys.size:, :n_ctrl] = -psi_phys[i]
            offset = x_bar[i + 1, phys] - phi_x0[i, phys]
            rows_A.append(blk)
            rows_b.append(np.concatenate([radius + offset, radius - offset]))
        for i, row, sign, bound in state_rows:
            blk = np.zeros((1, n_var))
            blk[0, :n_ctrl] = sign * psi[i, row]
            rows_A.append(blk)
            rows_b.append(np.array([bound - sign * phi_x0[i, row]]))

        A_full = np.concatenate(rows_A, axis=0) if rows_A else np.zeros((0, n_var))
        b_full = np.concatenate(rows_b) if rows_b else np.zeros(0)
        if A_full.size:
            # far obstacles produce rows at coordinate-squared scale; unit
            # row norms keep the subproblem well conditioned
            norms = np.maximum(np.abs(A_full).max(axis=1), 1e-12)
            A_full = A_full / norms[:, None]
            b_full = b_full / norms
        problem = qp.QpProblem(P=P, q=q, A=A_full, b=b_full, lb=lb, ub=ub)
        sol = qp.solve(problem, warm_start=warm, max_iter=cfg.qp_max_iter)
        row = {
            "iteration": w,
            "radius": radius,
            "status": sol.status,
            "objective": sol.objective,
            "kkt_residuals": sol.kkt_residuals,
            "qp_iterations": sol.iterations,
        }
        if sol.status != "optimal":
            trace.append(row)
            feasible = False
            break
        warm = sol.z
        controls = sol.z[:n_ctrl].reshape(H, n_u)
        x_new = rollout(model, x_init, controls)
        row["iterate_deviation"] = float(
            np.abs(x_new[1:, phys] - x_bar[1:, phys]).max()
        )
        trace.append(row)
        x_bar = x_new

    if not feasible:
        controls, states = shifted_fallback(prev_plan, model, x_init, controls)
    else:
        states = x_bar
    return PlanResult(
        controls=controls,
        states=states,
        feasible=feasible,
        scp_trace=trace,
        solve_time=time.perf_counter() - t0,
    )
