"""Moving-obstacle models: constant velocity, drag ball, spinning disc.

The ball integrates linear-drag point dynamics, the disc a 12-state rigid
body with lift/drag affine and quadratic in angle of attack plus gyroscopic
precession.  Both use one RK4 step per sample period; the constant-velocity
sphere updates exactly.  Aerodynamic coefficients are configuration with
defaults at the magnitudes published for sports discs.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

GRAVITY = 9.81

CONSTANT_VELOCITY = "constant_velocity"
DRAG_BALL = "drag_ball"
FRISBEE = "frisbee"

STATE_DIM = {CONSTANT_VELOCITY: 6, DRAG_BALL: 6, FRISBEE: 12}


@dataclass(frozen=True)
class DragBallParams:
    drag_rate: float = 0.3      # 1/s, force proportional to -v
    gravity: float = GRAVITY


@dataclass(frozen=True)
class DiscParams:
    """Flat-disc aerodynamics; lift/drag slopes vs angle of attack."""

    mass: float = 0.175
    diameter: float = 0.269
    air_density: float = 1.225
    inertia_planar: float = 1.219e-3   # about in-plane axes
    inertia_spin: float = 2.352e-3     # about the symmetry axis
    cl0: float = 0.33
    cl_alpha: float = 1.91
    cd0: float = 0.18
    cd_alpha: float = 0.69
    alpha0: float = -0.052
    cm0: float = -0.08
    cm_alpha: float = 0.43
    cm_q: float = -0.005
    cr_r: float = 0.0017
    cr_p: float = -0.0055
    cn_r: float = -3.41e-5
    gravity: float = GRAVITY

    @property
    def area(self) -> float:
        return np.pi * (self.diameter / 2.0) ** 2


@dataclass(frozen=True)
class ObstacleModel:
    kind: str
    state: np.ndarray
    radius: float
    params: object = None

    def __post_init__(self):
        if self.kind not in STATE_DIM:
            raise ValueError(f"unknown obstacle kind {self.kind!r}")
        state = np.asarray(self.state, dtype=float)
        if state.shape != (STATE_DIM[self.kind],) or not np.all(np.isfinite(state)):
            raise ValueError(f"{self.kind} needs a finite {STATE_DIM[self.kind]}-state")
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        object.__setattr__(self, "state", state)

    @property
    def center(self) -> np.ndarray:
        return self.state[:3]

    @property
    def velocity(self) -> np.ndarray:
        return self.state[3:6]


def make_constant_velocity(position, velocity, radius) -> ObstacleModel:
    return ObstacleModel(
        kind=CONSTANT_VELOCITY,
        state=np.concatenate([position, velocity]),
        radius=radius,
    )


def make_drag_ball(position, velocity, radius, params: DragBallParams | None = None):
    return ObstacleModel(
        kind=DRAG_BALL,
        state=np.concatenate([position, velocity]),
        radius=radius,
        params=params or DragBallParams(),
    )


def make_frisbee(position, velocity, radius, attitude=(0.0, 0.0, 0.0),
                 rates=(0.0, 0.0, 50.0), params: DiscParams | None = None):
    state = np.concatenate([position, velocity, attitude, rates])
    return ObstacleModel(kind=FRISBEE, state=state, radius=radius,
                         params=params or DiscParams())


def _ball_deriv(state, p: DragBallParams):
    d = np.empty(6)
    d[:3] = state[3:6]
    d[3:6] = -p.drag_rate * state[3:6]
    d[5] -= p.gravity
    return d


def _euler_rotation(phi, theta, psi):
    cf, sf = np.cos(phi), np.sin(phi)
    ct, st = np.cos(theta), np.sin(theta)
    cp, sp = np.cos(psi), np.sin(psi)
    return np.array(
        [
            [cp * ct, cp * st * sf - sp * cf, cp * st * cf + sp * sf],
            [sp * ct, sp * st * sf + cp * cf, sp * st * cf - cp * sf],
            [-st, ct * sf, ct * cf],
        ]
    )


def _disc_deriv(state, p: DiscParams):
    vel = state[3:6]
    phi, theta, psi = state[6:9]
    pr, qr, rr = state[9:12]
    R = _euler_rotation(phi, theta, psi)
    normal = R[:, 2]

    d = np.empty(12)
    d[:3] = vel
    accel = np.array([0.0, 0.0, -p.gravity])
    moment_body = np.zeros(3)
    speed = np.linalg.norm(vel)
    if speed > 1e-9:
        v_hat = vel / speed
        v_n = float(v_hat @ normal)
        planar = v_hat - v_n * normal
        planar_norm = np.linalg.norm(planar)
        alpha = np.arctan2(-v_n, max(planar_norm, 1e-12))
        q_dyn = 0.5 * p.air_density * p.area * speed * speed
        cl = p.cl0 + p.cl_alpha * alpha
        cd = p.cd0 + p.cd_alpha * (alpha - p.alpha0) ** 2
        drag = -q_dyn * cd * v_hat
        lift_dir = normal - v_n * v_hat
        lift_norm = np.linalg.norm(lift_dir)
        lift = q_dyn * cl * lift_dir / lift_norm if lift_norm > 1e-9 else np.zeros(3)
        accel = accel + (drag + lift) / p.mass
        if planar_norm > 1e-9:
            x_d = planar / planar_norm          # velocity projection in disc plane
            y_d = np.cross(normal, x_d)
            omega_inertial = R @ state[9:12]
            p_d = float(omega_inertial @ x_d)
            q_d = float(omega_inertial @ y_d)
            r_d = float(omega_inertial @ normal)
            m_roll = q_dyn * p.diameter * (p.cr_r * r_d + p.cr_p * p_d)
            m_pitch = q_dyn * p.diameter * (p.cm0 + p.cm_alpha * alpha + p.cm_q * q_d)
            m_spin = q_dyn * p.diameter * (p.cn_r * r_d)
            moment_body = R.T @ (m_roll * x_d + m_pitch * y_d + m_spin * normal)
    d[3:6] = accel

    # axisymmetric rigid body, body rates
    it, iz = p.inertia_planar, p.inertia_spin
    d[9] = (moment_body[0] + (it - iz) * qr * rr) / it
    d[10] = (moment_body[1] + (iz - it) * pr * rr) / it
    d[11] = moment_body[2] / iz
    # ZYX Euler kinematics
    tt = np.tan(theta)
    d[6] = pr + tt * (qr * np.sin(phi) + rr * np.cos(phi))
    d[7] = qr * np.cos(phi) - rr * np.sin(phi)
    d[8] = (qr * np.sin(phi) + rr * np.cos(phi)) / np.cos(theta)
    return d


def _rk4(deriv, state, dt, params):
    k1 = deriv(state, params)
    k2 = deriv(state + 0.5 * dt * k1, params)
    k3 = deriv(state + 0.5 * dt * k2, params)
    k4 = deriv(state + dt * k3, params)
    return state + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def step_obstacle(model: ObstacleModel, dt: float) -> ObstacleModel:
    if dt <= 0:
        raise ValueError("dt must be positive")
    if model.kind == CONSTANT_VELOCITY:
        state = model.state.copy()
        state[:3] += dt * state[3:6]
    elif model.kind == DRAG_BALL:
        state = _rk4(_ball_deriv, model.state, dt, model.params)
    else:
        state = _rk4(_disc_deriv, model.state, dt, model.params)
    return replace(model, state=state)
