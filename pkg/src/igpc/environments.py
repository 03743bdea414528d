"""Benchmark environments.

Physical constants for the quadrotor and reacher are implementation choices;
both are discretized by explicit Euler.

planar_quadrotor
    state (px, py, theta, vx, vy, omega); action = per-rotor thrust minus half
    the hover thrust, so the zero action hovers.  Defaults: mass 1, arm
    length 1, inertia 1, g = 9.81, dt = 0.05.
reacher_2dof
    horizontal two-link arm, state (q1, q2, dq1, dq2, ex, ey) where (ex, ey)
    is the end-effector position after the step; action = joint torques.
    Defaults: unit link masses and lengths, rod inertias m l^2 / 12, joint
    damping 0.1, dt = 0.05.  Jacobians are computed by complex-step
    differentiation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .costs import QuadraticCost
from .disturbances import DisturbanceModel
from .dynamics import ConfigError, LinearSystem, NonlinearSystem

ENVIRONMENTS = ("double_integrator", "planar_quadrotor", "reacher_2dof")


@dataclass(frozen=True, eq=False)
class Environment:
    name: str
    system: object
    cost: QuadraticCost
    goal: np.ndarray
    x0: np.ndarray
    params: dict = field(default_factory=dict)

    def disturbance(self, kind: str, magnitude: float, seed: int = 0, **params) -> DisturbanceModel:
        """Disturbance model with this environment's slot layout filled in."""
        defaults = {}
        if self.name == "planar_quadrotor":
            defaults = dict(position_index=(0, 1), velocity_index=(3, 4), dt=self.params["dt"],
                            center=self.params.get("field_center", (0.0, 0.0)))
        elif self.name == "reacher_2dof":
            defaults = dict(velocity_index=(2, 3), dt=self.params["dt"])
        elif kind == "periodic_impulse":
            defaults = dict(velocity_index=(1,))
        defaults.update(params)
        return DisturbanceModel(kind, self.system.state_dim, magnitude=magnitude, seed=seed, **defaults)


def double_integrator(T: int = 100, action_weight: float = 1.0, stabilizer=None, x0=None) -> Environment:
    A = np.array([[1.0, 1.0], [0.0, 1.0]])
    B = np.array([[0.0], [1.0]])
    K = None
    if stabilizer is not None:
        K = np.repeat(np.atleast_2d(np.asarray(stabilizer, dtype=float))[None], T, axis=0)
    system = LinearSystem.time_invariant(A, B, T, K=K)
    if K is not None:
        system = system.stabilized()
    cost = QuadraticCost(np.eye(2), action_weight * np.eye(1))
    x0 = np.zeros(2) if x0 is None else np.asarray(x0, dtype=float)
    return Environment("double_integrator", system, cost, np.zeros(2), x0, dict(T=T, action_weight=action_weight))


def _quadrotor_fns(mass, length, inertia, gravity, dt):
    def transition(t, x, u):
        px, py, th, vx, vy, om = x
        thrust = u[0] + u[1] + mass * gravity
        ax = -thrust * np.sin(th) / mass
        ay = thrust * np.cos(th) / mass - gravity
        al = length * (u[0] - u[1]) / inertia
        return np.array([px + dt * vx, py + dt * vy, th + dt * om, vx + dt * ax, vy + dt * ay, om + dt * al])

    def jac_x(t, x, u):
        th = x[2]
        thrust = u[0] + u[1] + mass * gravity
        J = np.eye(6)
        J[0, 3] = J[1, 4] = J[2, 5] = dt
        J[3, 2] = -dt * thrust * np.cos(th) / mass
        J[4, 2] = -dt * thrust * np.sin(th) / mass
        return J

    def jac_u(t, x, u):
        th = x[2]
        J = np.zeros((6, 2))
        J[3, :] = -dt * np.sin(th) / mass
        J[4, :] = dt * np.cos(th) / mass
        J[5, 0] = dt * length / inertia
        J[5, 1] = -dt * length / inertia
        return J

    return transition, jac_x, jac_u


def planar_quadrotor(
    T: int = 100,
    dt: float = 0.05,
    mass: float = 1.0,
    length: float = 1.0,
    inertia: float = 1.0,
    gravity: float = 9.81,
    goal=(1.0, 1.0),
    position_weight: float = 1.0,
    velocity_weight: float = 0.0,
    action_weight: float = 0.1,
    frame: str = "world",
) -> Environment:
    """Planar quadrotor flying from the origin to ``goal``.

    With ``frame="goal"`` positions are measured from the goal: the start is
    -goal, the cost target is zero, and a wind field keeps its world center
    (reported as ``params["field_center"]``).  The dynamics do not depend on
    position, so only the coordinates change.
    """
    if frame not in ("world", "goal"):
        raise ConfigError(f"unknown frame {frame!r}; valid frames: world, goal")
    f, fx, fu = _quadrotor_fns(mass, length, inertia, gravity, dt)
    params = dict(T=T, dt=dt, mass=mass, length=length, inertia=inertia, gravity=gravity)
    system = NonlinearSystem(T, f, fx, fu, 6, 2, name="planar_quadrotor", params=params)
    goal_state = np.zeros(6)
    x0 = np.zeros(6)
    if frame == "world":
        goal_state[:2] = goal
    else:
        x0[:2] = -np.asarray(goal, dtype=float)
    Q = np.diag([position_weight] * 2 + [0.0] + [velocity_weight] * 2 + [0.0])
    cost = QuadraticCost(Q, action_weight * np.eye(2), goal_state)
    params.update(goal=tuple(goal), action_weight=action_weight, frame=frame, field_center=tuple(x0[:2]))
    return Environment("planar_quadrotor", system, cost, goal_state, x0, params)


def _complex_step_jacobian(fn, x, argnum, h=1e-30):
    # exact to rounding for real-analytic fn; requires complex-safe numpy code
    base = [np.asarray(a, dtype=complex) for a in x]
    n = base[argnum].size
    cols = []
    for i in range(n):
        args = [a.copy() for a in base]
        args[argnum][i] += 1j * h
        cols.append(np.imag(fn(*args)) / h)
    return np.array(cols).T


def _reacher_fns(m1, m2, l1, l2, damping, dt):
    lc1, lc2 = l1 / 2, l2 / 2
    I1, I2 = m1 * l1**2 / 12, m2 * l2**2 / 12

    def fk(q):
        return np.array(
            [l1 * np.cos(q[0]) + l2 * np.cos(q[0] + q[1]), l1 * np.sin(q[0]) + l2 * np.sin(q[0] + q[1])]
        )

    def dyn(x, u):
        q, dq = x[:2], x[2:4]
        c2, s2 = np.cos(q[1]), np.sin(q[1])
        m11 = m1 * lc1**2 + m2 * (l1**2 + lc2**2 + 2 * l1 * lc2 * c2) + I1 + I2
        m12 = m2 * (lc2**2 + l1 * lc2 * c2) + I2
        m22 = m2 * lc2**2 + I2
        h = m2 * l1 * lc2 * s2
        bias = np.array([-h * (2 * dq[0] * dq[1] + dq[1] ** 2), h * dq[0] ** 2])
        rhs = u - bias - damping * dq
        det = m11 * m22 - m12 * m12
        ddq = np.array([m22 * rhs[0] - m12 * rhs[1], -m12 * rhs[0] + m11 * rhs[1]]) / det
        q_next = q + dt * dq
        dq_next = dq + dt * ddq
        return np.concatenate([q_next, dq_next, fk(q_next)])

    def transition(t, x, u):
        return dyn(np.asarray(x, dtype=float), np.asarray(u, dtype=float)).real

    def jac_x(t, x, u):
        return _complex_step_jacobian(dyn, (x, u), 0)

    def jac_u(t, x, u):
        return _complex_step_jacobian(dyn, (x, u), 1)

    return transition, jac_x, jac_u, fk


def reacher_2dof(
    T: int = 100,
    dt: float = 0.05,
    link_mass=(1.0, 1.0),
    link_length=(1.0, 1.0),
    damping: float = 0.1,
    goal=(0.5, 1.0),
    position_weight: float = 1.0,
    action_weight: float = 0.01,
) -> Environment:
    f, fx, fu, fk = _reacher_fns(*link_mass, *link_length, damping, dt)
    reach = sum(link_length)
    if np.linalg.norm(goal) > reach:
        raise ConfigError(f"goal {goal} is outside the workspace radius {reach}")
    params = dict(T=T, dt=dt, link_mass=tuple(link_mass), link_length=tuple(link_length), damping=damping)
    system = NonlinearSystem(T, f, fx, fu, 6, 2, name="reacher_2dof", params=params)
    goal_state = np.zeros(6)
    goal_state[4:] = goal
    Q = np.diag([0.0] * 4 + [position_weight] * 2)
    cost = QuadraticCost(Q, action_weight * np.eye(2), goal_state)
    x0 = np.zeros(6)
    x0[4:] = fk(np.zeros(2))
    params.update(goal=tuple(goal), action_weight=action_weight)
    return Environment("reacher_2dof", system, cost, goal_state, x0, params)


def make_environment(name: str, **params) -> Environment:
    builders = {
        "double_integrator": double_integrator,
        "planar_quadrotor": planar_quadrotor,
        "reacher_2dof": reacher_2dof,
    }
    if name not in builders:
        raise ConfigError(f"unknown environment {name!r}; valid environments: {', '.join(ENVIRONMENTS)}")
    try:
        return builders[name](**params)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for {name}: {exc}") from None
