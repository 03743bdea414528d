"""Time-varying dynamical systems and the canonical rollout.

Time indices are zero-based throughout the package: a horizon-``T`` rollout
visits ``t = 0, ..., T-1`` and produces ``T + 1`` states, the last of which is
never costed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class DimensionError(ValueError):
    """Raised when an array does not match the system's dimensions."""

    def __init__(self, axis: str, expected, got):
        self.axis = axis
        self.expected = expected
        self.got = got
        super().__init__(f"dimension mismatch on {axis}: expected {expected}, got {got}")


class DivergedRolloutError(RuntimeError):
    """Raised when a rollout produces a non-finite state."""

    def __init__(self, step: int):
        self.step = step
        super().__init__(f"rollout diverged at step {step}")


class ConfigError(ValueError):
    pass


def _check_vec(v, dim: int, axis: str) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape != (dim,):
        raise DimensionError(axis, (dim,), v.shape)
    return v


def spectral_norm(m: np.ndarray) -> float:
    return float(np.linalg.norm(np.atleast_2d(m), 2))


@dataclass(frozen=True, eq=False)
class LinearSystem:
    """x_{t+1} = A_t x_t + B_t u_t.

    ``A`` has shape (T, dx, dx) and ``B`` (T, dx, du).  ``K`` is an optional
    pre-stabilizing gain sequence (T, du, dx) used by the weaker strong
    stability notion; see :meth:`stabilized`.
    """

    A: np.ndarray
    B: np.ndarray
    kappa: float | None = None
    delta: float | None = None
    K: np.ndarray | None = None

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        B = np.asarray(self.B, dtype=float)
        if A.ndim != 3 or A.shape[1] != A.shape[2]:
            raise DimensionError("A", "(T, dx, dx)", A.shape)
        if B.ndim != 3 or B.shape[:2] != A.shape[:2]:
            raise DimensionError("B", (A.shape[0], A.shape[1], "du"), B.shape)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        if self.K is not None:
            K = np.asarray(self.K, dtype=float)
            if K.shape != (A.shape[0], B.shape[2], A.shape[1]):
                raise DimensionError("K", (A.shape[0], B.shape[2], A.shape[1]), K.shape)
            object.__setattr__(self, "K", K)

    @classmethod
    def time_invariant(cls, A, B, T: int, **kwargs) -> "LinearSystem":
        A = np.atleast_2d(np.asarray(A, dtype=float))
        B = np.asarray(B, dtype=float)
        if B.ndim == 1:
            B = B.reshape(-1, 1)
        return cls(np.repeat(A[None], T, axis=0), np.repeat(B[None], T, axis=0), **kwargs)

    @property
    def T(self) -> int:
        return self.A.shape[0]

    @property
    def state_dim(self) -> int:
        return self.A.shape[1]

    @property
    def action_dim(self) -> int:
        return self.B.shape[2]

    def transition(self, t: int, x, u) -> np.ndarray:
        return self.A[t] @ x + self.B[t] @ u

    def jacobian_x(self, t: int, x=None, u=None) -> np.ndarray:
        return self.A[t]

    def jacobian_u(self, t: int, x=None, u=None) -> np.ndarray:
        return self.B[t]

    def jacobians(self, t: int, x=None, u=None) -> tuple[np.ndarray, np.ndarray]:
        return self.A[t], self.B[t]

    def closed_loop_A(self) -> np.ndarray:
        if self.K is None:
            return self.A
        return self.A - self.B @ self.K

    def stabilized(self) -> "LinearSystem":
        """The equivalent system with the linear policy -K_t x_t folded into A_t."""
        return LinearSystem(self.closed_loop_A(), self.B, self.kappa, self.delta)

    def is_strongly_stable(self, kappa: float | None = None, delta: float | None = None) -> bool:
        kappa = self.kappa if kappa is None else kappa
        delta = self.delta if delta is None else delta
        if kappa is None or delta is None:
            raise ConfigError("kappa and delta are required for a strong stability check")
        tol = 1e-12
        for t in range(self.T):
            if spectral_norm(self.closed_loop_A()[t]) > 1 - delta + tol:
                return False
            if spectral_norm(self.B[t]) > kappa + tol:
                return False
            if self.K is not None and spectral_norm(self.K[t]) > kappa + tol:
                return False
        return True


@dataclass(frozen=True, eq=False)
class NonlinearSystem:
    """Differentiable simulator with per-step transition and Jacobian maps."""

    T: int
    transition_fn: Callable
    jacobian_x_fn: Callable
    jacobian_u_fn: Callable
    state_dim: int
    action_dim: int
    name: str = "nonlinear"
    params: dict = field(default_factory=dict)

    def transition(self, t: int, x, u) -> np.ndarray:
        return self.transition_fn(t, x, u)

    def jacobian_x(self, t: int, x, u) -> np.ndarray:
        return self.jacobian_x_fn(t, x, u)

    def jacobian_u(self, t: int, x, u) -> np.ndarray:
        return self.jacobian_u_fn(t, x, u)

    def jacobians(self, t: int, x, u) -> tuple[np.ndarray, np.ndarray]:
        return self.jacobian_x_fn(t, x, u), self.jacobian_u_fn(t, x, u)


class PerturbedSystem:
    """The real system g_t = f_t + w_t for one rollout of a disturbance model.

    Jacobians include the disturbance's state dependence, which is what an
    agent with access to the real dynamics would linearize.
    """

    def __init__(self, base, disturbance, rollout_index: int = 0):
        self.base = base
        self.disturbance = disturbance
        self.rollout_index = rollout_index

    T = property(lambda self: self.base.T)
    state_dim = property(lambda self: self.base.state_dim)
    action_dim = property(lambda self: self.base.action_dim)

    def transition(self, t, x, u):
        return self.base.transition(t, x, u) + self.disturbance(self.rollout_index, t, x, u)

    def jacobians(self, t, x, u):
        fx, fu = self.base.jacobians(t, x, u)
        dx = self.disturbance.jacobian_x(self.rollout_index, t, x, u)
        return fx + dx, fu

    def jacobian_x(self, t, x, u):
        return self.jacobians(t, x, u)[0]

    def jacobian_u(self, t, x, u):
        return self.jacobians(t, x, u)[1]


def step(system, t: int, x, u, w) -> np.ndarray:
    """One application of x_{t+1} = f_t(x_t, u_t) + w_t."""
    if not 0 <= t < system.T:
        raise DimensionError("t", f"[0, {system.T})", t)
    x = _check_vec(x, system.state_dim, "state")
    u = _check_vec(u, system.action_dim, "action")
    w = _check_vec(w, system.state_dim, "disturbance")
    return system.transition(t, x, u) + w


@dataclass(eq=False)
class RolloutRecord:
    states: np.ndarray  # (T + 1, dx)
    actions: np.ndarray  # (T, du)
    disturbances: np.ndarray  # (T, dx)
    offsets: np.ndarray  # (T, du)
    costs: np.ndarray  # (T,)

    @property
    def T(self) -> int:
        return self.actions.shape[0]

    @property
    def loss(self) -> float:
        return float(np.sum(self.costs) / self.T)


def disturbance_source(source, rollout_index: int, T: int, dx: int) -> Callable:
    """Normalize a disturbance spec into a callable ``(t, x, u) -> w``.

    Accepts None (no disturbance), an explicit (T, dx) array, a callable of
    ``(t, x, u)``, or a model exposing ``__call__(i, t, x, u)`` with an
    ``is_model`` marker (see :class:`igpc.disturbances.DisturbanceModel`).
    """
    if source is None:
        zero = np.zeros(dx)
        return lambda t, x, u: zero
    if getattr(source, "is_model", False):
        return lambda t, x, u: source(rollout_index, t, x, u)
    if callable(source):
        return source
    arr = np.asarray(source, dtype=float)
    if arr.shape != (T, dx):
        raise DimensionError("disturbances", (T, dx), arr.shape)
    return lambda t, x, u: arr[t]


def rollout(system, policy, cost, disturbances=None, x0=None, rollout_index: int = 0) -> RolloutRecord:
    """Execute ``policy`` on ``system`` for the full horizon.

    The policy is reset with the system it acts on, queried with the current
    state before each action, and told about each transition afterwards.
    """
    T, dx, du = system.T, system.state_dim, system.action_dim
    w_fn = disturbance_source(disturbances, rollout_index, T, dx)
    xs = np.zeros((T + 1, dx))
    if x0 is not None:
        xs[0] = _check_vec(x0, dx, "x0")
    us = np.zeros((T, du))
    ws = np.zeros((T, dx))
    cs = np.zeros(T)
    policy.reset(system)
    for t in range(T):
        x = xs[t]
        u = np.asarray(policy.act(t, x), dtype=float)
        if u.shape != (du,):
            raise DimensionError("action", (du,), u.shape)
        w = np.asarray(w_fn(t, x, u), dtype=float)
        cs[t] = cost.value(t, x, u)
        x_next = system.transition(t, x, u) + w
        if not np.all(np.isfinite(x_next)):
            raise DivergedRolloutError(t)
        xs[t + 1], us[t], ws[t] = x_next, u, w
        policy.observe(t, x, u, x_next)
    return RolloutRecord(xs, us, ws, np.zeros((T, du)), cs)


def open_loop_states(system, actions, disturbances, x0=None) -> np.ndarray:
    """States produced by playing ``actions`` open loop under fixed ``disturbances``."""
    T, dx = system.T, system.state_dim
    xs = np.zeros((T + 1, dx))
    if x0 is not None:
        xs[0] = x0
    for t in range(T):
        xs[t + 1] = system.transition(t, xs[t], actions[t]) + disturbances[t]
    return xs


def open_loop_loss(system, actions, disturbances, cost, x0=None) -> float:
    xs = open_loop_states(system, actions, disturbances, x0)
    T = system.T
    return float(sum(cost.value(t, xs[t], actions[t]) for t in range(T)) / T)


def finite_difference_jacobians(system, t: int, x, u, eps: float = 1e-6):
    """Central-difference Jacobians of ``system.transition``; a test oracle."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    fx = np.zeros((x.size, x.size))
    fu = np.zeros((x.size, u.size))
    for i in range(x.size):
        h = eps * max(1.0, abs(x[i]))
        e = np.zeros_like(x)
        e[i] = h
        fx[:, i] = (system.transition(t, x + e, u) - system.transition(t, x - e, u)) / (2 * h)
    for i in range(u.size):
        h = eps * max(1.0, abs(u[i]))
        e = np.zeros_like(u)
        e[i] = h
        fu[:, i] = (system.transition(t, x, u + e) - system.transition(t, x, u - e)) / (2 * h)
    return fx, fu
