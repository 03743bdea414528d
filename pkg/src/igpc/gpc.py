"""Gradient perturbation controller: the inner online learner.

At step t the learner holds DAC matrices M (L, du, dx).  After observing
w_t it takes a projected gradient step on the surrogate loss

    c_t(x_hat_t, u_t + sum_r M_r w_{t-r})

where x_hat_t is reached by restarting from the zero state S steps back and
replaying the base actions u_{t-S..t-1} with M held fixed.

Window convention (zero-based t, entries before time 0 are zero):
    u  -- base actions u_{t-S}, ..., u_t                (S + 1 rows)
    w  -- disturbances w_{t-S-L}, ..., w_{t-1}          (S + L rows)
    steps -- (system, j) for j = t-S, ..., t-1, or None for j < 0
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .dynamics import ConfigError, DimensionError, DivergedRolloutError, RolloutRecord, disturbance_source
from .policies import project_spectral


@dataclass(frozen=True)
class GPCParams:
    L: int = 3
    S: int = 3
    eta_in: float = 1e-3
    gamma: float = 1.0

    def __post_init__(self):
        if self.L < 1 or self.S < 1:
            raise ConfigError("L and S must be >= 1")
        if self.eta_in < 0:
            raise ConfigError("eta_in must be nonnegative")
        if self.gamma < 0:
            raise ConfigError("gamma must be nonnegative")


@dataclass(eq=False)
class GPCWindow:
    t: int
    u: np.ndarray
    w: np.ndarray
    steps: list

    @property
    def S(self) -> int:
        return len(self.steps)

    def validate(self, L: int) -> None:
        S = self.S
        if self.u.shape[0] != S + 1:
            raise DimensionError("u_window", S + 1, self.u.shape[0])
        if self.w.shape[0] != S + L:
            raise DimensionError("w_window", S + L, self.w.shape[0])


def _history(w, end: int, L: int) -> np.ndarray:
    """[w_{p-1}, ..., w_{p-L}] for window position p = ``end``."""
    return w[end - L : end][::-1]


def _forward(M, window: GPCWindow):
    L = M.shape[0]
    window.validate(L)
    S = window.S
    dx = window.w.shape[1]
    ys = np.zeros((S + 1, dx))
    acts = np.zeros((S, M.shape[1]))
    for k in range(S):
        acts[k] = window.u[k] + np.einsum("rij,rj->i", M, _history(window.w, k + L, L))
        step = window.steps[k]
        if step is None:
            ys[k + 1] = 0.0
        else:
            system, j = step
            ys[k + 1] = system.transition(j, ys[k], acts[k]) + window.w[k + L]
    a_t = window.u[S] + np.einsum("rij,rj->i", M, _history(window.w, S + L, L))
    return ys, acts, a_t


def surrogate_state(M, window: GPCWindow) -> np.ndarray:
    return _forward(np.asarray(M, dtype=float), window)[0][-1]


def gpc_loss(M, window: GPCWindow, cost) -> float:
    ys, _, a_t = _forward(np.asarray(M, dtype=float), window)
    return float(cost.value(window.t, ys[-1], a_t))


def gpc_loss_grad(M, window: GPCWindow, cost) -> np.ndarray:
    """Gradient of :func:`gpc_loss` in M by reverse accumulation."""
    M = np.asarray(M, dtype=float)
    L = M.shape[0]
    S = window.S
    ys, acts, a_t = _forward(M, window)
    gx, gu = cost.grad(window.t, ys[-1], a_t)
    grad = np.einsum("i,rj->rij", gu, _history(window.w, S + L, L))
    lam = np.asarray(gx, dtype=float)
    for k in range(S - 1, -1, -1):
        step = window.steps[k]
        if step is None:
            break
        system, j = step
        fx, fu = system.jacobians(j, ys[k], acts[k])
        grad += np.einsum("i,rj->rij", fu.T @ lam, _history(window.w, k + L, L))
        lam = fx.T @ lam
    return grad


@dataclass(eq=False)
class GPCState:
    """Learner state carried through one rollout.

    ``M_trace`` holds M_t for every step (M_0 first, final M last) and
    ``grad_norms`` the Frobenius norm of each surrogate gradient.
    """

    params: GPCParams
    M: np.ndarray
    w_buf: deque
    u_buf: deque
    step_buf: deque
    t: int = 0
    M_trace: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)

    @classmethod
    def initial(cls, params: GPCParams, du: int, dx: int, M0=None) -> "GPCState":
        L, S = params.L, params.S
        M = np.zeros((L, du, dx)) if M0 is None else project_spectral(M0, params.gamma)
        return cls(
            params,
            M,
            deque([np.zeros(dx) for _ in range(S + L)], maxlen=S + L),
            deque([np.zeros(du) for _ in range(S)], maxlen=S + 1),
            deque([None] * S, maxlen=S),
            M_trace=[M.copy()],
        )

    def offset(self) -> np.ndarray:
        L = self.params.L
        recent = np.array(self.w_buf)[-L:][::-1]
        return np.einsum("rij,rj->i", self.M, recent)

    def window(self) -> GPCWindow:
        return GPCWindow(self.t, np.array(self.u_buf), np.array(self.w_buf), list(self.step_buf))


def gpc_rollout(system, base_policy, cost, params: GPCParams, disturbances=None, x0=None,
                rollout_index: int = 0, M0=None):
    """Run the base policy with the GPC overlay; returns (RolloutRecord, GPCState).

    ``system`` is the learner's model f; the real next state is
    ``f_t(x_t, a_t) + w_t`` with w_t drawn from ``disturbances``.  The learner
    only sees w_t through x_{t+1} - f_t(x_t, a_t).
    """
    T, dx, du = system.T, system.state_dim, system.action_dim
    w_fn = disturbance_source(disturbances, rollout_index, T, dx)
    state = GPCState.initial(params, du, dx, M0)
    xs = np.zeros((T + 1, dx))
    if x0 is not None:
        xs[0] = x0
    acts = np.zeros((T, du))
    ws = np.zeros((T, dx))
    offs = np.zeros((T, du))
    cs = np.zeros(T)
    base_policy.reset(system)
    for t in range(T):
        x = xs[t]
        state.t = t
        o = state.offset()
        base = np.asarray(base_policy.act(t, x), dtype=float)
        state.u_buf.append(base)
        a = base + o
        cs[t] = cost.value(t, x, a)
        fxa = system.transition(t, x, a)
        x_next = fxa + np.asarray(w_fn(t, x, a), dtype=float)
        if not np.all(np.isfinite(x_next)):
            raise DivergedRolloutError(t)
        w = x_next - fxa
        if params.eta_in > 0:
            g = gpc_loss_grad(state.M, state.window(), cost)
            state.grad_norms.append(float(np.linalg.norm(g)))
            state.M = project_spectral(state.M - params.eta_in * g, params.gamma)
        else:
            state.grad_norms.append(0.0)
        state.M_trace.append(state.M.copy())
        state.w_buf.append(w)
        state.step_buf.append((system, t))
        base_policy.observe(t, x, a, x_next)
        xs[t + 1], acts[t], ws[t], offs[t] = x_next, a, w, o
    state.t = T
    return RolloutRecord(xs, acts, ws, offs, cs), state


# --- parameter schedules ---------------------------------------------------


def theorem_eta_in(kappa, delta, gamma, beta, G, L, W, U) -> float:
    """Inner learning rate of the regret-bound schedule (constants floored at 1)."""
    kappa, gamma, beta, G, W, U = (max(v, 1.0) for v in (kappa, gamma, beta, G, W, U))
    denom = math.sqrt(12 * gamma * kappa**4 * delta**-5 * beta * G**2 * L**3 * W**3 * (U + gamma * L * W) ** 2)
    return gamma**2 * L**2 / denom


def theorem_lookback(delta: float, eta_in: float) -> int:
    """S = ceil(log(1/eta_in) / delta), the positive reading of the lookback rule."""
    if not 0 < eta_in < 1:
        raise ConfigError("the lookback rule needs 0 < eta_in < 1")
    return max(1, math.ceil(math.log(1.0 / eta_in) / delta))
