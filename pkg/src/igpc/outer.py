"""Across-rollout plan refinement with the GPC overlay inside each rollout."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .dynamics import ConfigError, DimensionError, open_loop_loss
from .gpc import GPCParams, gpc_rollout
from .planner import LineSearch, lqr_update
from .policies import AffineGainPolicy, OpenLoopPlan, make_action_set, project_plan


def outer_gradient(plan, offsets, system, disturbances, cost, x0=None) -> np.ndarray:
    """Gradient of J(plan + offsets | w) in the plan, offsets held constant.

    One forward pass under the recorded disturbances and one adjoint pass;
    the terminal state carries no cost.
    """
    T, dx, du = system.T, system.state_dim, system.action_dim
    u = np.asarray(plan, dtype=float).reshape(-1, du)
    o = np.asarray(offsets, dtype=float).reshape(-1, du)
    w = np.asarray(disturbances, dtype=float)
    if u.shape[0] != T or o.shape[0] != T:
        raise DimensionError("horizon", T, (u.shape[0], o.shape[0]))
    if w.shape != (T, dx):
        raise DimensionError("disturbances", (T, dx), w.shape)
    a = u + o
    xs = np.zeros((T + 1, dx))
    if x0 is not None:
        xs[0] = x0
    for t in range(T):
        xs[t + 1] = system.transition(t, xs[t], a[t]) + w[t]
    grad = np.zeros((T, du))
    lam = np.zeros(dx)  # d(sum of costs)/dx_{t+1}
    for t in range(T - 1, -1, -1):
        gx, gu = cost.grad(t, xs[t], a[t])
        fx, fu = system.jacobians(t, xs[t], a[t])
        grad[t] = gu + fu.T @ lam
        lam = gx + fx.T @ lam
    return grad / T


def theorem_eta_out(U, G, kappa, delta, gamma, L, W, N) -> float:
    """Outer learning rate of the regret-bound schedule (constants floored at 1)."""
    U, G, kappa, gamma, W = (max(v, 1.0) for v in (U, G, kappa, gamma, W))
    return U / (G * kappa * delta**-2 * (kappa * U + kappa * gamma * L * W + W) * math.sqrt(N))


@dataclass
class IGPCConfig:
    """``eta_out`` may be a float or ``"theorem"``; the theorem schedule reads
    kappa, delta and W from ``theorem_constants``."""

    N: int
    gpc: GPCParams = field(default_factory=GPCParams)
    eta_out: float | str = 1e-2
    update_mode: str = "gradient"
    action_set: object = field(default_factory=lambda: {"ball": 1e3})
    line_search: LineSearch = field(default_factory=LineSearch)
    lqr_alpha: float = 1.0
    warm_start: bool = False
    theorem_constants: dict | None = None

    def __post_init__(self):
        if self.N < 1:
            raise ConfigError("N must be >= 1")
        if self.update_mode not in ("gradient", "lqr_step"):
            raise ConfigError(f"unknown update mode {self.update_mode!r}")
        self.action_set = make_action_set(self.action_set)
        if self.update_mode == "gradient":
            if self.eta_out == "theorem":
                if self.theorem_constants is None:
                    raise ConfigError("theorem schedule needs theorem_constants (kappa, delta, W, G)")
            elif not (isinstance(self.eta_out, (int, float)) and self.eta_out > 0):
                raise ConfigError("eta_out must be positive")

    def resolved_eta_out(self) -> float:
        if self.eta_out != "theorem":
            return float(self.eta_out)
        c = self.theorem_constants
        return theorem_eta_out(self.action_set.diameter, c["G"], c["kappa"], c["delta"],
                               self.gpc.gamma, self.gpc.L, c["W"], self.N)


@dataclass(eq=False)
class EpisodeResult:
    index: int
    record: object
    plan: np.ndarray
    loss: float
    wall_time: float
    final_M: np.ndarray | None = None


@dataclass(eq=False)
class IGPCResult:
    episodes: list
    plan: np.ndarray
    policy: object = None

    @property
    def losses(self) -> np.ndarray:
        return np.array([e.loss for e in self.episodes])


def _episode(env_stream, i):
    if callable(env_stream):
        return env_stream(i)
    try:
        return env_stream[i]
    except IndexError:
        raise ConfigError(f"environment stream ended before rollout {i}") from None


def igpc_run(env_stream, config: IGPCConfig, plan0=None, x0=None) -> IGPCResult:
    """Iterative GPC.

    ``env_stream`` is a sequence (or a callable of the rollout index) giving
    ``(system, disturbances, cost)`` per rollout.  In gradient mode the plan
    moves by projected gradient on the offsets-frozen loss; in lqr_step mode
    it is replaced by an affine-gain policy from one LQR step around the
    realized trajectory.
    """
    system, _, _ = _episode(env_stream, 0)
    T, du = system.T, system.action_dim
    plan = np.zeros((T, du)) if plan0 is None else project_plan(np.reshape(plan0, (T, du)), config.action_set)
    policy = OpenLoopPlan(plan)
    eta = config.resolved_eta_out() if config.update_mode == "gradient" else None
    episodes = []
    M_carry = None
    for i in range(config.N):
        system, disturbances, cost = _episode(env_stream, i)
        start = time.perf_counter()
        rec, state = gpc_rollout(system, policy, cost, config.gpc, disturbances, x0, rollout_index=i,
                                 M0=M_carry if config.warm_start else None)
        M_carry = state.M
        # base actions actually emitted; identical to the plan in gradient mode
        snapshot = plan.copy() if config.update_mode == "gradient" else rec.actions - rec.offsets
        if config.update_mode == "gradient":
            grad = outer_gradient(plan, rec.offsets, system, rec.disturbances, cost, x0)
            plan = project_plan(plan - eta * grad, config.action_set)
            policy = OpenLoopPlan(plan)
        else:
            _, _, policy = lqr_update(system, rec.states, rec.actions, cost, config.lqr_alpha,
                                      nominal_u=rec.actions - rec.offsets)
            plan = policy.nominal_u + policy.alpha * policy.k
        episodes.append(EpisodeResult(i, rec, snapshot, rec.loss, time.perf_counter() - start, state.M.copy()))
    return IGPCResult(episodes, plan, policy)


def igpc_lqr_update(record, system, cost, alpha: float = 1.0):
    """LQR step around a finished GPC rollout: returns (k, K, AffineGainPolicy)
    perturbing the base actions."""
    return lqr_update(system, record.states, record.actions, cost, alpha, nominal_u=record.actions - record.offsets)


def replay_loss(episode: EpisodeResult, system, cost, x0=None) -> float:
    """J(u^i + o^i | w^i) recomputed from an episode's record."""
    rec = episode.record
    return open_loop_loss(system, episode.plan + rec.offsets, rec.disturbances, cost, x0)
