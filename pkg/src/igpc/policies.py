"""Policy classes: open-loop plans, linear feedback, disturbance-action
controllers, the affine-gain rollout policy, and superposition.

A policy is used by a rollout through three hooks: ``reset(system)`` at the
start, ``act(t, x)`` for the action at step ``t`` given the current state,
and ``observe(t, x, u, x_next)`` after the transition.  Policies that need
the disturbance reconstruct it from the known model as
``x_next - f_t(x, u)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .dynamics import ConfigError, DimensionError


class Policy:
    def reset(self, system) -> None:
        pass

    def act(self, t: int, x) -> np.ndarray:
        raise NotImplementedError

    def observe(self, t: int, x, u, x_next) -> None:
        pass

    def __add__(self, other: "Policy") -> "Policy":
        return superpose(self, other)


# --- action sets -----------------------------------------------------------


@dataclass(frozen=True)
class Ball:
    """Euclidean ball of the given radius centered at the origin."""

    radius: float

    def __post_init__(self):
        if not np.isfinite(self.radius) or self.radius < 0:
            raise ConfigError(f"ball radius must be finite and nonnegative, got {self.radius}")

    @property
    def diameter(self) -> float:
        return 2 * self.radius

    def project(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        n = float(np.sqrt(np.sum(u * u)))
        return u if n <= self.radius else u * (self.radius / n)


@dataclass(frozen=True)
class Box:
    low: float | tuple
    high: float | tuple

    def __post_init__(self):
        lo, hi = np.asarray(self.low, dtype=float), np.asarray(self.high, dtype=float)
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ConfigError("box bounds must be finite")
        if np.any(lo > hi):
            raise ConfigError("box lower bound exceeds upper bound")

    def diameter_for(self, dim: int) -> float:
        span = np.broadcast_to(np.asarray(self.high, float) - np.asarray(self.low, float), (dim,))
        return float(np.linalg.norm(span))

    @property
    def diameter(self) -> float:
        return self.diameter_for(np.size(self.low))

    def project(self, u) -> np.ndarray:
        return np.clip(np.asarray(u, dtype=float), self.low, self.high)


def make_action_set(spec) -> Ball | Box:
    """Build an action set from ``{"ball": r}`` or ``{"box": [lo, hi]}``."""
    if isinstance(spec, (Ball, Box)):
        return spec
    if not isinstance(spec, dict) or len(spec) != 1:
        raise ConfigError(f"action set must be {{'ball': r}} or {{'box': [lo, hi]}}, got {spec!r}")
    (kind, val), = spec.items()
    if kind == "ball":
        return Ball(float(val))
    if kind == "box":
        return Box(*val)
    raise ConfigError(f"unbounded or unknown action set {kind!r}")


def project_plan(u_seq, action_set) -> np.ndarray:
    action_set = make_action_set(action_set)
    u_seq = np.asarray(u_seq, dtype=float)
    if isinstance(action_set, Box):
        return np.clip(u_seq, action_set.low, action_set.high)
    u2 = u_seq.reshape(u_seq.shape[0], -1)
    norms = np.linalg.norm(u2, axis=1, keepdims=True)
    scale = np.where(norms > action_set.radius, action_set.radius / np.maximum(norms, 1e-300), 1.0)
    return (u2 * scale).reshape(u_seq.shape)


def project_spectral(M_seq, gamma: float) -> np.ndarray:
    """Clip the singular values of each matrix at ``gamma``.

    This is the Frobenius-nearest point in the spectral-norm ball, applied
    independently to every matrix in the sequence.
    """
    if gamma < 0:
        raise ConfigError("gamma must be nonnegative")
    M_seq = np.asarray(M_seq, dtype=float)
    if gamma == 0:
        return np.zeros_like(M_seq)
    if M_seq.shape[-1] == 1 or M_seq.shape[-2] == 1:
        # rank one: the spectral norm is the Euclidean norm
        norms = np.sqrt(np.sum(M_seq**2, axis=(-2, -1), keepdims=True))
        return M_seq * np.minimum(1.0, gamma / np.maximum(norms, 1e-300))
    U, s, Vt = np.linalg.svd(M_seq, full_matrices=False)
    clipped = (U * np.minimum(s, gamma)[..., None, :]) @ Vt
    inside = (s[..., 0] <= gamma)[..., None, None]
    return np.where(inside, M_seq, clipped)


# --- policies --------------------------------------------------------------


class ZeroPolicy(Policy):
    def __init__(self, action_dim: int):
        self.action_dim = action_dim

    def act(self, t, x):
        return np.zeros(self.action_dim)


class OpenLoopPlan(Policy):
    """Plays u_t at step t regardless of the state."""

    def __init__(self, u_seq, action_set=None):
        u = np.asarray(u_seq, dtype=float)
        if u.ndim == 1:
            u = u[:, None]
        self.action_set = None if action_set is None else make_action_set(action_set)
        self.u = u if self.action_set is None else project_plan(u, self.action_set)

    @property
    def action_dim(self) -> int:
        return self.u.shape[1]

    def act(self, t, x):
        return self.u[t]


class LinearPolicy(Policy):
    """u_t = K_t x_t; ``K`` is one (du, dx) matrix or a (T, du, dx) sequence."""

    def __init__(self, K):
        self.K = np.asarray(K, dtype=float)

    def act(self, t, x):
        K = self.K if self.K.ndim == 2 else self.K[t]
        return K @ x


@dataclass(eq=False)
class DACPolicy:
    """Disturbance-action controller with memory L.

    ``M`` has shape (L, du, dx); ``M[r - 1]`` multiplies w_{t-r}.
    """

    M: np.ndarray
    gamma: float = np.inf

    def __post_init__(self):
        M = np.asarray(self.M, dtype=float)
        if M.ndim != 3:
            raise DimensionError("M", "(L, du, dx)", M.shape)
        self.M = M

    @property
    def L(self) -> int:
        return self.M.shape[0]

    @classmethod
    def zeros(cls, L: int, du: int, dx: int, gamma: float = np.inf) -> "DACPolicy":
        return cls(np.zeros((L, du, dx)), gamma)

    def within_bound(self, tol: float = 1e-10) -> bool:
        return all(np.linalg.norm(m, 2) <= self.gamma + tol for m in self.M)

    def offset(self, w_history) -> np.ndarray:
        """sum_r M_r w_{t-r}; ``w_history[r - 1]`` is w_{t-r}."""
        w_history = np.asarray(w_history, dtype=float)
        if w_history.shape != (self.L, self.M.shape[2]):
            raise DimensionError("w_history", (self.L, self.M.shape[2]), w_history.shape)
        return np.einsum("rij,rj->i", self.M, w_history)


def dac_action(policy: DACPolicy, w_history, base_u) -> np.ndarray:
    return np.asarray(base_u, dtype=float) + policy.offset(w_history)


class DACRolloutPolicy(Policy):
    """A fixed DAC on top of a base policy, fed reconstructed disturbances."""

    def __init__(self, dac: DACPolicy, base: Policy | None = None):
        self.dac = dac
        self.base = base

    def reset(self, system):
        self.system = system
        self.w_hist = np.zeros((self.dac.L, self.dac.M.shape[2]))
        if self.base is not None:
            self.base.reset(system)

    def act(self, t, x):
        base = self.base.act(t, x) if self.base is not None else np.zeros(self.dac.M.shape[1])
        return dac_action(self.dac, self.w_hist, base)

    def observe(self, t, x, u, x_next):
        w = x_next - self.system.transition(t, x, u)
        self.w_hist = np.roll(self.w_hist, 1, axis=0)
        self.w_hist[0] = w
        if self.base is not None:
            self.base.observe(t, x, u, x_next)


class AffineGainPolicy(Policy):
    """a_t = nominal_u_t + alpha k_t + K_t (x_t - nominal_x_t)."""

    def __init__(self, alpha, nominal_x, nominal_u, k, K):
        self.alpha = float(alpha)
        self.nominal_x = np.asarray(nominal_x, dtype=float)
        self.nominal_u = np.asarray(nominal_u, dtype=float)
        self.k = np.asarray(k, dtype=float)
        self.K = np.asarray(K, dtype=float)
        T, du = self.nominal_u.shape
        dx = self.nominal_x.shape[1]
        if self.nominal_x.shape[0] < T:
            raise DimensionError("nominal_x", (T, dx), self.nominal_x.shape)
        if self.k.shape != (T, du):
            raise DimensionError("k", (T, du), self.k.shape)
        if self.K.shape != (T, du, dx):
            raise DimensionError("K", (T, du, dx), self.K.shape)

    @classmethod
    def open_loop(cls, u_seq, state_dim: int) -> "AffineGainPolicy":
        u = np.asarray(u_seq, dtype=float)
        T, du = u.shape
        return cls(0.0, np.zeros((T + 1, state_dim)), u, np.zeros((T, du)), np.zeros((T, du, state_dim)))

    def with_alpha(self, alpha: float) -> "AffineGainPolicy":
        return AffineGainPolicy(alpha, self.nominal_x, self.nominal_u, self.k, self.K)

    def act(self, t, x):
        return self.nominal_u[t] + self.alpha * self.k[t] + self.K[t] @ (x - self.nominal_x[t])


class Superposition(Policy):
    """Sum of two policies' actions given the same observed history."""

    def __init__(self, first: Policy, second: Policy):
        self.first = first
        self.second = second

    def reset(self, system):
        self.first.reset(system)
        self.second.reset(system)

    def act(self, t, x):
        a, b = self.first.act(t, x), self.second.act(t, x)
        if np.shape(a) != np.shape(b):
            raise DimensionError("action", np.shape(a), np.shape(b))
        return a + b

    def observe(self, t, x, u, x_next):
        self.first.observe(t, x, u, x_next)
        self.second.observe(t, x, u, x_next)


def superpose(p1: Policy, p2: Policy) -> Policy:
    return Superposition(p1, p2)


# --- CSV checkpoints -------------------------------------------------------


def save_plan_csv(path, u_seq) -> None:
    """Header ``t,u0,u1,...``; one row per step."""
    u = np.atleast_2d(np.asarray(u_seq, dtype=float))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"u{j}" for j in range(u.shape[1])])
        for t, row in enumerate(u):
            w.writerow([t] + [repr(float(v)) for v in row])


def load_plan_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in r[1:]] for r in reader if r]
    return np.array(rows).reshape(len(rows), len(header) - 1)


def save_dac_csv(path, M, gamma: float | None = None) -> None:
    """Header ``r,du,dx,gamma,m_0_0,m_0_1,...``; one row per memory index
    r = 1..L, matrix entries in row-major order."""
    M = np.asarray(M, dtype=float)
    L, du, dx = M.shape
    g = "" if gamma is None or not np.isfinite(gamma) else repr(float(gamma))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["r", "du", "dx", "gamma"] + [f"m_{i}_{j}" for i in range(du) for j in range(dx)])
        for r in range(L):
            w.writerow([r + 1, du, dx, g] + [repr(float(v)) for v in M[r].ravel()])


def load_dac_csv(path) -> DACPolicy:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        rows = [r for r in reader if r]
    du, dx = int(rows[0][1]), int(rows[0][2])
    gamma = float(rows[0][3]) if rows[0][3] else np.inf
    M = np.array([[float(v) for v in r[4:]] for r in rows]).reshape(len(rows), du, dx)
    return DACPolicy(M, gamma)
