"""Two-level online convex optimization.

An outer decision x_i is held for an episode of T inner decisions y_t^i.
Both levels learn from linearized losses: the inner learner sees
h_t(y) = grad_y f_t^i(x_i, y_t^i) . y, the outer learner sees
g_i(x) = sum_t grad_x f_t^i(x_i, y_t^i) . x once the episode ends.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import ConfigError
from .policies import Ball, Box, make_action_set, project_plan


def support_min(K, g) -> float:
    """min over x in K of g . x, for a centered ball or a box."""
    g = np.asarray(g, dtype=float)
    if isinstance(K, Ball):
        return -K.radius * float(np.linalg.norm(g))
    lo = np.broadcast_to(np.asarray(K.low, float), g.shape)
    hi = np.broadcast_to(np.asarray(K.high, float), g.shape)
    return float(np.sum(np.minimum(g * lo, g * hi)))


def _support_min_rows(K, G) -> np.ndarray:
    """support_min applied to each row of G."""
    if isinstance(K, Ball):
        return -K.radius * np.linalg.norm(G, axis=1)
    lo = np.broadcast_to(np.asarray(K.low, float), G.shape)
    hi = np.broadcast_to(np.asarray(K.high, float), G.shape)
    return np.sum(np.minimum(G * lo, G * hi), axis=1)


def set_diameter(K, dim: int) -> float:
    return K.diameter if isinstance(K, Ball) else K.diameter_for(dim)


class OGD:
    """Projected online gradient descent for linear losses, rate D/(G sqrt(t)).

    When ``G`` is not given it is the running maximum of observed gradient
    norms, so the analytic bound only applies once G is known in advance.
    """

    def __init__(self, K, dim: int, D: float | None = None, G: float | None = None, x0=None):
        self.K = make_action_set(K)
        self.dim = dim
        self.D = set_diameter(self.K, dim) if D is None else float(D)
        self.G = G
        x = np.zeros(dim) if x0 is None else np.asarray(x0, dtype=float)
        self.x = self.K.project(x)
        self._g_max = 0.0
        self.decisions: list = []
        self.grads: list = []

    def decide(self) -> np.ndarray:
        return self.x.copy()

    def update(self, g) -> np.ndarray:
        g = np.asarray(g, dtype=float)
        gg = float(g @ g)
        if not math.isfinite(gg):
            raise FloatingPointError("non-finite or overflowing gradient fed to OGD")
        self.decisions.append(self.x)
        self.grads.append(g.copy())
        self._g_max = max(self._g_max, math.sqrt(gg))
        G = self.G if self.G is not None else self._g_max
        if G > 0:
            eta = self.D / (G * math.sqrt(len(self.grads)))
            self.x = self.K.project(self.x - eta * g)
        return self.decide()

    @property
    def rounds(self) -> int:
        return len(self.grads)

    def regret(self) -> float:
        """sum_t g_t . x_t - min over x in K of (sum_t g_t) . x."""
        if not self.grads:
            return 0.0
        g = np.array(self.grads)
        played = float(np.sum(g * np.array(self.decisions)))
        return played - support_min(self.K, g.sum(axis=0))

    def analytic_bound(self, G: float | None = None) -> float:
        G = self.G if G is None else G
        if G is None:
            raise ConfigError("the analytic bound needs a known gradient bound G")
        return 1.5 * self.D * G * np.sqrt(self.rounds)


class NestedGame:
    """Loss oracle f_t^i(x, y) on K1 x K2; subclasses give value and gradient."""

    convex = False

    def __init__(self, K1, K2, d1: int, d2: int, N: int, T: int):
        self.K1, self.K2 = make_action_set(K1), make_action_set(K2)
        self.d1, self.d2, self.N, self.T = d1, d2, N, T

    def value(self, i, t, x, y) -> float:
        raise NotImplementedError

    def grad(self, i, t, x, y):
        """(grad_x, grad_y) of f_t^i at (x, y)."""
        raise NotImplementedError

    def value_grad(self, i, t, x, y):
        return self.value(i, t, x, y), *self.grad(i, t, x, y)

    def episode_value_grad(self, i, x, y):
        """(1/T) sum_t f_t^i(x, y) and its gradients, for the comparator."""
        v, gx, gy = 0.0, np.zeros(self.d1), np.zeros(self.d2)
        for t in range(self.T):
            v += self.value(i, t, x, y)
            a, b = self.grad(i, t, x, y)
            gx += a
            gy += b
        return v / self.T, gx / self.T, gy / self.T

    def comparator_value_grad(self, x, Y):
        """sum_i of the episode averages at (x, Y[i]) with gradients in x and Y."""
        v, gx, gY = 0.0, np.zeros(self.d1), np.zeros_like(Y)
        for i in range(self.N):
            vi, a, b = self.episode_value_grad(i, x, Y[i])
            v += vi
            gx += a
            gY[i] = b
        return v, gx, gY


class QuadraticGame(NestedGame):
    """f_t^i(z) = 0.5 z'P z + q.z + c with z = (x, y) and P positive semidefinite."""

    convex = True

    def __init__(self, K1, K2, d1, d2, P, q, c=None):
        P = np.asarray(P, dtype=float)
        N, T = P.shape[:2]
        super().__init__(K1, K2, d1, d2, N, T)
        self.P, self.q = P, np.asarray(q, dtype=float)
        self.c = np.zeros((N, T)) if c is None else np.asarray(c, dtype=float)
        self._Pbar = self.P.mean(axis=1)
        self._qbar = self.q.mean(axis=1)
        self._cbar = self.c.mean(axis=1)

    def _z(self, x, y):
        return np.concatenate([np.atleast_1d(x), np.atleast_1d(y)])

    def value(self, i, t, x, y):
        z = self._z(x, y)
        return float(0.5 * z @ self.P[i, t] @ z + self.q[i, t] @ z + self.c[i, t])

    def grad(self, i, t, x, y):
        g = self.P[i, t] @ self._z(x, y) + self.q[i, t]
        return g[: self.d1], g[self.d1 :]

    def value_grad(self, i, t, x, y):
        z = self._z(x, y)
        Pz = self.P[i, t] @ z
        g = Pz + self.q[i, t]
        return float(0.5 * z @ Pz + self.q[i, t] @ z + self.c[i, t]), g[: self.d1], g[self.d1 :]

    def episode_value_grad(self, i, x, y):
        z = self._z(x, y)
        g = self._Pbar[i] @ z + self._qbar[i]
        return float(0.5 * z @ self._Pbar[i] @ z + self._qbar[i] @ z + self._cbar[i]), g[: self.d1], g[self.d1 :]

    def comparator_value_grad(self, x, Y):
        Z = np.concatenate([np.broadcast_to(np.atleast_1d(x), (self.N, self.d1)), Y], axis=1)
        PZ = np.einsum("nij,nj->ni", self._Pbar, Z)
        v = float(np.sum(0.5 * np.einsum("ni,ni->n", Z, PZ) + np.einsum("ni,ni->n", self._qbar, Z) + self._cbar))
        g = PZ + self._qbar
        return v, g[:, : self.d1].sum(axis=0), g[:, self.d1 :]


def random_quadratic_game(rng, N: int, T: int, d1: int = 2, d2: int = 2, radius: float = 1.0) -> QuadraticGame:
    d = d1 + d2
    A = rng.normal(size=(N, T, d, d)) / np.sqrt(d)
    P = A @ np.swapaxes(A, -1, -2)
    q = rng.normal(size=(N, T, d))
    return QuadraticGame({"ball": radius}, {"ball": radius}, d1, d2, P, q)


def offset_game(c, T: int, bound: float = 1.0) -> QuadraticGame:
    """Scalar f_t^i(x, y) = (x + y - c_i)^2 on [-bound, bound]^2."""
    c = np.asarray(c, dtype=float)
    N = c.size
    P = np.broadcast_to(2 * np.ones((2, 2)), (N, T, 2, 2)).copy()
    q = np.broadcast_to((-2 * c)[:, None, None], (N, T, 2)).copy()
    const = np.broadcast_to((c**2)[:, None], (N, T)).copy()
    box = {"box": [-bound, bound]}
    return QuadraticGame(box, box, 1, 1, P, q, const)


@dataclass(eq=False)
class NestedRunResult:
    xs: np.ndarray  # (N, d1)
    ys: np.ndarray  # (N, T, d2)
    losses: np.ndarray  # (N, T)
    outer: OGD
    inner_regrets: np.ndarray  # measured linear regret of each episode's inner learner
    inner_learners: list = field(default_factory=list)

    @property
    def outer_regret(self) -> float:
        return self.outer.regret()


def nested_run(game: NestedGame, A1: OGD, A2_factory) -> NestedRunResult:
    """Play the nested game; ``A2_factory(i)`` returns a fresh inner learner.

    The zero loss h_0 leaves each inner learner at its initialization, so
    y_1 is the initial point.
    """
    N, T = game.N, game.T
    xs = np.zeros((N, game.d1))
    ys = np.zeros((N, T, game.d2))
    losses = np.zeros((N, T))
    inner_regrets = np.zeros(N)
    learners = []
    for i in range(N):
        x = A1.decide()
        xs[i] = x
        A2 = A2_factory(i)
        gx_sum = np.zeros(game.d1)
        for t in range(T):
            y = A2.decide()
            ys[i, t] = y
            val, gx, gy = game.value_grad(i, t, x, y)
            if not (math.isfinite(val) and np.isfinite(gx).all() and np.isfinite(gy).all()):
                raise FloatingPointError(f"loss oracle returned non-finite values at ({i}, {t})")
            losses[i, t] = val
            gx_sum += gx
            A2.update(gy)
        inner_regrets[i] = A2.regret()
        learners.append(A2)
        A1.update(gx_sum)
    return NestedRunResult(xs, ys, losses, A1, inner_regrets, learners)


# --- comparator and regret -------------------------------------------------


@dataclass
class NestedComparator:
    x: np.ndarray
    ys: np.ndarray
    value: float  # sum_i min_y (1/T) sum_t f_t^i
    gap: float  # Frank-Wolfe duality gap, an upper bound on suboptimality
    method: str
    converged: bool


def _fw_gap(game, x, Y, gx, gY) -> float:
    gap = gx @ x - support_min(game.K1, gx)
    gap += float(np.sum(gY * Y) - np.sum(_support_min_rows(game.K2, gY)))
    return float(gap)


def _comparator_pgd(game, x0, Y0, tol, max_iter):
    """Accelerated projected gradient with backtracking and adaptive restart;
    stops once the Frank-Wolfe gap certifies ``tol``."""
    proj = lambda x, Y: (game.K1.project(x), project_plan(Y, game.K2))  # noqa: E731
    x, Y = proj(x0, Y0)
    v, gx, gY = game.comparator_value_grad(x, Y)
    best = (x, Y, v, _fw_gap(game, x, Y, gx, gY))
    xe, Ye, theta, step = x, Y, 1.0, 1.0
    for _ in range(max_iter):
        ve, gxe, gYe = game.comparator_value_grad(xe, Ye)
        while True:
            xn, Yn = proj(xe - step * gxe, Ye - step * gYe)
            vn, gxn, gYn = game.comparator_value_grad(xn, Yn)
            dx, dY = xn - xe, Yn - Ye
            if vn <= ve + gxe @ dx + np.sum(gYe * dY) + (dx @ dx + np.sum(dY * dY)) / (2 * step) + 1e-15:
                break
            step *= 0.5
        gap = _fw_gap(game, xn, Yn, gxn, gYn)
        if gap < best[3] or (gap == best[3] and vn < best[2]):
            best = (xn, Yn, vn, gap)
        if gap <= tol:
            break
        if vn > v:  # adaptive restart
            theta = 1.0
            xe, Ye = x, Y
            continue
        theta_n = 0.5 * (1 + np.sqrt(1 + 4 * theta**2))
        mom = (theta - 1) / theta_n
        xe, Ye = xn + mom * (xn - x), Yn + mom * (Yn - Y)
        x, Y, v, theta = xn, Yn, vn, theta_n
    return best


def _comparator_grid(game, points: int):
    """Exhaustive search for scalar x and y on box sets."""
    if game.d1 != 1 or game.d2 != 1 or not (isinstance(game.K1, Box) and isinstance(game.K2, Box)):
        raise ConfigError("grid comparator needs scalar box sets")
    gx = np.linspace(float(np.ravel(game.K1.low)[0]), float(np.ravel(game.K1.high)[0]), points)
    gy = np.linspace(float(np.ravel(game.K2.low)[0]), float(np.ravel(game.K2.high)[0]), points)
    total = np.zeros(points)
    best_y = np.zeros((points, game.N))
    for i in range(game.N):
        table = np.array([[game.episode_value_grad(i, np.array([a]), np.array([b]))[0] for b in gy] for a in gx])
        total += table.min(axis=1)
        best_y[:, i] = gy[table.argmin(axis=1)]
    k = int(np.argmin(total))
    return np.array([gx[k]]), best_y[k][:, None], float(total[k])


def nested_comparator(game: NestedGame, method: str = "auto", restarts: int | None = None, tol: float = 1e-7,
                      max_iter: int = 5000, grid_points: int = 401, seed: int = 0) -> NestedComparator:
    """min over x in K1 of sum_i min over y in K2 of (1/T) sum_t f_t^i(x, y)."""
    if method == "auto":
        method = "grid" if (game.d1 == 1 and game.d2 == 1 and isinstance(game.K1, Box)
                            and isinstance(game.K2, Box)) else "pgd"
    if method == "grid":
        x, Y, v = _comparator_grid(game, grid_points)
        return NestedComparator(x, Y, v, np.nan, "grid", True)
    if restarts is None:
        restarts = 0 if game.convex else 4
    rng = np.random.default_rng(seed)
    best = None
    for k in range(restarts + 1):
        scale = 0.0 if k == 0 else 1.0
        x0 = scale * rng.normal(size=game.d1)
        Y0 = scale * rng.normal(size=(game.N, game.d2))
        x, Y, v, gap = _comparator_pgd(game, x0, Y0, tol, max_iter)
        if best is None or v - gap < best[2] - best[3]:
            best = (x, Y, v, gap)
    x, Y, v, gap = best
    return NestedComparator(x, Y, v, gap, "pgd", gap <= max(tol, 1e-6))


@dataclass
class NestedRegret:
    total: float
    average: float
    comparator: NestedComparator

    @property
    def gap(self) -> float:
        return self.comparator.gap


def planning_regret_nested(result: NestedRunResult, game: NestedGame, comparator: NestedComparator | None = None,
                           **kw) -> NestedRegret:
    """sum_i (1/T) sum_t f_t^i(x_i, y_t^i) minus the hindsight comparator."""
    comp = nested_comparator(game, **kw) if comparator is None else comparator
    algo = float(np.sum(result.losses) / game.T)
    total = algo - comp.value
    return NestedRegret(total, total / game.N, comp)


def regret_bound_audit(result: NestedRunResult, game: NestedGame, regret: NestedRegret) -> dict:
    """Check average planning regret <= R_N(A1)/N + R_T(A2)/T on one run.

    The outer learner's losses are sums over T steps, so its regret is
    divided by T to put it on the per-step scale; R_T(A2) is the mean of
    the per-episode inner regrets.
    """
    N, T = game.N, game.T
    r_outer = result.outer_regret / T
    r_inner = float(np.mean(result.inner_regrets))
    rhs = r_outer / N + r_inner / T
    # the comparator value is only an upper bound on the optimum; subtracting
    # its duality gap gives a lower bound, so lhs never understates regret
    gap = 0.0 if not np.isfinite(regret.gap) else regret.gap
    lhs = regret.average + gap / N
    return {"lhs": lhs, "rhs": rhs, "measured": regret.average, "gap": gap, "outer_regret": r_outer,
            "inner_regret": r_inner, "holds": bool(lhs <= rhs + 1e-12)}
