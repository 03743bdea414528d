"""Planning-regret comparator: the best fixed open-loop plan paired with a
per-rollout best disturbance-action controller, and the regret ledger.

For linear systems with quadratic costs the comparator objective is a convex
quadratic in (u, M_1, ..., M_N); it is assembled densely and minimized
exactly when the unconstrained minimizer is feasible, otherwise by ADMM.
Anything else falls back to projected gradient with backtracking and random
restarts, and the result is only a best-found estimate.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .dynamics import LinearSystem
from .policies import DACPolicy, DACRolloutPolicy, OpenLoopPlan, make_action_set, project_plan, project_spectral

log = logging.getLogger(__name__)


# --- transfer matrices -----------------------------------------------------


def transfer_matrix(system: LinearSystem, j: int, k: int) -> np.ndarray:
    """Map from the input entering at step j to the state x_k (k > j):
    A_{k-1} ... A_{j+1}, the identity when k = j + 1."""
    if k <= j:
        raise ValueError("transfer matrix needs k > j")
    out = np.eye(system.state_dim)
    for s in range(j + 1, k):
        out = system.A[s] @ out
    return out


def dac_offsets(M_seq, w) -> np.ndarray:
    """a_t - u_t = sum_r M_{t,r} w_{t-r} for a (T, L, du, dx) sequence."""
    M_seq = np.asarray(M_seq, dtype=float)
    T, L = M_seq.shape[:2]
    out = np.zeros((T, M_seq.shape[2]))
    for t in range(T):
        for r in range(1, L + 1):
            if t - r >= 0:
                out[t] += M_seq[t, r - 1] @ w[t - r]
    return out


def psi(system: LinearSystem, M_seq, w, j: int, k: int) -> np.ndarray:
    """State contribution at x_k of the DAC offsets played at steps j..k-1."""
    off = dac_offsets(M_seq, w)
    out = np.zeros(system.state_dim)
    for s in range(max(j, 0), k):
        out += transfer_matrix(system, s, k) @ system.B[s] @ off[s]
    return out


def state_expansion(system: LinearSystem, u, M_seq, w, t: int) -> np.ndarray:
    """Closed form of x_t for x_0 = 0 under plan u and DAC sequence M_seq."""
    x = np.zeros(system.state_dim)
    for j in range(t):
        x += transfer_matrix(system, j, t) @ (system.B[j] @ u[j] + w[j])
    return x + psi(system, M_seq, w, 0, t)


# --- comparator ------------------------------------------------------------


@dataclass(eq=False)
class ComparatorSolution:
    u_star: np.ndarray
    M_star: list  # one DACPolicy per rollout
    per_rollout: np.ndarray  # J_i(u*, M*_i)
    diagnostics: dict = field(default_factory=dict)

    @property
    def total(self) -> float:
        return float(np.sum(self.per_rollout))


def _rollout_cost_grad(system, w, cost, u, M, x0, need_grad=True):
    """J(u, M | w) and its gradients for one rollout (adjoint pass)."""
    T, dx, du = system.T, system.state_dim, system.action_dim
    L = M.shape[0]
    hist = np.zeros((T, L, dx))
    for r in range(1, L + 1):
        hist[r:, r - 1] = w[: T - r]
    a = u + np.einsum("rij,trj->ti", M, hist)
    xs = np.zeros((T + 1, dx))
    if x0 is not None:
        xs[0] = x0
    total = 0.0
    for t in range(T):
        total += cost.value(t, xs[t], a[t])
        xs[t + 1] = system.transition(t, xs[t], a[t]) + w[t]
    if not need_grad:
        return total / T, None, None
    gu = np.zeros((T, du))
    lam = np.zeros(dx)
    for t in range(T - 1, -1, -1):
        cx, cu = cost.grad(t, xs[t], a[t])
        fx, fu = system.jacobians(t, xs[t], a[t])
        gu[t] = cu + fu.T @ lam
        lam = cx + fx.T @ lam
    gM = np.einsum("ti,trj->rij", gu, hist)
    return total / T, gu / T, gM / T


class _Problem:
    """Flattened comparator objective over z = (u, M_1, ..., M_N)."""

    def __init__(self, specs, action_set, gamma, L, x0):
        self.specs = specs
        self.action_set = action_set
        self.gamma = gamma
        self.L = L
        self.x0 = x0
        system = specs[0][0]
        self.T, self.dx, self.du = system.T, system.state_dim, system.action_dim
        self.nu = self.T * self.du
        self.nm = L * self.du * self.dx
        self.n = self.nu + len(specs) * self.nm

    def split(self, z):
        u = z[: self.nu].reshape(self.T, self.du)
        Ms = z[self.nu :].reshape(len(self.specs), self.L, self.du, self.dx)
        return u, Ms

    def join(self, u, Ms):
        return np.concatenate([np.ravel(u), np.ravel(Ms)])

    def project(self, z):
        u, Ms = self.split(z)
        return self.join(project_plan(u, self.action_set), project_spectral(Ms, self.gamma))

    def value_grad(self, z, need_grad=True):
        u, Ms = self.split(z)
        total, gu_all, gMs = 0.0, np.zeros_like(u), []
        per = []
        for (system, w, cost), M in zip(self.specs, Ms):
            J, gu, gM = _rollout_cost_grad(system, w, cost, u, M, self.x0, need_grad)
            per.append(J)
            total += J
            if need_grad:
                gu_all += gu
                gMs.append(gM)
        grad = self.join(gu_all, gMs) if need_grad else None
        return total, grad, np.array(per)

    def residual(self, z, g, step):
        return float(np.linalg.norm(z - self.project(z - step * g)) / step)


def _is_linear_quadratic(specs):
    return all(isinstance(s, LinearSystem) and getattr(c, "is_quadratic", False) for s, _, c in specs)


def _linear_maps(system: LinearSystem, x0):
    """Stacked x_{0..T-1} = Phi a + Psi w + gamma0 for a linear system."""
    T, dx, du = system.T, system.state_dim, system.action_dim
    Phi = np.zeros((T * dx, T * du))
    Psi = np.zeros((T * dx, T * dx))
    base = np.zeros(T * dx)
    x = np.zeros(dx) if x0 is None else np.asarray(x0, dtype=float)
    base[:dx] = x
    for t in range(1, T):
        A = system.A[t - 1]
        rows, prev = slice(t * dx, (t + 1) * dx), slice((t - 1) * dx, t * dx)
        Phi[rows] = A @ Phi[prev]
        Psi[rows] = A @ Psi[prev]
        Phi[rows, (t - 1) * du : t * du] = system.B[t - 1]
        Psi[rows, (t - 1) * dx : t * dx] = np.eye(dx)
        x = A @ x
        base[rows] = x
    return Phi, Psi, base


def _history_map(w, L: int, du: int) -> np.ndarray:
    """Matrix H with (a - u) stacked = H m, m = M.ravel() for M of shape (L, du, dx)."""
    T, dx = w.shape
    H = np.zeros((T * du, L * du * dx))
    for t in range(T):
        for r in range(1, min(L, t) + 1):
            for p in range(du):
                col = (r - 1) * du * dx + p * dx
                H[t * du + p, col : col + dx] = w[t - r]
    return H


def _assemble_quadratic(prob: _Problem):
    """H, b, c0 with F(z) = 0.5 z'Hz + b'z + c0, built from the affine maps
    (u, M_i) -> (x, a) of each rollout.  Exact for LQ instances."""
    T, dx, du, nu, nm = prob.T, prob.dx, prob.du, prob.nu, prob.nm
    H = np.zeros((prob.n, prob.n))
    b = np.zeros(prob.n)
    c0 = 0.0
    maps = {}
    zx, zu = np.zeros(dx), np.zeros(du)
    for i, (system, w, cost) in enumerate(prob.specs):
        if id(system) not in maps:
            maps[id(system)] = _linear_maps(system, prob.x0)
        Phi, Psi, base = maps[id(system)]
        w = np.asarray(w, dtype=float)
        xi = Psi @ w.ravel() + base
        D = np.hstack([np.eye(nu), _history_map(w, prob.L, du)])
        PD = Phi @ D
        Qb = np.zeros((T * dx, T * dx))
        Rb = np.zeros((T * du, T * du))
        Pb = np.zeros((T * du, T * dx))
        gx = np.zeros(T * dx)
        gu = np.zeros(T * du)
        for t in range(T):
            Q, R, P = cost.hess(t, zx, zu)
            sx, su = slice(t * dx, (t + 1) * dx), slice(t * du, (t + 1) * du)
            Qb[sx, sx], Rb[su, su], Pb[su, sx] = Q, R, P
            gx[sx], gu[su] = cost.grad(t, zx, zu)
            c0 += cost.value(t, zx, zu) / T
        cross = D.T @ Pb @ PD
        Hi = (PD.T @ Qb @ PD + D.T @ Rb @ D + cross + cross.T) / T
        bi = (PD.T @ (Qb @ xi + gx) + D.T @ (Pb @ xi + gu)) / T
        c0 += (0.5 * xi @ Qb @ xi + gx @ xi) / T
        idx = np.r_[0:nu, nu + i * nm : nu + (i + 1) * nm]
        H[np.ix_(idx, idx)] += Hi
        b[idx] += bi
    return 0.5 * (H + H.T), b, c0


def _admm(prob, H, b, z0, step, tol, max_iter, eig=None):
    """ADMM on min 0.5 z'Hz + b'z over the constraint set.

    The z-update solves (H + rho I) z = rho (v - y) - b through one
    eigendecomposition of H, so the penalty rho can adapt for free.
    """
    lam, V = np.linalg.eigh(H) if eig is None else eig
    lam = np.maximum(lam, 0.0)
    Vb = V.T @ b
    scale = max(1.0, np.linalg.norm(b))
    pos = lam[lam > lam[-1] * 1e-12]
    rho = float(np.sqrt(pos[0] * pos[-1])) if pos.size else 1.0
    v = prob.project(z0)
    y = np.zeros_like(v)
    relax = 1.6
    res = np.inf
    for it in range(1, max_iter + 1):
        z = V @ ((rho * (V.T @ (v - y)) - Vb) / (lam + rho))
        zr = relax * z + (1 - relax) * v
        v_old = v
        v = prob.project(zr + y)
        y = y + zr - v
        if it % 25 == 0:
            res = prob.residual(v, H @ v + b, step) / scale
            if res <= tol:
                break
            primal = np.linalg.norm(z - v)
            dual = rho * np.linalg.norm(v - v_old)
            if primal > 10 * dual:
                rho *= 2.0
                y /= 2.0
            elif dual > 10 * primal:
                rho /= 2.0
                y *= 2.0
    res = prob.residual(v, H @ v + b, step) / scale
    return v, res, it


def _projected_gradient(prob, z0, tol, max_iter):
    z = prob.project(z0)
    F, g, _ = prob.value_grad(z)
    step = 1.0
    scale = max(1.0, np.linalg.norm(g))
    res = prob.residual(z, g, step) / scale
    for it in range(max_iter):
        while True:
            z_new = prob.project(z - step * g)
            F_new = prob.value_grad(z_new, need_grad=False)[0]
            if F_new <= F + g @ (z_new - z) + (0.5 / step) * np.sum((z_new - z) ** 2):
                break
            step *= 0.5
            if step < 1e-16:
                return z, res, it
        z = z_new
        F, g, _ = prob.value_grad(z)
        res = prob.residual(z, g, step) / scale
        if res <= tol:
            return z, res, it + 1
        step *= 1.5
    return z, res, max_iter


def comparator_solve(specs, action_set, gamma: float, L: int, x0=None, restarts: int = 4,
                     tol: float = 1e-8, max_iter: int = 20000, seed: int = 0) -> ComparatorSolution:
    """Best fixed plan u* and per-rollout DACs M*_i in hindsight.

    ``specs`` lists (system, w (T, dx), cost) per rollout.  ``tol`` bounds
    the projected-gradient residual relative to max(1, |grad F(0)|).
    """
    action_set = make_action_set(action_set)
    prob = _Problem(list(specs), action_set, gamma, L, x0)
    rng = np.random.default_rng(seed)
    diag = {"restarts": 0, "exact": False}
    starts = []
    objective = None
    if _is_linear_quadratic(prob.specs):
        H, b, c0 = _assemble_quadratic(prob)
        objective = lambda z: 0.5 * z @ H @ z + b @ z + c0  # noqa: E731
        z_unc = np.linalg.lstsq(H, -b, rcond=None)[0]
        z_unc = z_unc + np.linalg.lstsq(H, -(H @ z_unc + b), rcond=None)[0]
        lip = float(np.linalg.eigvalsh(H)[-1])
        step = 1.0 / max(lip, 1e-300)
        if np.allclose(prob.project(z_unc), z_unc, rtol=0, atol=1e-12):
            z, res, iters = z_unc, np.linalg.norm(H @ z_unc + b) / max(1.0, np.linalg.norm(b)), 0
            diag["exact"] = True
            candidates = [(z, res, iters)]
        else:
            eig = np.linalg.eigh(H)
            candidates = [_admm(prob, H, b, z_unc, step, tol, max_iter, eig)]
            for _ in range(restarts):
                z0 = prob.project(rng.normal(size=prob.n))
                candidates.append(_admm(prob, H, b, z0, step, tol, max_iter, eig))
                diag["restarts"] += 1
        solver = "quadratic"
    else:
        candidates = [_projected_gradient(prob, np.zeros(prob.n), tol, max_iter)]
        for _ in range(restarts):
            z0 = prob.project(rng.normal(size=prob.n))
            candidates.append(_projected_gradient(prob, z0, tol, max_iter))
            diag["restarts"] += 1
        solver = "projected_gradient"
    if objective is None:
        objective = lambda z: prob.value_grad(z, need_grad=False)[0]  # noqa: E731
    values = [objective(c[0]) for c in candidates]
    best = int(np.argmin(values))
    z, res, iters = candidates[best]
    _, _, per = prob.value_grad(z, need_grad=False)
    u, Ms = prob.split(z)
    diag.update(
        solver=solver,
        residual=float(res),
        iterations=int(iters),
        converged=bool(res <= tol),
        multistart_spread=float(np.max(values) - np.min(values)),
        candidate_values=[float(v) for v in values],
        convex=_is_linear_quadratic(prob.specs),
    )
    if not diag["converged"]:
        log.warning("comparator did not reach tolerance %g (residual %g)", tol, res)
    return ComparatorSolution(u.copy(), [DACPolicy(M.copy(), gamma) for M in Ms], per, diag)


def comparator_replay(solution: ComparatorSolution, specs, x0=None) -> np.ndarray:
    """Per-rollout cost of the comparator, recomputed by actual rollouts."""
    from .dynamics import rollout

    out = []
    for (system, w, cost), dac in zip(specs, solution.M_star):
        policy = DACRolloutPolicy(dac, OpenLoopPlan(solution.u_star))
        out.append(rollout(system, policy, cost, w, x0).loss)
    return np.array(out)


@dataclass
class RegretReport:
    per_rollout: np.ndarray  # J_i(algorithm) - J_i(comparator)
    cumulative: float
    average: float
    series: np.ndarray  # running sum of per-rollout regret


def planning_regret(losses, comparator: ComparatorSolution) -> RegretReport:
    losses = np.asarray(losses, dtype=float)
    if losses.shape != comparator.per_rollout.shape:
        raise ValueError("losses and comparator cover different rollouts")
    per = losses - comparator.per_rollout
    cumulative = float(np.sum(losses) - comparator.total)
    return RegretReport(per, cumulative, cumulative / losses.size, np.cumsum(per))


def average_regret_at(losses, specs, prefixes, action_set, gamma, L, x0=None, **kw) -> dict:
    """Average planning regret over the first n rollouts, for each n in ``prefixes``."""
    out = {}
    for n in prefixes:
        sol = comparator_solve(specs[:n], action_set, gamma, L, x0, **kw)
        out[n] = planning_regret(np.asarray(losses[:n]), sol).average
    return out
