"""Iterative planners: ILQG, ILC, IGPC and the ILQR oracle.

Each iteration rolls out an affine-gain policy, quadratizes the cost along
the visited trajectory, solves a time-varying affine LQR around the
linearized dynamics, and picks the step size by a retracting line search
whose probes are real rollouts when the mode targets the real system.

Modes differ only in the rollout target and in whose Jacobians are used:

    ilqg         rolls out on the simulator f; never touches the real system
    ilc          rolls out on the real system, linearizes f
    igpc         GPC rollout on the real system, linearizes f
    ilqr_oracle  rolls out on the real system, linearizes the real system
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .dynamics import ConfigError, DivergedRolloutError, PerturbedSystem, rollout
from .gpc import GPCParams, gpc_rollout
from .policies import AffineGainPolicy

log = logging.getLogger(__name__)

MODES = ("ilqg", "ilc", "igpc", "ilqr_oracle")


class LQRFailure(RuntimeError):
    pass


@dataclass(eq=False)
class QuadraticModel:
    """Second-order Taylor model of the per-step costs around pivots.

    Per step: value c0, gradients q (dx) and r (du), Hessian blocks
    Q (dx, dx), R (du, du) and P = d2c/du dx (du, dx).
    """

    c0: np.ndarray
    q: np.ndarray
    r: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    P: np.ndarray
    x0: np.ndarray
    u0: np.ndarray

    @property
    def T(self) -> int:
        return self.q.shape[0]

    def value(self, t: int, x, u) -> float:
        dx, du = x - self.x0[t], u - self.u0[t]
        return float(
            self.c0[t] + self.q[t] @ dx + self.r[t] @ du
            + 0.5 * (dx @ self.Q[t] @ dx + du @ self.R[t] @ du) + du @ self.P[t] @ dx
        )

    def grad(self, t: int, x, u):
        dx, du = x - self.x0[t], u - self.u0[t]
        return self.q[t] + self.Q[t] @ dx + self.P[t].T @ du, self.r[t] + self.R[t] @ du + self.P[t] @ dx


def quadratize(cost, t: int, x0, u0):
    """Taylor pieces of c_t at (x0, u0): (c0, q, r, Q, R, P)."""
    x0 = np.asarray(x0, dtype=float)
    u0 = np.asarray(u0, dtype=float)
    c0 = cost.value(t, x0, u0)
    q, r = cost.grad(t, x0, u0)
    Q, R, P = cost.hess(t, x0, u0)
    pieces = (c0, q, r, Q, R, P)
    if not all(np.all(np.isfinite(p)) for p in pieces):
        raise ValueError(f"non-finite cost derivatives at step {t}")
    return pieces


def quadratize_trajectory(cost, xs, us) -> QuadraticModel:
    T = us.shape[0]
    parts = [quadratize(cost, t, xs[t], us[t]) for t in range(T)]
    c0, q, r, Q, R, P = (np.array(p) for p in zip(*parts))
    return QuadraticModel(c0, q, r, Q, R, P, np.asarray(xs[:T], dtype=float), np.asarray(us, dtype=float))


def lqr_tv_solve(A, B, model: QuadraticModel, reg0: float = 1e-6, reg_max: float = 1e6):
    """Backward affine Riccati recursion.

    Minimizes sum_t model_t(x0_t + dx_t, u0_t + du_t) subject to
    dx_{t+1} = A_t dx_t + B_t du_t; returns (k, K, reg) with the optimal
    du_t = k_t + K_t dx_t and the regularization that was needed (0 if none).
    The terminal state is not costed.
    """
    T = model.T
    dx, du = B.shape[1], B.shape[2]
    reg = 0.0
    while True:
        try:
            k, K = _backward_pass(A, B, model, reg)
            return k, K, reg
        except np.linalg.LinAlgError:
            reg = reg0 if reg == 0 else reg * 10
            if reg > reg_max:
                raise LQRFailure(f"control Hessian not positive definite after regularization {reg / 10:g}")
            log.debug("lqr_tv_solve: regularizing control Hessian with %g", reg)


def _backward_pass(A, B, m: QuadraticModel, reg: float):
    T = m.T
    dx, du = B.shape[1], B.shape[2]
    k = np.zeros((T, du))
    K = np.zeros((T, du, dx))
    v = np.zeros(dx)
    V = np.zeros((dx, dx))
    for t in range(T - 1, -1, -1):
        At, Bt = A[t], B[t]
        Qx = m.q[t] + At.T @ v
        Qu = m.r[t] + Bt.T @ v
        Qxx = m.Q[t] + At.T @ V @ At
        Quu = m.R[t] + Bt.T @ V @ Bt + reg * np.eye(du)
        Qux = m.P[t] + Bt.T @ V @ At
        Quu = 0.5 * (Quu + Quu.T)
        chol = np.linalg.cholesky(Quu)
        sol = _chol_solve(chol, np.column_stack([Qu, Qux]))
        k[t] = -sol[:, 0]
        K[t] = -sol[:, 1:]
        v = Qx + K[t].T @ Quu @ k[t] + K[t].T @ Qu + Qux.T @ k[t]
        V = Qxx + K[t].T @ Quu @ K[t] + K[t].T @ Qux + Qux.T @ K[t]
        V = 0.5 * (V + V.T)
    return k, K


def _chol_solve(L, b):
    y = np.linalg.solve(L, b)
    return np.linalg.solve(L.T, y)


def trajectory_jacobians(system, xs, us):
    T = us.shape[0]
    pairs = [system.jacobians(t, xs[t], us[t]) for t in range(T)]
    return np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs])


def lqr_update(system, xs, us, cost, alpha: float = 1.0, nominal_u=None):
    """One LQR step around (xs, us); returns (k, K, policy).

    ``nominal_u`` is the base action the policy perturbs when it differs
    from the played action, as under a GPC overlay whose offsets are
    recomputed on the next rollout.
    """
    A, B = trajectory_jacobians(system, xs, us)
    model = quadratize_trajectory(cost, xs, us)
    k, K, _ = lqr_tv_solve(A, B, model)
    base = us if nominal_u is None else nominal_u
    return k, K, AffineGainPolicy(alpha, xs, base, k, K)


# --- the iterative planner ---------------------------------------------------


@dataclass(frozen=True)
class LineSearch:
    alpha_plus: float = 1.0
    shrink: float = 0.5
    max_trials: int = 8

    def alphas(self):
        return [self.alpha_plus * self.shrink**k for k in range(self.max_trials + 1)]


@dataclass(frozen=True)
class PlannerMode:
    mode: str
    line_search: LineSearch = LineSearch()

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown planner mode {self.mode!r}; valid modes: {', '.join(MODES)}")

    @property
    def uses_real(self) -> bool:
        return self.mode != "ilqg"


@dataclass
class LedgerRow:
    mode: str
    iteration: int
    real_rollouts_used: int
    alpha_accepted: float
    cost: float


@dataclass
class RolloutLog:
    rollout: int
    iteration: int
    alpha: float
    cost: float
    accepted: bool


@dataclass(eq=False)
class PlannerResult:
    mode: str
    ledger: list = field(default_factory=list)
    rollouts: list = field(default_factory=list)
    policy: AffineGainPolicy | None = None
    budget_exhausted: bool = False

    @property
    def costs(self) -> np.ndarray:
        return np.array([row.cost for row in self.ledger])

    @property
    def real_rollouts(self) -> int:
        return sum(1 for r in self.rollouts if r.rollout >= 0)


class _BudgetExhausted(Exception):
    pass


def iterative_planner(
    mode,
    simulator,
    disturbance,
    cost,
    N: int,
    u0=None,
    x0=None,
    gpc: GPCParams | None = None,
    budget: int | None = None,
    score_on_real: bool = False,
) -> PlannerResult:
    """Run ``N`` iterations of the combined iterative planning loop.

    ``disturbance`` is the mismatch between the real system and the simulator;
    its k-th real rollout is realization k, so agents sharing a model face
    identical realizations.  ``budget`` caps real rollouts, line-search
    probes included.  With ``score_on_real`` an ILQG agent additionally
    executes each accepted policy once on the real system for scoring; the
    ledger cost then reports that real cost.
    """
    if not isinstance(mode, PlannerMode):
        mode = PlannerMode(mode)
    if mode.mode == "igpc" and gpc is None:
        raise ConfigError("igpc mode needs GPC parameters")
    T, dx, du = simulator.T, simulator.state_dim, simulator.action_dim
    u_init = np.zeros((T, du)) if u0 is None else np.asarray(u0, dtype=float).reshape(T, du)
    result = PlannerResult(mode.mode)
    counter = {"real": 0}

    def run(policy):
        """One rollout on the mode's target; returns (record, real index or -1)."""
        if mode.uses_real:
            if budget is not None and counter["real"] >= budget:
                raise _BudgetExhausted
            idx = counter["real"]
            counter["real"] += 1
            if mode.mode == "igpc":
                rec, _ = gpc_rollout(simulator, policy, cost, gpc, disturbance, x0, rollout_index=idx)
            else:
                rec = rollout(simulator, policy, cost, disturbance, x0, rollout_index=idx)
            return rec, idx
        return rollout(simulator, policy, cost, None, x0), -1

    def score(policy):
        if budget is not None and counter["real"] >= budget:
            raise _BudgetExhausted
        idx = counter["real"]
        counter["real"] += 1
        rec = rollout(simulator, policy, cost, disturbance, x0, rollout_index=idx)
        result.rollouts.append(RolloutLog(idx, len(result.ledger) + 1, policy.alpha, rec.loss, True))
        return rec.loss

    def linearization_target(idx):
        if mode.mode == "ilqr_oracle":
            return PerturbedSystem(simulator, disturbance, idx)
        return simulator

    policy = AffineGainPolicy.open_loop(u_init, dx)
    try:
        rec, idx = run(policy)
        result.rollouts.append(RolloutLog(idx, 1, 0.0, rec.loss, True))
        prev_cost = rec.loss
        reported = score(policy) if (score_on_real and not mode.uses_real) else rec.loss
        result.ledger.append(LedgerRow(mode.mode, 1, counter["real"], 0.0, reported))
        accepted_policy, traj, traj_idx = policy, rec, idx
        for it in range(2, N + 1):
            A, B = trajectory_jacobians(linearization_target(traj_idx), traj.states, traj.actions)
            model = quadratize_trajectory(cost, traj.states, traj.actions)
            k, K, _ = lqr_tv_solve(A, B, model)
            # under GPC the offsets are recomputed every rollout, so the
            # policy perturbs the base actions rather than the played ones
            base = traj.actions - traj.offsets if mode.mode == "igpc" else traj.actions
            candidate = AffineGainPolicy(0.0, traj.states, base, k, K)
            accepted = None
            for alpha in mode.line_search.alphas():
                probe = candidate.with_alpha(alpha)
                try:
                    rec, idx = run(probe)
                    c = rec.loss
                except DivergedRolloutError:
                    rec, idx, c = None, counter["real"] - 1 if mode.uses_real else -1, np.inf
                ok = c < prev_cost
                result.rollouts.append(RolloutLog(idx, it, alpha, float(c), ok))
                if ok:
                    accepted = (probe, rec, idx, alpha)
                    break
            if accepted is None:
                # keep the previous plan; its cost stands for this iteration
                result.ledger.append(LedgerRow(mode.mode, it, counter["real"], 0.0, result.ledger[-1].cost))
                continue
            accepted_policy, traj, traj_idx, alpha = accepted
            prev_cost = traj.loss
            reported = score(accepted_policy) if (score_on_real and not mode.uses_real) else traj.loss
            result.ledger.append(LedgerRow(mode.mode, it, counter["real"], alpha, reported))
    except _BudgetExhausted:
        result.budget_exhausted = True
    result.policy = accepted_policy
    return result


def sweep_alpha_plus(grid, run_fn):
    """Evaluate ``run_fn(alpha_plus) -> PlannerResult`` over ``grid``.

    Returns (best alpha_plus, {alpha_plus: result}); best is the one with
    the lowest final cost, ties broken by fewer real rollouts.
    """
    results = {a: run_fn(a) for a in grid}
    best = min(grid, key=lambda a: (results[a].costs[-1], results[a].real_rollouts))
    return best, results
