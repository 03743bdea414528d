"""Per-step cost models.

A cost exposes ``value(t, x, u)``, ``grad(t, x, u) -> (gx, gu)`` and
``hess(t, x, u) -> (Hxx, Huu, Hux)`` where ``Hux`` is the (du, dx) block of
mixed partials.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class QuadraticCost:
    """c(x, u) = (x - goal)' Q (x - goal) + u' R u."""

    Q: np.ndarray
    R: np.ndarray
    goal: np.ndarray | None = None

    is_quadratic = True

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)
        goal = np.zeros(Q.shape[0]) if self.goal is None else np.asarray(self.goal, dtype=float)
        object.__setattr__(self, "goal", goal)

    def value(self, t, x, u) -> float:
        e = x - self.goal
        return float(e @ self.Q @ e + u @ self.R @ u)

    def grad(self, t, x, u):
        return 2 * self.Q @ (x - self.goal), 2 * self.R @ u

    def hess(self, t, x, u):
        return 2 * self.Q, 2 * self.R, np.zeros((self.R.shape[0], self.Q.shape[0]))

    @property
    def lipschitz(self) -> float:
        """G with |grad| <= G D whenever |x|, |u| <= D (goal at the origin)."""
        return 2 * max(np.linalg.norm(self.Q, 2), np.linalg.norm(self.R, 2))

    @property
    def smoothness(self) -> float:
        return 2 * max(np.max(np.linalg.eigvalsh(self.Q)), np.max(np.linalg.eigvalsh(self.R)))


def cost_from_callables(value, grad, hess):
    """Wrap three functions of (t, x, u) as a cost object."""

    class _Cost:
        is_quadratic = False

    c = _Cost()
    c.value, c.grad, c.hess = value, grad, hess
    return c
