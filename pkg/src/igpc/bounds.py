"""A-priori bounds for strongly stable linear systems.

All bounds assume x_0 = 0, |A_t| <= 1 - delta, |B_t| <= kappa with
kappa >= 1, base actions |u_t| <= U, disturbances |w_t| <= W and DAC
matrices with |M_r| <= gamma for each of the L lags.
"""

from __future__ import annotations

import numpy as np

from .dynamics import ConfigError, LinearSystem


def transfer_bound(delta: float, j: int, k: int) -> float:
    """Bound on |A_{k-1} ... A_{j+1}|."""
    return (1.0 - delta) ** (k - j - 1)


def action_bound(U: float, gamma: float, L: int, W: float) -> float:
    return U + gamma * L * W


def state_bound(kappa: float, delta: float, U: float, gamma: float, L: int, W: float) -> float:
    """(kappa U + kappa gamma L W + W) / delta; covers surrogate states too."""
    return (kappa * U + kappa * gamma * L * W + W) / delta


def outer_gradient_bound(G: float, kappa: float, delta: float, U: float, gamma: float, L: int, W: float) -> float:
    """Per-coordinate bound on the gradient of the summed (not averaged) cost
    in the plan, for costs with |grad c| <= G D on the ball of radius D."""
    return 2 * G * kappa * (kappa * U + kappa * gamma * L * W + W) / delta**2


def random_strongly_stable(rng, T: int, dx: int, du: int, kappa: float, delta: float,
                           time_varying: bool = True) -> LinearSystem:
    """Random system with |A_t| <= 1 - delta and |B_t| <= kappa at every t.

    Norms are drawn uniformly below the caps, so some steps sit on them.
    """
    if not (0 < delta <= 1 and kappa >= 1):
        raise ConfigError("need 0 < delta <= 1 and kappa >= 1")
    n = T if time_varying else 1
    A = rng.standard_normal((n, dx, dx))
    B = rng.standard_normal((n, dx, du))
    a_scale = (1 - delta) * rng.uniform(0.5, 1.0, n) / np.linalg.norm(A, 2, axis=(1, 2))
    b_scale = kappa * rng.uniform(0.5, 1.0, n) / np.linalg.norm(B, 2, axis=(1, 2))
    A *= a_scale[:, None, None]
    B *= b_scale[:, None, None]
    if not time_varying:
        A, B = np.repeat(A, T, axis=0), np.repeat(B, T, axis=0)
    return LinearSystem(A, B, kappa=kappa, delta=delta)
