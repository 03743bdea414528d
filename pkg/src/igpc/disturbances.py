"""Disturbance generators.

Every model is a deterministic function of (rollout index, time, seed) and,
for field-type kinds, of the current state.  ``bound`` is a guaranteed upper
bound on the Euclidean norm of every emitted vector.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .dynamics import ConfigError

KINDS = (
    "zero",
    "constant_offset",
    "rollout_growing_offset",
    "phase_shifted_sinusoid",
    "wind_field",
    "periodic_impulse",
    "custom_sequence",
)


def wind_force(position, strength: float) -> np.ndarray:
    """Dispersive force field ``strength * (x i + y j)``."""
    return strength * np.asarray(position, dtype=float)


def _unit(direction, dim: int) -> np.ndarray:
    d = np.ones(dim) if direction is None else np.asarray(direction, dtype=float)
    if d.shape != (dim,):
        raise ConfigError(f"direction must have length {dim}, got {d.shape}")
    n = np.linalg.norm(d)
    if n == 0:
        raise ConfigError("direction must be nonzero")
    return d / n


@dataclass(frozen=True, eq=False)
class DisturbanceModel:
    """Parametric disturbance w_t^i.

    ``frequency`` is in cycles per step.  Rollout phases for the sinusoid are
    drawn uniformly on [0, phase_spread) from ``seed`` and the rollout index.
    ``wind_field`` maps position slots to an acceleration on velocity slots,
    integrated over ``dt`` and smoothly saturated at ``radius``.
    """

    kind: str
    state_dim: int
    magnitude: float = 0.0
    direction: tuple | None = None
    frequency: float = 0.05
    phase_spread: float = 2 * np.pi
    growth: float = 0.1
    period: int = 10
    radius: float = 2.0
    dt: float = 0.05
    position_index: tuple = (0, 1)
    center: tuple = (0.0, 0.0)
    velocity_index: tuple = (3, 4)
    sequence: np.ndarray | None = None
    seed: int = 0
    _dir: np.ndarray = field(init=False, repr=False)

    is_model = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown disturbance kind {self.kind!r}; valid kinds: {', '.join(KINDS)}")
        if self.magnitude < 0:
            raise ConfigError("magnitude must be nonnegative")
        if self.kind == "custom_sequence":
            if self.sequence is None:
                raise ConfigError("custom_sequence requires a sequence")
            seq = np.asarray(self.sequence, dtype=float)
            if seq.ndim == 2:
                seq = seq[None]
            if seq.ndim != 3 or seq.shape[2] != self.state_dim:
                raise ConfigError(f"sequence must be (T, {self.state_dim}) or (N, T, {self.state_dim})")
            object.__setattr__(self, "sequence", seq)
        if self.kind == "periodic_impulse" and self.period < 1:
            raise ConfigError("impulse period must be >= 1")
        if self.kind == "wind_field":
            d = None
        elif self.kind == "periodic_impulse":
            d = np.zeros(self.state_dim)
            d[list(self.velocity_index)] = _unit(self.direction, len(self.velocity_index))
        else:
            d = _unit(self.direction, self.state_dim)
        object.__setattr__(self, "_dir", d)

    @property
    def bound(self) -> float:
        if self.kind == "zero":
            return 0.0
        if self.kind == "wind_field":
            return self.magnitude * self.dt * self.radius
        if self.kind == "custom_sequence":
            return float(np.max(np.linalg.norm(self.sequence, axis=-1)))
        return self.magnitude

    @property
    def state_dependent(self) -> bool:
        return self.kind == "wind_field"

    def phase(self, rollout_index: int) -> float:
        rng = np.random.default_rng([self.seed, rollout_index])
        return float(rng.uniform(0.0, self.phase_spread))

    def _saturate(self, p):
        # p / sqrt(1 + |p|^2 / R^2) has norm < R
        return p / np.sqrt(1.0 + (p @ p) / self.radius**2)

    def __call__(self, rollout_index: int, t: int, x=None, u=None) -> np.ndarray:
        k = self.kind
        if k == "zero":
            return np.zeros(self.state_dim)
        if k == "constant_offset":
            return self.magnitude * self._dir
        if k == "rollout_growing_offset":
            return self.magnitude * min(1.0, self.growth * (rollout_index + 1)) * self._dir
        if k == "phase_shifted_sinusoid":
            s = np.sin(2 * np.pi * self.frequency * t + self.phase(rollout_index))
            return self.magnitude * s * self._dir
        if k == "periodic_impulse":
            return self.magnitude * self._dir if t % self.period == 0 and t > 0 else np.zeros(self.state_dim)
        if k == "wind_field":
            w = np.zeros(self.state_dim)
            p = np.asarray(x, dtype=float)[list(self.position_index)] - np.asarray(self.center, dtype=float)
            w[list(self.velocity_index)] = self.dt * self._saturate(wind_force(p, self.magnitude))
            return w
        seq = self.sequence[rollout_index % self.sequence.shape[0]]
        return seq[t].copy()

    def jacobian_x(self, rollout_index: int, t: int, x=None, u=None) -> np.ndarray:
        J = np.zeros((self.state_dim, self.state_dim))
        if self.kind != "wind_field":
            return J
        p = self.magnitude * (np.asarray(x, dtype=float)[list(self.position_index)] - np.asarray(self.center, dtype=float))
        s = 1.0 + (p @ p) / self.radius**2
        # d/dp [p s^{-1/2}] = s^{-1/2} I - s^{-3/2} p p^T / R^2
        dsat = np.eye(p.size) / np.sqrt(s) - np.outer(p, p) / (self.radius**2 * s**1.5)
        rows, cols = list(self.velocity_index), list(self.position_index)
        J[np.ix_(rows, cols)] = self.dt * self.magnitude * dsat
        return J

    def realize(self, rollout_index: int, T: int) -> np.ndarray:
        """The (T, dx) sequence for a state-independent kind."""
        if self.state_dependent:
            raise ConfigError("state-dependent disturbances have no open-loop realization")
        return np.array([self(rollout_index, t) for t in range(T)])


def save_disturbance_csv(path, w) -> None:
    """One row per time step: ``t,w0,w1,...``."""
    w = np.atleast_2d(np.asarray(w, dtype=float))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t"] + [f"w{j}" for j in range(w.shape[1])])
        for t, row in enumerate(w):
            writer.writerow([t] + [repr(float(v)) for v in row])


def load_disturbance_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[0] != "t":
            raise ConfigError(f"{path}: expected header starting with 't'")
        rows = [[float(v) for v in r[1:]] for r in reader if r]
    return np.array(rows).reshape(len(rows), len(header) - 1)
