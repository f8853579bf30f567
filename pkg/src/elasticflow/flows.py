"""Conditional flow construction.

Convention used throughout the library: data lives at time 0, noise at time
1, states interpolate linearly as z_t = (1 - t) x + t eps, and the
instantaneous velocity along a conditional path is the constant eps - x.
With this convention a perfect average-velocity model recovers the sample in
one step as x_hat = z_1 - u(z_1, 0, 1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class FlowTimeError(ValueError):
    """Time argument outside the unit interval or ordered wrongly."""


@dataclass
class ActionChunk:
    """A block of horizon_steps x action_dim future actions generated jointly."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"ActionChunk values must be 2-D, got shape {self.values.shape}")
        if self.values.shape[0] < 1 or self.values.shape[1] < 1:
            raise ValueError(f"ActionChunk needs at least 1 step and 1 dim, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("ActionChunk values must be finite")

    @property
    def horizon_steps(self) -> int:
        return self.values.shape[0]

    @property
    def action_dim(self) -> int:
        return self.values.shape[1]

    @property
    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)

    @staticmethod
    def from_flat(flat: np.ndarray, horizon_steps: int, action_dim: int) -> "ActionChunk":
        return ActionChunk(np.asarray(flat, dtype=np.float64).reshape(horizon_steps, action_dim))


@dataclass
class FlowState:
    """State z on the flow with its time pair (r, t), 0 <= r <= t <= 1."""

    z: np.ndarray
    r: float
    t: float

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64)
        if not (0.0 <= self.r <= self.t <= 1.0):
            raise FlowTimeError(f"require 0 <= r <= t <= 1, got r={self.r}, t={self.t}")


def sample_noise(rng: np.random.Generator, shape) -> np.ndarray:
    """Standard normal noise; seed the generator for reproducible trials."""
    return rng.standard_normal(shape)


def interpolate(x: np.ndarray, eps: np.ndarray, t) -> np.ndarray:
    """Linear path z_t = (1 - t) x + t eps; t may be a scalar or [B, 1] column."""
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0.0) or np.any(t_arr > 1.0):
        raise FlowTimeError(f"interpolation time must lie in [0, 1], got {t!r}")
    return (1.0 - t_arr) * x + t_arr * eps


def conditional_velocity(x: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """Velocity eps - x, constant along the conditional path."""
    x = np.asarray(x, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x.shape != eps.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {eps.shape}")
    return eps - x


def sample_times(rng: np.random.Generator, rho_equal: float, size: int | None = None):
    """Draw the time pair: t = max(U, U'), r = min(U, U'); with probability
    rho_equal collapse to r = t (the boundary where average equals
    instantaneous velocity).

    Always consumes three uniform draws per sample so the stream is identical
    for any rho_equal. Returns scalars, or arrays of length `size`.
    """
    if not 0.0 <= rho_equal <= 1.0:
        raise ValueError(f"rho_equal must lie in [0, 1], got {rho_equal}")
    n = 1 if size is None else size
    u1 = rng.uniform(size=n)
    u2 = rng.uniform(size=n)
    u3 = rng.uniform(size=n)
    t = np.maximum(u1, u2)
    r = np.minimum(u1, u2)
    r = np.where(u3 < rho_equal, t, r)
    if size is None:
        return float(r[0]), float(t[0])
    return r, t


def drop_condition(cond, p_drop: float, rng: np.random.Generator):
    """Replace the condition with the null condition with probability p_drop."""
    from .network import Condition

    if not 0.0 <= p_drop <= 1.0:
        raise ValueError(f"p_drop must lie in [0, 1], got {p_drop}")
    if rng.uniform() < p_drop:
        return Condition.null(cond.goal.shape[0])
    return cond


def drop_mask(rng: np.random.Generator, n: int, p_drop: float) -> np.ndarray:
    """Vectorized dropout decisions for a batch; True marks rows forced to null."""
    if not 0.0 <= p_drop <= 1.0:
        raise ValueError(f"p_drop must lie in [0, 1], got {p_drop}")
    return rng.uniform(size=n) < p_drop
