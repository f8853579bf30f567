"""Guided sampling from a trained velocity field.

One-call generation: draw z ~ N(0, I) at time 1 and map straight to data with
x_hat = z - u(z, 0, 1). Guidance blends the conditional and unconditional
branches as  u_uncond + w * (u_cond - u_uncond); w = 1 and w = 0 short-circuit
to the raw branches so those cases are byte-exact. The multi-step Euler
sampler integrates the instantaneous field (span collapsed to r = t) from
noise to data and serves as the iterative baseline.

Every sampler reports how many times it touched the field per guidance
branch, so function-evaluation accounting is measured, not assumed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .flows import ActionChunk
from .network import Condition, VelocityModel, net_forward


@dataclass
class GuidanceConfig:
    w: float = 2.0
    use_cfg: bool = True

    def __post_init__(self):
        if not np.isfinite(self.w):
            raise ValueError("guidance scale must be finite")
        if self.w < 0:
            raise ValueError("guidance scale must be >= 0")


def cfg_combine(u_cond: np.ndarray, u_uncond: np.ndarray, w: float) -> np.ndarray:
    """u_uncond + w * (u_cond - u_uncond); exact passthrough at w = 0 and w = 1."""
    if u_cond.shape != u_uncond.shape:
        raise ValueError(f"shape mismatch {u_cond.shape} vs {u_uncond.shape}")
    if w == 1.0:
        return u_cond.copy()
    if w == 0.0:
        return u_uncond.copy()
    return u_uncond + w * (u_cond - u_uncond)


class CountingField:
    """Wrap a field(z, r, t, cond) callable with an evaluation counter."""

    def __init__(self, fn):
        self._fn = fn
        self.calls = 0

    def __call__(self, z, r, t, cond):
        self.calls += 1
        return self._fn(z, r, t, cond)


def model_field(model: VelocityModel, use_ema: bool = True) -> CountingField:
    """Trained network as a batched field; uses EMA weights when available."""

    def fn(z, r, t, cond):
        return net_forward(model, z, r, t, cond, use_ema=use_ema)

    return CountingField(fn)


def analytic_field(field) -> CountingField:
    """Adapt an oracle average-velocity field (ignores the condition)."""

    def fn(z, r, t, cond):
        return field(z, r, t)

    return CountingField(fn)


def _null_like(cond) -> Condition:
    if isinstance(cond, Condition):
        return Condition.null(cond.goal.shape[0])
    return Condition.null(cond[0].goal.shape[0])


def one_step_sample(field: CountingField, cond, guidance: GuidanceConfig,
                    rng: np.random.Generator, n: int = 1, dim: int | None = None,
                    chunk_shape: tuple | None = None):
    """Generate n samples with a single field query per guidance branch.

    Draws z ~ N(0, I), queries u over the full span (r, t) = (0, 1), and
    returns z - u_guided. With guidance enabled the unconditional branch is a
    second query, so the counter lands on 1 or 2 regardless of n (samples are
    batched). Returns (samples [n, dim], nfe_per_branch_calls).
    """
    if chunk_shape is not None:
        dim = chunk_shape[0] * chunk_shape[1]
    if dim is None:
        raise ValueError("pass dim or chunk_shape")
    before = field.calls
    z1 = rng.standard_normal((n, dim))
    u_cond = field(z1, 0.0, 1.0, cond)
    if guidance.use_cfg:
        u_uncond = field(z1, 0.0, 1.0, _null_like(cond))
        u = cfg_combine(u_cond, u_uncond, guidance.w)
    else:
        u = u_cond
    x_hat = z1 - u
    if chunk_shape is not None:
        x_hat = x_hat.reshape(n, *chunk_shape)
    return x_hat, field.calls - before


def euler_sample(field: CountingField, cond, n_steps: int, guidance: GuidanceConfig,
                 rng: np.random.Generator, n: int = 1, dim: int | None = None,
                 chunk_shape: tuple | None = None):
    """Integrate the instantaneous field (queried at r = t) from time 1 to 0.

    n_steps uniform Euler steps; the field is evaluated at times
    1, 1 - 1/n, ..., 1/n, never at 0. Returns (samples, field_calls), where
    field_calls is n_steps (times 2 with guidance).
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if chunk_shape is not None:
        dim = chunk_shape[0] * chunk_shape[1]
    if dim is None:
        raise ValueError("pass dim or chunk_shape")
    before = field.calls
    z = rng.standard_normal((n, dim))
    h = 1.0 / n_steps
    null_cond = _null_like(cond) if guidance.use_cfg else None
    for k in range(n_steps):
        tau = 1.0 - k * h
        u = field(z, tau, tau, cond)
        if guidance.use_cfg:
            u = cfg_combine(u, field(z, tau, tau, null_cond), guidance.w)
        z = z - h * u
    if chunk_shape is not None:
        z = z.reshape(n, *chunk_shape)
    return z, field.calls - before


@dataclass
class ControlSequence:
    """Executable control steps: row k plays at timestamps[k] = k * T / N."""

    timestamps: np.ndarray
    values: np.ndarray

    @property
    def dt(self) -> float:
        return float(self.timestamps[1] - self.timestamps[0]) if len(self.timestamps) > 1 \
            else float(self.timestamps[0])


def chunk_discretize(chunk, horizon_seconds: float, n_exec: int) -> ControlSequence:
    """Resample a chunk onto n_exec executable steps of size dt = T / N.

    Chunk rows are treated as samples at times k * T / T_h (k = 0..T_h - 1);
    targets at k * T / N are linearly interpolated per action dimension. When
    N equals T_h the values pass through unchanged.
    """
    if n_exec < 1:
        raise ValueError("n_exec must be >= 1")
    if horizon_seconds <= 0:
        raise ValueError("horizon_seconds must be positive")
    values = chunk.values if isinstance(chunk, ActionChunk) else np.asarray(chunk, dtype=np.float64)
    th = values.shape[0]
    src_t = np.arange(th) * horizon_seconds / th
    dst_t = np.arange(n_exec) * horizon_seconds / n_exec
    if n_exec == th:
        return ControlSequence(timestamps=dst_t, values=values.copy())
    out = np.empty((n_exec, values.shape[1]))
    for j in range(values.shape[1]):
        out[:, j] = np.interp(dst_t, src_t, values[:, j])
        # np.interp clamps past the last source row; continue the final
        # segment linearly instead so upsampled linear chunks stay exact
        tail = dst_t > src_t[-1]
        if np.any(tail) and th >= 2:
            slope = (values[-1, j] - values[-2, j]) / (src_t[-1] - src_t[-2])
            out[tail, j] = values[-1, j] + slope * (dst_t[tail] - src_t[-1])
    return ControlSequence(timestamps=dst_t, values=out)


def cfg_weight_sweep(sample_fn, weights, metric_fns: dict) -> dict:
    """Record metrics of guided samples across a grid of guidance scales.

    `sample_fn(w)` generates samples at scale w; each metric in `metric_fns`
    maps those samples to a float. Purely observational: the report records
    the curve without asserting any shape for it.
    """
    rows = []
    for w in weights:
        samples = sample_fn(float(w))
        row = {"w": float(w)}
        for name, fn in metric_fns.items():
            row[name] = float(fn(samples))
        rows.append(row)
    return {"weights": [float(w) for w in weights], "results": rows}
