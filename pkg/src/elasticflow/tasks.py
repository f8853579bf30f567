"""Desk-scale datasets and evaluation metrics.

The chunk generator builds two families of goal-reaching trajectories that
differ in frequency content and goal distance: short-horizon chunks carry a
high-frequency carrier on the way to a nearby goal, long-horizon chunks are
smooth minimum-jerk reaches to a distant goal. Conditioning honestly
separates the two regimes, so feeding a model the wrong horizon at inference
is measurably harmful -- which is exactly what the mismatch evaluation
checks.

Metrics: mean squared third difference (jerk), energy distance between
sample sets, high-frequency spectral energy ratio, goal-reach success, and a
wall-clock latency benchmark with Hz = 1000 / ms.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .network import Condition
from .oracle import GMMSpec

DATASET_KINDS = ("two_gaussians", "two_moons", "checkerboard")


@dataclass(frozen=True)
class HorizonSpec:
    """One control regime: chunk length, carrier band (cycles per chunk),
    physical horizon, and the radius band its goals are drawn from."""

    label: str
    horizon_steps: int
    freq_band: tuple
    horizon_seconds: float
    goal_radius: tuple

    def validate(self) -> None:
        if self.label not in ("short", "long"):
            raise ValueError(f"label must be short or long, got {self.label!r}")
        if self.horizon_steps < 4:
            raise ValueError("horizon_steps must be >= 4")
        if not (0 < self.freq_band[0] < self.freq_band[1]):
            raise ValueError("freq_band must be increasing and positive")
        if self.horizon_seconds <= 0:
            raise ValueError("horizon_seconds must be positive")


SHORT_HORIZON = HorizonSpec("short", 16, (4.0, 6.0), 1.0, (0.3, 0.7))
LONG_HORIZON = HorizonSpec("long", 16, (0.5, 1.0), 5.0, (1.3, 1.7))

TASK_IDS = {"short": 0, "long": 1}


def gen_2d_dataset(kind: str, n: int, rng: np.random.Generator):
    """Seeded 2-D toy samples; two_gaussians also returns its analytic law."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if kind == "two_gaussians":
        spec = GMMSpec.mixture([0.5, 0.5], [[1.0, 1.0], [-1.0, -1.0]], [0.01, 0.01])
        return spec.sample(n, rng), spec
    if kind == "two_moons":
        theta = rng.uniform(0.0, np.pi, size=n)
        upper = rng.uniform(size=n) < 0.5
        x = np.where(upper, np.cos(theta), 1.0 - np.cos(theta))
        y = np.where(upper, np.sin(theta), 0.5 - np.sin(theta))
        pts = np.stack([x, y], axis=1) + 0.05 * rng.standard_normal((n, 2))
        return pts, None
    if kind == "checkerboard":
        x = rng.uniform(-2.0, 2.0, size=n)
        shift = rng.integers(0, 2, size=n) * 2.0 - 1.0
        y = rng.uniform(0.0, 1.0, size=n) + shift * (np.floor(x) % 2)
        pts = np.stack([x, y - 0.5], axis=1)
        return pts, None
    raise ValueError(f"unknown dataset kind {kind!r}; choose from {DATASET_KINDS}")


def _minimum_jerk(s: np.ndarray) -> np.ndarray:
    return 10.0 * s ** 3 - 15.0 * s ** 4 + 6.0 * s ** 5


def gen_chunk_dataset(horizons, n_per: int, rng: np.random.Generator):
    """Goal-reaching chunks for each horizon regime.

    Returns (chunks [N, T_h, 2], conditions). Every chunk ends exactly at its
    condition's goal. Short chunks ride a high-frequency carrier along a
    straight reach; long chunks follow a minimum-jerk profile with a gentle
    low-frequency wobble. Carrier bands must not overlap between regimes.
    """
    horizons = list(horizons)
    for h in horizons:
        h.validate()
    bands = sorted(h.freq_band for h in horizons)
    for (_, hi), (lo, _) in zip(bands[:-1], bands[1:]):
        if hi >= lo:
            raise ValueError("horizon frequency bands must be disjoint")
    th = horizons[0].horizon_steps
    if any(h.horizon_steps != th for h in horizons):
        raise ValueError("all horizons must share horizon_steps")

    chunks = []
    conds = []
    s = (np.arange(th) + 1.0) / th
    envelope = np.sin(np.pi * s)          # zero at s = 1: goals stay exact
    for spec in horizons:
        for _ in range(n_per):
            angle = rng.uniform(0.0, 2.0 * np.pi)
            radius = rng.uniform(*spec.goal_radius)
            goal = radius * np.array([np.cos(angle), np.sin(angle)])
            freq = rng.uniform(*spec.freq_band)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            perp = np.array([-np.sin(angle), np.cos(angle)])
            if spec.label == "long":
                base = goal[None, :] * _minimum_jerk(s)[:, None]
                amp = 0.05 * radius
            else:
                base = goal[None, :] * s[:, None]
                amp = 0.15
            wobble = amp * np.sin(2.0 * np.pi * freq * s + phase) * envelope
            chunk = base + wobble[:, None] * perp[None, :]
            chunks.append(chunk)
            conds.append(Condition(goal=goal, task_id=TASK_IDS[spec.label],
                                   horizon_seconds=spec.horizon_seconds))
    return np.stack(chunks), conds


def jerk(values, dt: float) -> float:
    """Mean squared third difference, scaled by dt^-3 per derivative order.

    Only interior stencils count; chunks shorter than 4 steps have no third
    difference and are rejected.
    """
    x = np.asarray(values, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 4:
        raise ValueError(f"jerk needs at least 4 steps, got {x.shape[0]}")
    if dt <= 0:
        raise ValueError("dt must be positive")
    d3 = (x[3:] - 3.0 * x[2:-1] + 3.0 * x[1:-2] - x[:-3]) / dt ** 3
    return float(np.mean(np.sum(d3 * d3, axis=1)))


def energy_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Energy distance 2 E||A - B|| - E||A - A'|| - E||B - B'||.

    Plug-in (all-pairs) estimator: zero for identical sample sets and
    non-negative for any pair, at the price of a small bias.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("energy_distance needs non-empty sample sets")
    cross = cdist(a, b).mean()
    within_a = cdist(a, a).mean()
    within_b = cdist(b, b).mean()
    return float(2.0 * cross - within_a - within_b)


def spectral_energy_ratio(values, cutoff_bin: int) -> float:
    """Fraction of non-DC Fourier power at or above cutoff_bin.

    Power sums over action dimensions. A constant chunk has no non-DC power
    and maps to 0 by convention.
    """
    x = np.asarray(values, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    th = x.shape[0]
    if th < 8:
        raise ValueError(f"spectral_energy_ratio needs at least 8 steps, got {th}")
    if not 1 <= cutoff_bin <= th // 2:
        raise ValueError(f"cutoff_bin must lie in [1, {th // 2}]")
    spectrum = np.fft.rfft(x, axis=0)
    power = np.abs(spectrum[1:]) ** 2        # DC excluded
    total = power.sum()
    if total == 0.0:
        return 0.0
    return float(power[cutoff_bin - 1:].sum() / total)


def reach_success(values, cond: Condition, tol: float) -> bool:
    """True when the final action step lands within tol of the goal."""
    x = np.asarray(values, dtype=np.float64)
    if cond.is_null:
        raise ValueError("reach_success needs a goal-carrying condition")
    return bool(np.linalg.norm(x[-1] - cond.goal) <= tol)


@dataclass
class LatencyReport:
    trials: int
    entries: list = field(default_factory=list)

    def add(self, nfe: int, use_cfg: bool, timings_ms: list) -> None:
        ms = float(np.median(timings_ms))
        self.entries.append({
            "nfe": nfe,
            "use_cfg": use_cfg,
            "median_ms": ms,
            "hz": 1000.0 / ms,
            "timings_ms": [float(v) for v in timings_ms],
        })

    def median_ms(self, nfe: int, use_cfg: bool = False) -> float:
        for e in self.entries:
            if e["nfe"] == nfe and e["use_cfg"] == use_cfg:
                return e["median_ms"]
        raise KeyError(f"no entry for nfe={nfe} use_cfg={use_cfg}")

    def to_dict(self) -> dict:
        return {"trials": self.trials, "entries": self.entries}


def bench_latency(model, nfe_list, trials: int = 30, warmup: int = 3,
                  seed: int = 0, include_cfg: bool = True) -> LatencyReport:
    """Median per-sample wall time for each function-evaluation budget.

    Runs single-sample generation (the deployment shape). nfe = 1 uses the
    one-call sampler; larger budgets use the Euler sampler with that many
    steps. Reports both plain conditional timing and, optionally, the guided
    (two-branch) variant.
    """
    from . import sampling

    if trials < 10:
        raise ValueError("trials must be >= 10")
    cond = Condition(goal=np.zeros(model.config.cond_dim), task_id=0, horizon_seconds=1.0)
    report = LatencyReport(trials=trials)
    variants = [False, True] if include_cfg else [False]
    for nfe in nfe_list:
        for use_cfg in variants:
            g = sampling.GuidanceConfig(w=2.0, use_cfg=use_cfg)
            rng = np.random.default_rng(seed)
            f = sampling.model_field(model)

            def run_once():
                if nfe == 1:
                    sampling.one_step_sample(f, cond, g, rng, n=1, dim=model.config.input_dim)
                else:
                    sampling.euler_sample(f, cond, nfe, g, rng, n=1, dim=model.config.input_dim)

            for _ in range(warmup):
                run_once()
            timings = []
            for _ in range(trials):
                t0 = time.perf_counter()
                run_once()
                timings.append(1000.0 * (time.perf_counter() - t0))
            report.add(nfe, use_cfg, timings)
    return report
