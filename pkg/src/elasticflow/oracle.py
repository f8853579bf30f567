"""Closed-form ground truth for linear noise-data flows of Gaussian mixtures.

For data drawn from an isotropic Gaussian mixture and states
z_t = (1 - t) x + t eps, the posterior over (x, eps) given z_t is Gaussian
per component, so the marginal velocity E[eps - x | z_t = z] has a closed
form. Characteristics of that field can be integrated numerically, which
yields a brute-force average velocity u = (z_t - z_r) / (t - r) that is
completely independent of any learned model. The differential constraint

    u(z, r, t) = v(z, t) - (t - r) * d/dt u(z, r, t)

(total derivative along the flow, r held fixed) must hold for the true
average-velocity field; `identity_residual` measures how far a candidate
field is from satisfying it, with the derivatives taken by central finite
differences.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

DIRAC_TAU_MIN = 1e-4

# default (z, r, t) grid for identity checks: t stays above 0.4 so the
# h^2 truncation floor of the finite differences (~ |z| h^2 (t-r) / t^4)
# stays well under the tightest tolerance used on point-mass fields
GRID_Z = (-2.0, 2.0)
GRID_T = (0.4, 0.95)
GRID_R_FRAC = 0.9


class SingularTimeError(ValueError):
    """Velocity requested at a time where a zero-variance component is singular."""


@dataclass
class GMMSpec:
    """Isotropic Gaussian mixture data law: list of (weight, mean, variance).

    variance 0 marks a point mass. Weights must be positive and sum to one.
    """

    components: list[tuple[float, np.ndarray, float]]
    dims: int

    def __post_init__(self):
        comps = []
        total = 0.0
        for w, m, var in self.components:
            m = np.asarray(m, dtype=np.float64).reshape(-1)
            if m.shape[0] != self.dims:
                raise ValueError(f"component mean has dim {m.shape[0]}, spec dims {self.dims}")
            if w <= 0:
                raise ValueError("component weights must be positive")
            if var < 0:
                raise ValueError("component variances must be >= 0")
            comps.append((float(w), m, float(var)))
            total += w
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"weights must sum to 1, got {total}")
        self.components = comps

    @property
    def has_point_mass(self) -> bool:
        return any(var == 0.0 for _, _, var in self.components)

    @staticmethod
    def dirac(x0) -> "GMMSpec":
        x0 = np.asarray(x0, dtype=np.float64).reshape(-1)
        return GMMSpec(components=[(1.0, x0, 0.0)], dims=x0.shape[0])

    @staticmethod
    def gaussian(mean, var: float) -> "GMMSpec":
        mean = np.asarray(mean, dtype=np.float64).reshape(-1)
        return GMMSpec(components=[(1.0, mean, var)], dims=mean.shape[0])

    @staticmethod
    def mixture(weights, means, variances) -> "GMMSpec":
        means = [np.asarray(m, dtype=np.float64).reshape(-1) for m in means]
        return GMMSpec(components=list(zip(weights, means, variances)), dims=means[0].shape[0])

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        weights = np.array([w for w, _, _ in self.components])
        ks = rng.choice(len(self.components), size=n, p=weights)
        out = np.empty((n, self.dims))
        for k, (_, m, var) in enumerate(self.components):
            mask = ks == k
            out[mask] = m + np.sqrt(var) * rng.standard_normal((int(mask.sum()), self.dims))
        return out

    def arrays(self):
        """(weights [K], means [K, d], variances [K]) for vectorized math."""
        w = np.array([c[0] for c in self.components])
        m = np.stack([c[1] for c in self.components])
        v = np.array([c[2] for c in self.components])
        return w, m, v


def _marginal_rows(spec: GMMSpec, z: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Marginal velocity with per-row times: z [n, d], t [n] -> v [n, d]."""
    w, means, var = spec.arrays()
    d = spec.dims
    omt = (1.0 - t)[:, None]                       # [n, 1]
    sz2 = omt * omt * var[None, :] + (t * t)[:, None]   # [n, K]
    if np.any(sz2 <= 0.0):
        raise SingularTimeError("zero state variance: point-mass component at t = 0")
    coef = (t[:, None] - omt * var[None, :]) / sz2      # [n, K]
    diff = z[:, None, :] - omt[:, :, None] * means[None, :, :]   # [n, K, d]
    sq = np.einsum("nkd,nkd->nk", diff, diff)
    logp = np.log(w)[None, :] - 0.5 * d * np.log(2.0 * np.pi * sz2) - 0.5 * sq / sz2
    logp -= logp.max(axis=1, keepdims=True)
    resp = np.exp(logp)
    resp /= resp.sum(axis=1, keepdims=True)
    cond = -means[None, :, :] + coef[:, :, None] * diff          # [n, K, d]
    return np.einsum("nk,nkd->nd", resp, cond)


def marginal_velocity(spec: GMMSpec, z, t: float) -> np.ndarray:
    """E[eps - x | z_t = z] in closed form via per-component Gaussian posteriors.

    `z` is [d] or [n, d]. Requires t > 0 when the spec contains a point mass
    (the posterior collapses there); t = 0 is fine for smooth specs.
    """
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    zb = z[None, :] if single else z
    if zb.ndim != 2 or zb.shape[1] != spec.dims:
        raise ValueError(f"z must be [n, {spec.dims}] or [{spec.dims}], got {z.shape}")
    if t < 0.0:
        raise SingularTimeError(f"time must be >= 0, got {t}")
    if spec.has_point_mass and t < 1e-12:
        raise SingularTimeError("marginal velocity of a point mass is singular at t = 0")
    v = _marginal_rows(spec, zb, np.full(zb.shape[0], float(t)))
    return v[0] if single else v


def _clamp_lower(spec: GMMSpec, r: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Lower integration limit, lifted to DIRAC_TAU_MIN for point-mass specs."""
    if not spec.has_point_mass:
        return r
    return np.minimum(np.maximum(r, DIRAC_TAU_MIN), t)


def _integrate_rows(spec: GMMSpec, z0: np.ndarray, t0: np.ndarray, t1: np.ndarray,
                    n_steps: int, record_path: bool = False):
    """Batched RK4 for dz/dtau = v(z, tau), each row from t0[i] to t1[i].

    All rows use the same number of steps over their own span (time is
    normalized per row). Returns the final states, and optionally the full
    path [n_steps + 1, n, d] with its per-row time grid [n_steps + 1, n].
    """
    z = z0.copy()
    span = (t1 - t0)[:, None]
    sigma = np.linspace(0.0, 1.0, n_steps + 1)
    taus = t0[None, :] + sigma[:, None] * (t1 - t0)[None, :]
    h = 1.0 / n_steps
    if record_path:
        path = np.empty((n_steps + 1,) + z.shape)
        path[0] = z
    for i in range(n_steps):
        tau_a = taus[i]
        tau_m = 0.5 * (taus[i] + taus[i + 1])
        tau_b = taus[i + 1]
        k1 = span * _marginal_rows(spec, z, tau_a)
        k2 = span * _marginal_rows(spec, z + 0.5 * h * k1, tau_m)
        k3 = span * _marginal_rows(spec, z + 0.5 * h * k2, tau_m)
        k4 = span * _marginal_rows(spec, z + h * k3, tau_b)
        z = z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if record_path:
            path[i + 1] = z
    if record_path:
        return z, path, taus
    return z


def integrate_characteristic(spec: GMMSpec, z_t, t: float, r: float,
                             n_steps: int = 256):
    """RK4 integration of dz/dtau = v(z, tau) from tau = t back to tau = r.

    Returns (taus, path) with path[0] = z_t and path[-1] = z at the final
    time. For specs with a point mass the integration stops at
    tau = DIRAC_TAU_MIN instead of going below it; taus[-1] reports the time
    actually reached. `z_t` may be a single state [d] or a batch [n, d].
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if not 0.0 <= r <= t <= 1.0:
        raise ValueError(f"require 0 <= r <= t <= 1, got r={r}, t={t}")
    z = np.asarray(z_t, dtype=np.float64)
    single = z.ndim == 1
    zb = z[None, :] if single else z
    n = zb.shape[0]
    r_eff = float(_clamp_lower(spec, np.array([r]), np.array([t]))[0])
    _, path, taus = _integrate_rows(spec, zb, np.full(n, float(t)), np.full(n, r_eff),
                                    n_steps, record_path=True)
    tau_grid = taus[:, 0]
    return tau_grid, (path[:, 0, :] if single else path)


def oracle_average_velocity(spec: GMMSpec, z_t, r: float, t: float,
                            n_steps: int = 256, return_path_mean: bool = False):
    """Brute-force average velocity u = (z_t - z_r) / (t - r).

    The endpoint z_r comes from integrating the characteristic. With
    `return_path_mean` the Simpson path average of v along the characteristic
    is returned as well; the two agree up to quadrature error. Degenerate
    spans (t - r below 1e-9) return the instantaneous velocity.
    """
    z = np.asarray(z_t, dtype=np.float64)
    if t - r < 1e-9:
        u = marginal_velocity(spec, z, t)
        return (u, u) if return_path_mean else u
    taus, path = integrate_characteristic(spec, z, t, r, n_steps)
    z_end = path[-1]
    # when a point-mass spec clamps the lower limit, the quotient uses the
    # time actually reached; exact for pure point masses, whose
    # characteristics have constant velocity
    u = (path[0] - z_end) / (t - taus[-1])
    if not return_path_mean:
        return u
    single = z.ndim == 1
    pb = path[:, None, :] if single else path
    vels = np.empty_like(pb)
    for i, tau in enumerate(taus):
        vels[i] = _marginal_rows(spec, pb[i], np.full(pb.shape[1], tau))
    u_path = _simpson_mean(vels, taus)
    u_path = u_path[0] if single else u_path
    return u, u_path


def _simpson_mean(values: np.ndarray, taus: np.ndarray) -> np.ndarray:
    """Average of sampled values over the tau span by composite Simpson."""
    n = len(taus) - 1
    h = taus[1] - taus[0]
    if n % 2 == 1:  # trapezoid on the last interval
        core = _simpson_mean(values[:-1], taus[:-1]) * (taus[-2] - taus[0])
        core += 0.5 * h * (values[-2] + values[-1])
        return core / (taus[-1] - taus[0])
    weights = np.ones(n + 1)
    weights[1:-1:2] = 4.0
    weights[2:-1:2] = 2.0
    integral = (h / 3.0) * np.tensordot(weights, values, axes=(0, 0))
    return integral / (taus[-1] - taus[0])


class AverageField:
    """Base for average-velocity fields u(z, r, t) supporting batched queries."""

    def __call__(self, z, r: float, t: float) -> np.ndarray:
        raise NotImplementedError

    def evaluate_many(self, z: np.ndarray, r: np.ndarray, t: np.ndarray) -> np.ndarray:
        """Rows (z[i], r[i], t[i]) -> u[i]; default falls back to scalar calls."""
        out = np.empty_like(z)
        for i in range(z.shape[0]):
            out[i] = self(z[i], float(r[i]), float(t[i]))
        return out


class DiracField(AverageField):
    """Exact average-velocity field (z - x0) / t of a point mass at x0.

    Independent of r: the characteristics of a point-mass flow are straight
    lines through x0, so the average over any [r, t] equals the slope.
    """

    def __init__(self, x0):
        self.x0 = np.asarray(x0, dtype=np.float64).reshape(-1)

    def __call__(self, z, r: float, t: float) -> np.ndarray:
        if t <= 0:
            raise SingularTimeError("point-mass field is singular at t = 0")
        return (np.asarray(z, dtype=np.float64) - self.x0) / t

    def evaluate_many(self, z, r, t):
        if np.any(t <= 0):
            raise SingularTimeError("point-mass field is singular at t = 0")
        return (z - self.x0[None, :]) / t[:, None]


class OracleField(AverageField):
    """Brute-force average velocity of a GMM flow, as a reusable field object."""

    def __init__(self, spec: GMMSpec, n_steps: int = 256):
        self.spec = spec
        self.n_steps = n_steps

    def __call__(self, z, r: float, t: float) -> np.ndarray:
        return oracle_average_velocity(self.spec, z, r, t, n_steps=self.n_steps)

    def evaluate_many(self, z, r, t):
        degenerate = (t - r) < 1e-9
        r_eff = _clamp_lower(self.spec, r, t)
        z_end = _integrate_rows(self.spec, z, t, r_eff, self.n_steps)
        span = t - r_eff
        span = np.where(degenerate, 1.0, span)
        u = (z - z_end) / span[:, None]
        if np.any(degenerate):
            u[degenerate] = _marginal_rows(self.spec, z[degenerate], t[degenerate])
        return u


def dirac_average_field(x0) -> DiracField:
    return DiracField(x0)


def oracle_field(spec: GMMSpec, n_steps: int = 256) -> OracleField:
    return OracleField(spec, n_steps)


def identity_residual(u_field, spec: GMMSpec, z, r: float, t: float,
                      h: float = 1e-4) -> np.ndarray:
    """Residual || u - v + (t - r) (v . grad_z u + d_t u) || of a candidate field.

    Derivatives of `u_field` are taken by central differences with step `h`;
    v comes from the closed-form marginal velocity. `z` may be [d] (scalar
    residual) or [n, d] (one residual per row).
    """
    if not 0.0 < h <= 1e-2:
        raise ValueError(f"h must lie in (0, 1e-2], got {h}")
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    zb = z[None, :] if single else z

    v = marginal_velocity(spec, zb, t)
    u0 = u_field(zb, r, t)
    conv = (u_field(zb + h * v, r, t) - u_field(zb - h * v, r, t)) / (2.0 * h)
    unst = (u_field(zb, r, t + h) - u_field(zb, r, t - h)) / (2.0 * h)
    res = u0 - v + (t - r) * (conv + unst)
    norms = np.linalg.norm(res, axis=-1)
    return float(norms[0]) if single else norms


def identity_grid_check(u_field, spec: GMMSpec, n_grid: int = 10, h: float = 1e-4,
                        z_range: tuple = GRID_Z, t_range: tuple = GRID_T,
                        r_frac_hi: float = GRID_R_FRAC) -> dict:
    """Max identity residual over an n x n x n grid of (z, r, t).

    z sweeps a diagonal line through [z_lo, z_hi]^d, t sweeps t_range, and
    r = frac * t for frac in [0, r_frac_hi]. Fields that implement
    `evaluate_many` (both oracle field types do) are queried in one batched
    pass: every stencil point of every grid cell goes through a single
    vectorized evaluation. Returns a JSON-ready report with the worst point.
    """
    start = time.perf_counter()
    z_grid = np.linspace(z_range[0], z_range[1], n_grid)
    zb = np.repeat(z_grid[:, None], spec.dims, axis=1)       # [n, d]
    t_grid = np.linspace(t_range[0], t_range[1], n_grid)
    fracs = np.linspace(0.0, r_frac_hi, n_grid)

    n = n_grid
    cells = []
    for t in t_grid:
        v = marginal_velocity(spec, zb, float(t))
        for frac in fracs:
            cells.append((float(frac * t), float(t), v))

    # stencil layout per cell: [center, z+hv, z-hv, t+h, t-h], n rows each
    big_z, big_r, big_t = [], [], []
    for r, t, v in cells:
        big_z.extend([zb, zb + h * v, zb - h * v, zb, zb])
        big_r.extend([np.full(n, r)] * 5)
        big_t.extend([np.full(n, t), np.full(n, t), np.full(n, t),
                      np.full(n, t + h), np.full(n, t - h)])
    Z = np.concatenate(big_z, axis=0)
    R = np.concatenate(big_r)
    T = np.concatenate(big_t)

    if isinstance(u_field, AverageField):
        U = u_field.evaluate_many(Z, R, T)
    else:
        U = AverageField.evaluate_many.__get__(_CallableWrapper(u_field))(Z, R, T)

    worst = {"residual": -1.0}
    for idx, (r, t, v) in enumerate(cells):
        base = idx * 5 * n
        u0 = U[base:base + n]
        up = U[base + n:base + 2 * n]
        um = U[base + 2 * n:base + 3 * n]
        utp = U[base + 3 * n:base + 4 * n]
        utm = U[base + 4 * n:base + 5 * n]
        res = u0 - v + (t - r) * ((up - um) / (2.0 * h) + (utp - utm) / (2.0 * h))
        norms = np.linalg.norm(res, axis=-1)
        i = int(np.argmax(norms))
        if norms[i] > worst["residual"]:
            worst = {"residual": float(norms[i]), "z": float(z_grid[i]), "r": r, "t": t}
    return {
        "n_grid": n_grid,
        "h": h,
        "max_residual": worst["residual"],
        "worst_point": {k: worst[k] for k in ("z", "r", "t")},
        "runtime_s": time.perf_counter() - start,
    }


class _CallableWrapper(AverageField):
    def __init__(self, fn):
        self._fn = fn

    def __call__(self, z, r, t):
        return self._fn(z, r, t)
