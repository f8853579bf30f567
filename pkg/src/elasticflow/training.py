"""Training objectives and the optimization loop.

Two objectives over the same network:

- average-velocity ("meanflow"): regress u(z_t, r, t) onto the bootstrapped
  target  T = v - (t - r) * (v . grad_z u + d_t u), where the directional
  derivative comes from one forward-mode pass and the target is held constant
  during backprop (stop-gradient).
- instantaneous ("cfm"): regress u(z_t, t, t) onto v directly.

Both consume randomness in exactly the same order (times, noise, condition
dropout), so with the span collapsed to zero (rho_equal = 1) the two losses
agree bitwise on equal seeds.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import engine as ef
from . import flows
from .network import CondBatch, NetworkConfig, VelocityModel, init_velocity_model, \
    net_forward_graph, net_forward_jvp, stack_conditions

OBJECTIVES = ("meanflow", "cfm")


class NumericalAbort(RuntimeError):
    """Raised when a non-finite loss or target appears; carries diagnostics."""

    def __init__(self, step: int, detail: str, last_good: dict | None = None,
                 report: "TrainReport | None" = None):
        self.step = step
        self.last_good = last_good
        self.report = report
        super().__init__(f"non-finite value at step {step}: {detail}")


LR_SCHEDULES = ("constant", "cosine")


@dataclass
class TrainConfig:
    objective: str = "meanflow"
    learning_rate: float = 1e-3
    batch_size: int = 128
    steps: int = 2000
    p_drop: float = 0.1
    rho_equal: float = 0.5
    ema_decay: float = 0.999
    seed: int = 0
    lr_schedule: str = "constant"
    clip_norm: float | None = None

    def validate(self) -> None:
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")
        if not 0.0 <= self.p_drop <= 1.0 or not 0.0 <= self.rho_equal <= 1.0:
            raise ValueError("p_drop and rho_equal must lie in [0, 1]")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {LR_SCHEDULES}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive when set")

    def lr_at(self, step: int) -> float:
        if self.lr_schedule == "cosine" and self.steps > 0:
            return self.learning_rate * 0.5 * (1.0 + np.cos(np.pi * step / self.steps))
        return self.learning_rate

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        cfg = TrainConfig(**d)
        cfg.validate()
        return cfg


@dataclass
class TrainReport:
    objective: str
    seed: int
    steps: int
    losses: list = field(default_factory=list)
    wall_time_s: float = 0.0
    final_checksum: str = ""

    def artifact_dict(self) -> dict:
        """JSON content written to disk; excludes wall time so artifacts are
        bit-identical across reruns of the same seed."""
        return {
            "objective": self.objective,
            "seed": self.seed,
            "steps": self.steps,
            "final_checksum": self.final_checksum,
            "losses": self.losses,
        }


@dataclass
class TrainingSet:
    """Flattened chunk targets plus their stacked conditions."""

    x: np.ndarray          # [N, input_dim]
    conds: CondBatch
    horizon_steps: int
    action_dim: int

    def __post_init__(self):
        if self.x.ndim != 2 or self.x.shape[0] == 0:
            raise ValueError("dataset must be a non-empty [N, input_dim] array")
        if self.conds.size != self.x.shape[0]:
            raise ValueError("conditions and samples must align")

    @property
    def input_dim(self) -> int:
        return self.x.shape[1]


def make_training_set(chunks: np.ndarray, conds, config: NetworkConfig) -> TrainingSet:
    """chunks [N, T_h, D] (or [N, input_dim]) + condition list -> TrainingSet."""
    chunks = np.asarray(chunks, dtype=np.float64)
    if chunks.ndim == 3:
        n, th, d = chunks.shape
        x = chunks.reshape(n, th * d)
    else:
        x = chunks
        th, d = chunks.shape[1], 1
    return TrainingSet(x=x, conds=stack_conditions(conds, config),
                       horizon_steps=th, action_dim=d)


def _null_rows(cond: CondBatch, mask: np.ndarray) -> CondBatch:
    """Apply condition dropout: rows with mask True become null rows."""
    null_mask = cond.null_mask.copy()
    null_mask[mask, 0] = True
    return CondBatch(goal=cond.goal, task_id=cond.task_id,
                     horizon=cond.horizon, null_mask=null_mask)


def draw_batch(x: np.ndarray, conds: CondBatch, rng: np.random.Generator,
               p_drop: float, rho_equal: float, batch_size: int | None = None):
    """Common randomness for both objectives: rows, (r, t), noise, dropout.

    The draw order is fixed so the two objectives see identical batches for
    identical seeds. Without batch_size the given pairs are used as-is (no
    resampling).
    """
    if batch_size is None:
        xb = x
        idx = None
    else:
        idx = rng.integers(0, x.shape[0], size=batch_size)
        xb = x[idx]
    b = xb.shape[0]
    r, t = flows.sample_times(rng, rho_equal, size=b)
    eps = flows.sample_noise(rng, (b, x.shape[1]))
    dropped = flows.drop_mask(rng, b, p_drop)
    if idx is not None:
        conds = CondBatch(goal=conds.goal[idx], task_id=conds.task_id[idx],
                          horizon=conds.horizon[idx], null_mask=conds.null_mask[idx])
    return xb, _null_rows(conds, dropped), r, t, eps


def meanflow_target(model: VelocityModel, x: np.ndarray, eps: np.ndarray,
                    r: np.ndarray, t: np.ndarray, cond) -> np.ndarray:
    """Bootstrapped regression target T = v - (t - r) * du.

    du is the directional derivative of the network along (tangent_z = v,
    tangent_t = 1) with r fixed, computed in one forward-mode pass. The
    result is a plain array: it is constant with respect to the parameters,
    which is exactly the stop-gradient contract. At r = t the target reduces
    to v bitwise.
    """
    r_col = r[:, None] if np.ndim(r) == 1 else r
    t_col = t[:, None] if np.ndim(t) == 1 else t
    z_t = flows.interpolate(x, eps, t_col)
    v = flows.conditional_velocity(x, eps)
    _, du = net_forward_jvp(model, z_t, r_col, t_col, cond, tangent_z=v, tangent_t=1.0)
    target = v - (t_col - r_col) * du
    if not np.all(np.isfinite(target)):
        bad = int(np.argwhere(~np.isfinite(target))[0, 0])
        raise NumericalAbort(-1, f"non-finite target in batch row {bad}")
    return target


def loss_meanflow(model: VelocityModel, x: np.ndarray, conds, rng: np.random.Generator,
                  p_drop: float = 0.1, rho_equal: float = 0.5,
                  batch: tuple | None = None) -> ef.Tensor:
    """Mean over the batch of || u(z_t, r, t, c') - sg(T) ||^2."""
    if batch is None:
        batch = draw_batch(x, stack_conditions(conds, model.config), rng,
                           p_drop, rho_equal)
    xb, cb, r, t, eps = batch
    target = meanflow_target(model, xb, eps, r, t, cb)
    z_t = flows.interpolate(xb, eps, t[:, None])
    pred = net_forward_graph(model, z_t, r, t, cb)
    diff = ef.sub(pred, target)
    return ef.mean(ef.sumsq(diff, axis=-1))


def loss_cfm(model: VelocityModel, x: np.ndarray, conds, rng: np.random.Generator,
             p_drop: float = 0.1, rho_equal: float = 0.5,
             batch: tuple | None = None) -> ef.Tensor:
    """Mean over the batch of || u(z_t, t, t, c') - v ||^2 (span collapsed)."""
    if batch is None:
        batch = draw_batch(x, stack_conditions(conds, model.config), rng,
                           p_drop, rho_equal)
    xb, cb, r, t, eps = batch
    v = flows.conditional_velocity(xb, eps)
    z_t = flows.interpolate(xb, eps, t[:, None])
    pred = net_forward_graph(model, z_t, t, t, cb)
    diff = ef.sub(pred, v)
    return ef.mean(ef.sumsq(diff, axis=-1))


class Adam:
    """Adam over a ParameterStore, iteration order fixed by the store.

    Optional global-norm gradient clipping: the bootstrapped objective emits
    rare huge-gradient batches near decision boundaries, and without a clip
    those spikes dominate the run (seed-to-seed quality swings, occasional
    divergence).
    """

    def __init__(self, store: ef.ParameterStore, lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 clip_norm: float | None = None):
        self.store = store
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip_norm = clip_norm
        self.step_count = 0
        self._m = {k: np.zeros_like(t.data) for k, t in store.items()}
        self._v = {k: np.zeros_like(t.data) for k, t in store.items()}

    def _clip_scale(self) -> float:
        if self.clip_norm is None:
            return 1.0
        sq = 0.0
        for k in self.store.names():
            g = self.store.grad(k)
            sq += float(np.dot(g.reshape(-1), g.reshape(-1)))
        norm = np.sqrt(sq)
        if norm <= self.clip_norm or norm == 0.0:
            return 1.0
        return self.clip_norm / norm

    def step(self) -> None:
        self.step_count += 1
        scale = self._clip_scale()
        b1c = 1.0 - self.beta1 ** self.step_count
        b2c = 1.0 - self.beta2 ** self.step_count
        for k, t in self.store.items():
            g = self.store.grad(k) * scale
            m = self._m[k]
            v = self._v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            t.data = t.data - self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


class EMA:
    """Bias-corrected exponential moving average of parameter values."""

    def __init__(self, store: ef.ParameterStore, decay: float):
        self.decay = decay
        self.step_count = 0
        self._avg = {k: np.zeros_like(t.data) for k, t in store.items()}

    def update(self, store: ef.ParameterStore) -> None:
        self.step_count += 1
        for k, t in store.items():
            a = self._avg[k]
            a *= self.decay
            a += (1.0 - self.decay) * t.data

    def state(self, store: ef.ParameterStore) -> dict[str, np.ndarray]:
        if self.step_count == 0:
            return store.state()
        corr = 1.0 - self.decay ** self.step_count
        return {k: a / corr for k, a in self._avg.items()}


def train(config: TrainConfig, dataset: TrainingSet, net_config: NetworkConfig,
          log_every: int = 0) -> tuple[VelocityModel, TrainReport]:
    """Run the chosen objective for config.steps Adam steps.

    Deterministic for a fixed seed. The returned model carries EMA weights
    used for evaluation. A non-finite loss aborts with the last finite
    parameter snapshot attached to the raised NumericalAbort.
    """
    config.validate()
    if dataset.input_dim != net_config.input_dim:
        raise ValueError(f"dataset dim {dataset.input_dim} != network input_dim "
                         f"{net_config.input_dim}")
    rng = np.random.default_rng(config.seed)
    model = init_velocity_model(net_config, seed=config.seed)
    opt = Adam(model.params, lr=config.learning_rate, clip_norm=config.clip_norm)
    ema = EMA(model.params, decay=config.ema_decay)
    report = TrainReport(objective=config.objective, seed=config.seed, steps=config.steps)

    loss_fn = loss_meanflow if config.objective == "meanflow" else loss_cfm
    start = time.perf_counter()
    last_good: dict | None = None
    for step in range(config.steps):
        opt.lr = config.lr_at(step)
        batch = draw_batch(dataset.x, dataset.conds, rng, config.p_drop,
                           config.rho_equal, batch_size=config.batch_size)
        try:
            loss = loss_fn(model, dataset.x, dataset.conds, rng,
                           p_drop=config.p_drop, rho_equal=config.rho_equal,
                           batch=batch)
        except NumericalAbort as abort:
            report.wall_time_s = time.perf_counter() - start
            raise NumericalAbort(step, str(abort), last_good=last_good,
                                 report=report) from None
        loss_val = float(loss.data)
        if not np.isfinite(loss_val):
            report.wall_time_s = time.perf_counter() - start
            raise NumericalAbort(step, f"loss={loss_val}", last_good=last_good,
                                 report=report)
        report.losses.append(loss_val)
        model.params.zero_grad()
        ef.backward(loss)
        opt.step()
        ema.update(model.params)
        last_good = model.params.state()
        if log_every and (step + 1) % log_every == 0:
            print(f"step {step + 1}/{config.steps} loss {loss_val:.6f}")

    model.ema = ema.state(model.params)
    report.wall_time_s = time.perf_counter() - start
    report.final_checksum = model.params.checksum()
    return model, report
