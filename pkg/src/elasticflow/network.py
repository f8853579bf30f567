"""Conditioned average-velocity model.

A stack of residual MLP blocks over the flattened action chunk, modulated by
the time embedding through per-block scale/shift/gate heads (AdaLN style),
with a generic condition embedding (task table + goal projection + horizon
scalar) added to the modulation input. The final projection starts at zero so
the untrained model predicts the zero velocity field, and the gates start at
zero so every block is the identity at init.

The same forward code runs in three modes (see `engine`): raw numpy for
inference, reverse mode for training, and dual numbers for the directional
derivative needed by the average-velocity training target.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import engine as ef
from . import timeenc


class ConditionError(ValueError):
    """Malformed Condition or condition/config mismatch."""


@dataclass(frozen=True)
class NetworkConfig:
    input_dim: int
    hidden_dim: int = 128
    n_blocks: int = 2
    d_emb: int = 128
    cond_dim: int = 2
    n_tasks: int = 4
    ff_m: int = timeenc.DEFAULT_M
    ff_scale: float = timeenc.DEFAULT_SCALE
    mlp_ratio: int = 2

    def validate(self) -> None:
        for name, v in asdict(self).items():
            if name == "ff_scale":
                if v <= 0:
                    raise ValueError("ff_scale must be positive")
            elif int(v) <= 0:
                raise ValueError(f"NetworkConfig.{name} must be positive, got {v}")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "NetworkConfig":
        cfg = NetworkConfig(**d)
        cfg.validate()
        return cfg


@dataclass
class Condition:
    """Generic conditioning: goal vector, task index, physical horizon.

    `is_null` marks the unconditional branch used for guidance; a null
    condition ignores the other fields and resolves to a learned embedding.
    """

    goal: np.ndarray
    task_id: int
    horizon_seconds: float
    is_null: bool = False

    def __post_init__(self):
        self.goal = np.asarray(self.goal, dtype=np.float64).reshape(-1)
        if not self.is_null:
            if self.task_id < 0:
                raise ConditionError(f"task_id must be >= 0, got {self.task_id}")
            if self.horizon_seconds <= 0:
                raise ConditionError("horizon_seconds must be positive")

    @staticmethod
    def null(cond_dim: int = 2) -> "Condition":
        return Condition(goal=np.zeros(cond_dim), task_id=0, horizon_seconds=1.0, is_null=True)


@dataclass
class CondBatch:
    """Stacked condition arrays for a batch; null rows resolve to the learned null row."""

    goal: np.ndarray        # [B, cond_dim]
    task_id: np.ndarray     # [B] int64
    horizon: np.ndarray     # [B, 1]
    null_mask: np.ndarray   # [B, 1] bool

    @property
    def size(self) -> int:
        return self.goal.shape[0]


def stack_conditions(conds, config: NetworkConfig) -> CondBatch:
    if isinstance(conds, Condition):
        conds = [conds]
    if isinstance(conds, CondBatch):
        return conds
    goals = np.zeros((len(conds), config.cond_dim))
    tasks = np.zeros(len(conds), dtype=np.int64)
    horizons = np.ones((len(conds), 1))
    nulls = np.zeros((len(conds), 1), dtype=bool)
    for i, c in enumerate(conds):
        if c.is_null:
            nulls[i, 0] = True
            continue
        if c.goal.shape[0] != config.cond_dim:
            raise ConditionError(
                f"goal dim {c.goal.shape[0]} does not match cond_dim {config.cond_dim}")
        if c.task_id >= config.n_tasks:
            raise ConditionError(f"task_id {c.task_id} out of range (n_tasks={config.n_tasks})")
        goals[i] = c.goal
        tasks[i] = c.task_id
        horizons[i, 0] = c.horizon_seconds
    return CondBatch(goal=goals, task_id=tasks, horizon=horizons, null_mask=nulls)


@dataclass
class VelocityModel:
    """Parameters plus the frozen Fourier banks; EMA weights ride along after training."""

    config: NetworkConfig
    params: ef.ParameterStore
    bank_t: timeenc.FourierBank
    bank_dt: timeenc.FourierBank
    ema: dict[str, np.ndarray] | None = field(default=None)

    def eval_state(self) -> dict[str, np.ndarray]:
        """Weights used for evaluation: EMA when available, else the live params."""
        if self.ema is not None:
            return self.ema
        return {k: v.data for k, v in self.params.items()}


def init_velocity_model(config: NetworkConfig, seed: int = 0) -> VelocityModel:
    config.validate()
    rng = np.random.default_rng(seed)
    store = ef.ParameterStore()

    timeenc.init_time_mlp(store, config.ff_m, config.ff_m, config.d_emb, rng)

    store.add("cond.task_table", rng.normal(0.0, 0.02, size=(config.n_tasks, config.d_emb)))
    store.add("cond.goal.w", rng.normal(0.0, config.cond_dim ** -0.5,
                                        size=(config.cond_dim, config.d_emb)))
    store.add("cond.horizon.w", rng.normal(0.0, 1.0, size=(1, config.d_emb)))
    store.add("cond.null", rng.normal(0.0, 0.02, size=(1, config.d_emb)))

    h, e = config.hidden_dim, config.d_emb
    store.add("in_proj.w", rng.normal(0.0, config.input_dim ** -0.5, size=(config.input_dim, h)))
    store.add("in_proj.b", np.zeros(h))
    for i in range(config.n_blocks):
        p = f"block{i}."
        # modulation heads start as scale=1, shift=0, gate=0: identity blocks
        store.add(p + "mod_scale.w", np.zeros((e, h)))
        store.add(p + "mod_scale.b", np.ones(h))
        store.add(p + "mod_shift.w", np.zeros((e, h)))
        store.add(p + "mod_shift.b", np.zeros(h))
        store.add(p + "mod_gate.w", np.zeros((e, h)))
        store.add(p + "mod_gate.b", np.zeros(h))
        inner = h * config.mlp_ratio
        store.add(p + "fc1.w", rng.normal(0.0, h ** -0.5, size=(h, inner)))
        store.add(p + "fc1.b", np.zeros(inner))
        store.add(p + "fc2.w", rng.normal(0.0, inner ** -0.5, size=(inner, h)))
        store.add(p + "fc2.b", np.zeros(h))
    store.add("out_proj.w", np.zeros((h, config.input_dim)))
    store.add("out_proj.b", np.zeros(config.input_dim))

    bank_t = timeenc.make_fourier_bank(config.ff_m, config.ff_scale, rng=rng)
    bank_dt = timeenc.make_fourier_bank(config.ff_m, config.ff_scale, rng=rng)
    return VelocityModel(config=config, params=store, bank_t=bank_t, bank_dt=bank_dt)


class _View:
    """Indexable parameter view handing out graph Tensors or raw arrays."""

    def __init__(self, store: ef.ParameterStore, raw: bool, state: dict | None = None):
        self._store = store
        self._raw = raw
        self._state = state

    def __getitem__(self, name: str):
        if self._state is not None:
            return self._state[name]
        t = self._store[name]
        return t.data if self._raw else t


def _cond_embedding(view, cond: CondBatch):
    task_emb = ef.embedding(view["cond.task_table"], cond.task_id)
    goal_emb = ef.matmul(cond.goal, view["cond.goal.w"])
    horizon_emb = ef.matmul(cond.horizon, view["cond.horizon.w"])
    active = ef.add(ef.add(task_emb, goal_emb), horizon_emb)
    null_row = view["cond.null"]
    return ef.where(cond.null_mask, null_row, active)


def _forward_impl(view, config: NetworkConfig, bank_t, bank_dt, z, r, t, cond: CondBatch):
    emb = timeenc.embed_time(r, t, bank_t, bank_dt, view)
    mod_in = ef.silu(ef.add(emb, _cond_embedding(view, cond)))
    h = ef.affine(z, view["in_proj.w"], view["in_proj.b"])
    for i in range(config.n_blocks):
        p = f"block{i}."
        scale = ef.affine(mod_in, view[p + "mod_scale.w"], view[p + "mod_scale.b"])
        shift = ef.affine(mod_in, view[p + "mod_shift.w"], view[p + "mod_shift.b"])
        gate = ef.affine(mod_in, view[p + "mod_gate.w"], view[p + "mod_gate.b"])
        inner = ef.add(ef.mul(scale, ef.layer_norm(h)), shift)
        f = ef.affine(ef.silu(ef.affine(inner, view[p + "fc1.w"], view[p + "fc1.b"])),
                      view[p + "fc2.w"], view[p + "fc2.b"])
        h = ef.add(h, ef.mul(gate, f))
    return ef.affine(h, view["out_proj.w"], view["out_proj.b"])


def _prep_z(z, config: NetworkConfig):
    """Normalize z to [B, input_dim]; returns (array-or-node, was_single)."""
    if isinstance(z, (ef.Tensor, ef.DualTensor)):
        if z.shape[-1] != config.input_dim or len(z.shape) != 2:
            raise ef.ShapeError("net_forward", (z.shape,),
                                f"expect [B, {config.input_dim}]")
        return z, False
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    if single:
        z = z[None, :]
    if z.ndim != 2 or z.shape[1] != config.input_dim:
        raise ef.ShapeError("net_forward", (z.shape,), f"expect [B, {config.input_dim}]")
    return z, single


def _prep_time(s, batch: int):
    if isinstance(s, (ef.Tensor, ef.DualTensor)):
        return s
    arr = np.asarray(s, dtype=np.float64)
    if arr.ndim == 0:
        arr = np.full((batch, 1), float(arr))
    elif arr.ndim == 1:
        arr = arr[:, None]
    return arr


def net_forward(model: VelocityModel, z, r, t, cond, *, use_ema: bool = False) -> np.ndarray:
    """Average-velocity prediction u(z, r, t, cond) in raw numpy mode.

    Accepts a single state [input_dim] or a batch [B, input_dim]; r and t may
    be scalars or per-row arrays. Pure function of (weights, inputs).
    """
    z, single = _prep_z(z, model.config)
    batch = z.shape[0]
    cond = stack_conditions(cond, model.config)
    if cond.size == 1 and batch > 1:
        cond = CondBatch(goal=np.repeat(cond.goal, batch, 0),
                         task_id=np.repeat(cond.task_id, batch, 0),
                         horizon=np.repeat(cond.horizon, batch, 0),
                         null_mask=np.repeat(cond.null_mask, batch, 0))
    view = _View(model.params, raw=True, state=model.eval_state() if use_ema else None)
    out = _forward_impl(view, model.config, model.bank_t, model.bank_dt, z,
                        _prep_time(r, batch), _prep_time(t, batch), cond)
    return out[0] if single else out


def net_forward_graph(model: VelocityModel, z, r, t, cond):
    """Reverse-mode forward for training; returns a graph Tensor [B, input_dim]."""
    z, _ = _prep_z(np.asarray(z), model.config)
    cond = stack_conditions(cond, model.config)
    view = _View(model.params, raw=False)
    return _forward_impl(view, model.config, model.bank_t, model.bank_dt, z,
                         _prep_time(r, z.shape[0]), _prep_time(t, z.shape[0]), cond)


def net_forward_jvp(model: VelocityModel, z, r, t, cond, tangent_z, tangent_t,
                    *, use_ema: bool = False):
    """One dual-number pass: value u and du = (d u/d z) @ tangent_z + (d u/d t) * tangent_t.

    r is held constant (zero tangent): the time derivative is the total
    derivative along the flow at fixed lower limit, so the span t - r moves
    with t.
    """
    z, single = _prep_z(np.asarray(z), model.config)
    tz = np.asarray(tangent_z, dtype=np.float64)
    if tz.ndim == 1:
        tz = tz[None, :]
    if tz.shape != z.shape:
        raise ef.ShapeError("net_forward_jvp", (tz.shape, z.shape), "tangent_z must match z")
    batch = z.shape[0]
    cond = stack_conditions(cond, model.config)
    t_arr = _prep_time(t, batch)
    tt = np.asarray(tangent_t, dtype=np.float64)
    if tt.ndim == 0:
        tt = np.full((batch, 1), float(tt))
    elif tt.ndim == 1:
        tt = tt[:, None]
    dz = ef.DualTensor(z, tz)
    dt_ = ef.DualTensor(t_arr, tt)
    view = _View(model.params, raw=True, state=model.eval_state() if use_ema else None)
    out = _forward_impl(view, model.config, model.bank_t, model.bank_dt, dz,
                        _prep_time(r, batch), dt_, cond)
    if single:
        return out.primal[0], out.tangent[0]
    return out.primal, out.tangent
