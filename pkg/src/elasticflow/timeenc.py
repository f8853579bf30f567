"""Dual-parameter time encoding.

The velocity model is conditioned on two clocks: the absolute flow time t and
the span dt = t - r it is asked to average over. Each is lifted to a Gaussian
Fourier feature vector [sin(2*pi*f_i*s), cos(2*pi*f_i*s)] and the two halves
are fused by a small MLP into the modulation embedding. Encoding the span
explicitly is what lets one set of weights serve both short reactive horizons
and long smooth ones.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as ef

TWO_PI = 2.0 * np.pi

DEFAULT_M = 32
DEFAULT_SCALE = 16.0


class TimePreconditionError(ValueError):
    """Raised when (r, t) violates 0 <= r <= t."""


@dataclass
class FourierBank:
    """Frozen random frequencies for Fourier feature encoding.

    Frequencies are drawn once from N(0, scale^2), never trained, and are
    serialized with checkpoints so encodings are reproducible across
    processes.
    """

    frequencies: np.ndarray
    scale: float

    def __post_init__(self):
        self.frequencies = np.asarray(self.frequencies, dtype=np.float64).reshape(-1)
        if self.scale <= 0:
            raise ValueError("FourierBank scale must be positive")

    @property
    def m(self) -> int:
        return self.frequencies.shape[0]


def make_fourier_bank(m: int = DEFAULT_M, scale: float = DEFAULT_SCALE,
                      rng: np.random.Generator | None = None, seed: int | None = None) -> FourierBank:
    if rng is None:
        rng = np.random.default_rng(seed)
    return FourierBank(frequencies=rng.normal(0.0, scale, size=m), scale=float(scale))


def ff_encode(s, bank: FourierBank):
    """Encode a scalar (or [B, 1] column) as [sin(2 pi f s)..., cos(2 pi f s)...].

    Values outside [0, 1] are allowed; the encoding simply extrapolates.
    Works in raw, reverse, and forward (dual) mode: `s` may be a float,
    ndarray, Tensor, or DualTensor. The squared norm of the output is exactly
    m for any s.
    """
    if isinstance(s, (int, float)):
        s = np.array([[float(s)]])
    freqs = bank.frequencies.reshape(1, -1)
    phase = ef.mul(s, TWO_PI * freqs)
    return ef.concat([ef.sin(phase), ef.cos(phase)], axis=-1)


def time_mlp_param_shapes(m_t: int, m_dt: int, d_emb: int) -> dict[str, tuple]:
    """Parameter layout of the fusion MLP: concat(FF(t), FF(dt)) -> d_emb."""
    d_in = 2 * m_t + 2 * m_dt
    hidden = 4 * d_emb
    return {
        "time_mlp.w1": (d_in, hidden),
        "time_mlp.b1": (hidden,),
        "time_mlp.w2": (hidden, d_emb),
        "time_mlp.b2": (d_emb,),
    }


def init_time_mlp(store: ef.ParameterStore, m_t: int, m_dt: int, d_emb: int,
                  rng: np.random.Generator) -> None:
    for name, shape in time_mlp_param_shapes(m_t, m_dt, d_emb).items():
        if name.endswith(("b1", "b2")):
            store.add(name, np.zeros(shape))
        else:
            fan_in = shape[0]
            store.add(name, rng.normal(0.0, fan_in ** -0.5, size=shape))


def _check_rt(r, t) -> None:
    rp = ef._raw(r)
    tp = ef._raw(t)
    if np.any(rp > tp + 1e-12):
        raise TimePreconditionError(f"require r <= t, got r={rp!r}, t={tp!r}")
    if np.any(rp < -1e-12) or np.any(tp > 1.0 + 1e-12):
        raise TimePreconditionError(f"require 0 <= r <= t <= 1, got r={rp!r}, t={tp!r}")


def embed_time(r, t, bank_t: FourierBank, bank_dt: FourierBank, params) -> object:
    """Fuse FF(t) and FF(t - r) through the 2-layer MLP into the embedding.

    `r` and `t` are scalars or [B, 1] columns with 0 <= r <= t <= 1; `params`
    is anything indexable by the time_mlp.* names (ParameterStore view or a
    plain dict of arrays). Inputs with equal t and equal t - r produce
    bit-identical embeddings.
    """
    if isinstance(r, (int, float)):
        r = np.array([[float(r)]])
    if isinstance(t, (int, float)):
        t = np.array([[float(t)]])
    _check_rt(r, t)
    dt = ef.sub(t, r)
    feats = ef.concat([ff_encode(t, bank_t), ff_encode(dt, bank_dt)], axis=-1)
    h = ef.silu(ef.affine(feats, params["time_mlp.w1"], params["time_mlp.b1"]))
    return ef.affine(h, params["time_mlp.w2"], params["time_mlp.b2"])
