"""Binary checkpoints and strict run configuration.

Checkpoint layout (little-endian):

    magic   4 bytes  b"EFCK"
    version u32
    config  u32 length + UTF-8 JSON (canonical: sorted keys, fixed separators)
    count   u32 number of named tensors
    tensor  u32 name length, name bytes, u32 rank, u64 dims..., f64 data (C order)

Tensors hold the live parameters, the EMA parameters, and the frozen Fourier
frequencies, so a loaded model reproduces the saved one bit for bit:
load(save(m)) -> save yields identical bytes.

Run configuration is a strict JSON document; any unknown key anywhere is an
error that names the offending path.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import engine as ef
from . import timeenc
from .network import NetworkConfig, VelocityModel
from .training import TrainConfig

MAGIC = b"EFCK"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    """Corrupt or truncated checkpoint."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint magic/version does not match this library."""


class ConfigError(ValueError):
    """Invalid run configuration; message names the bad field."""


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _write_tensor(out: bytearray, name: str, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.float64)
    nb = name.encode("utf-8")
    out += struct.pack("<I", len(nb))
    out += nb
    out += struct.pack("<I", arr.ndim)
    for dim in arr.shape:
        out += struct.pack("<Q", dim)
    out += arr.astype("<f8", copy=False).tobytes(order="C")


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def checkpoint_bytes(model: VelocityModel, extra_config: dict | None = None) -> bytes:
    config = {"network": model.config.to_dict()}
    if extra_config:
        config.update(extra_config)
    blob = _canonical_json(config)

    tensors: list[tuple[str, np.ndarray]] = []
    tensors.append(("fourier.t.freqs", model.bank_t.frequencies))
    tensors.append(("fourier.dt.freqs", model.bank_dt.frequencies))
    for name, t in model.params.items():
        tensors.append((f"param.{name}", t.data))
    if model.ema is not None:
        for name, arr in model.ema.items():
            tensors.append((f"ema.{name}", arr))

    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", FORMAT_VERSION)
    out += struct.pack("<I", len(blob))
    out += blob
    out += struct.pack("<I", len(tensors))
    for name, arr in tensors:
        _write_tensor(out, name, arr)
    return bytes(out)


def save_checkpoint(path, model: VelocityModel, extra_config: dict | None = None) -> None:
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(model, extra_config))


def load_checkpoint(path) -> tuple[VelocityModel, dict]:
    """Rebuild (model, config_dict); EMA weights restored when present."""
    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointVersionError("bad magic: not a checkpoint file")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {version}, this library reads {FORMAT_VERSION}")
    config = json.loads(r.take(r.u32()).decode("utf-8"))
    n_tensors = r.u32()
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = tuple(r.u64() for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).copy()
        tensors[name] = arr
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after last tensor")

    net_cfg = NetworkConfig.from_dict(config["network"])
    store = ef.ParameterStore()
    ema: dict[str, np.ndarray] = {}
    for name, arr in tensors.items():
        if name.startswith("param."):
            store.add(name[len("param."):], arr)
        elif name.startswith("ema."):
            ema[name[len("ema."):]] = arr
    try:
        bank_t = timeenc.FourierBank(tensors["fourier.t.freqs"], net_cfg.ff_scale)
        bank_dt = timeenc.FourierBank(tensors["fourier.dt.freqs"], net_cfg.ff_scale)
    except KeyError as e:
        raise CheckpointError(f"missing tensor {e.args[0]!r}") from None
    model = VelocityModel(config=net_cfg, params=store, bank_t=bank_t, bank_dt=bank_dt,
                          ema=ema or None)
    return model, config


# ---------------------------------------------------------------------------
# run configuration


DATASET_FIELDS = {
    "kind": str,
    "n": int,
    "n_per_horizon": int,
    "horizon_steps": int,
}

GUIDANCE_FIELDS = {"w": float, "use_cfg": bool}

SECTIONS = ("dataset", "network", "train", "guidance")


@dataclass
class RunConfig:
    dataset: dict
    network: dict
    train: TrainConfig
    guidance: dict

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "network": self.network,
            "train": self.train.to_dict(),
            "guidance": self.guidance,
        }


def _check_keys(section: str, given: dict, allowed) -> None:
    for key in given:
        if key not in allowed:
            raise ConfigError(f"unknown field {section}.{key!r} "
                              f"(allowed: {sorted(allowed)})")


def parse_run_config(doc: dict) -> RunConfig:
    """Validate a run-config document; every unknown key is fatal."""
    if not isinstance(doc, dict):
        raise ConfigError("run config must be a JSON object")
    _check_keys("<root>", doc, SECTIONS)
    if "dataset" not in doc:
        raise ConfigError("missing required section 'dataset'")

    dataset = dict(doc["dataset"])
    _check_keys("dataset", dataset, DATASET_FIELDS)
    if "kind" not in dataset:
        raise ConfigError("missing required field dataset.kind")
    from .tasks import DATASET_KINDS
    if dataset["kind"] not in DATASET_KINDS + ("chunks",):
        raise ConfigError(f"dataset.kind must be one of "
                          f"{DATASET_KINDS + ('chunks',)}, got {dataset['kind']!r}")

    network = dict(doc.get("network", {}))
    allowed_net = set(NetworkConfig(input_dim=1).to_dict()) - {"input_dim"}
    _check_keys("network", network, allowed_net)

    train_doc = dict(doc.get("train", {}))
    _check_keys("train", train_doc, set(TrainConfig().to_dict()))
    try:
        train = TrainConfig.from_dict({**TrainConfig().to_dict(), **train_doc})
    except ValueError as e:
        raise ConfigError(f"train: {e}") from None

    guidance = dict(doc.get("guidance", {}))
    _check_keys("guidance", guidance, GUIDANCE_FIELDS)

    return RunConfig(dataset=dataset, network=network, train=train, guidance=guidance)


def load_run_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from None
    return parse_run_config(doc)
