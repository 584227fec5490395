"""Versioned little-endian binary checkpoints.

Layout::

    b"MPVCKPT"                      7-byte magic
    u32 format_version
    u32 record_count
    record_count x record:
        u32 name_length, name (UTF-8)
        u8  dtype code
        u32 ndim, ndim x u32 extents
        raw little-endian data, row-major

Record names are namespaced: ``param/<name>``, ``bn/<name>/running_mean``,
``bn/<name>/running_var``, ``adam/m/<name>``, ``adam/v/<name>`` and
``meta/*``; JSON metadata (configs, generator state) is stored as a
``uint8`` byte vector.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .model import MPVCNN, MPVCNNConfig
from .train import Adam, TrainConfig

MAGIC = b"MPVCKPT"
FORMAT_VERSION = 1

_DTYPES = {0: "<f4", 1: "<f8", 2: "<i8", 3: "|u1"}
_CODES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


@dataclass(eq=False)
class Checkpoint:
    config: MPVCNNConfig
    parameters: dict[str, np.ndarray]
    running_stats: dict[str, tuple[np.ndarray, np.ndarray]]
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    adam_t: int = 0
    epoch: int = 0
    rng_state: dict | None = None
    train_config: TrainConfig | None = None
    format_version: int = FORMAT_VERSION


def checkpoint_from(model: MPVCNN, optimizer: Adam | None = None, epoch: int = 0,
                    rng: np.random.Generator | None = None,
                    train_config: TrainConfig | None = None) -> Checkpoint:
    return Checkpoint(
        config=model.config,
        parameters={n: p.value.copy() for n, p in model.named_parameters()},
        running_stats={
            n: (bn.running_mean.copy(), bn.running_var.copy()) for n, bn in model.named_batchnorms()
        },
        adam_m={k: v.copy() for k, v in optimizer.m.items()} if optimizer else {},
        adam_v={k: v.copy() for k, v in optimizer.v.items()} if optimizer else {},
        adam_t=optimizer.t if optimizer else 0,
        epoch=epoch,
        rng_state=rng.bit_generator.state if rng is not None else None,
        train_config=train_config,
    )


def restore_model(ckpt: Checkpoint) -> MPVCNN:
    dtype = next(iter(ckpt.parameters.values())).dtype
    model = MPVCNN(ckpt.config, dtype)
    params = dict(model.named_parameters())
    if set(params) != set(ckpt.parameters):
        missing = sorted(set(params) ^ set(ckpt.parameters))
        raise CheckpointError(f"checkpoint parameters do not match the model: {missing[:5]}")
    for name, p in params.items():
        value = ckpt.parameters[name]
        if value.shape != p.value.shape:
            raise CheckpointError(f"{name}: shape {value.shape} != {p.value.shape}")
        p.name = name
        p.value = value.copy()
        p.zero_grad()
    for name, bn in model.named_batchnorms():
        bn.running_mean, bn.running_var = (a.copy() for a in ckpt.running_stats[name])
    return model.eval()


def restore_optimizer(ckpt: Checkpoint, model: MPVCNN) -> Adam:
    lr = ckpt.train_config.learning_rate if ckpt.train_config else 1e-3
    opt = Adam(model.named_parameters(), lr=lr)
    opt.t = ckpt.adam_t
    for k in opt.m:
        if k in ckpt.adam_m:
            opt.m[k] = ckpt.adam_m[k].copy()
            opt.v[k] = ckpt.adam_v[k].copy()
    return opt


def _json_record(obj) -> np.ndarray:
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode("utf-8"), dtype=np.uint8)


def _records(ckpt: Checkpoint):
    yield "meta/config", _json_record(ckpt.config.to_dict())
    yield "meta/epoch", np.array([ckpt.epoch], dtype=np.int64)
    yield "meta/adam_t", np.array([ckpt.adam_t], dtype=np.int64)
    if ckpt.rng_state is not None:
        yield "meta/rng", _json_record(ckpt.rng_state)
    if ckpt.train_config is not None:
        yield "meta/train_config", _json_record(asdict(ckpt.train_config))
    for n, v in ckpt.parameters.items():
        yield f"param/{n}", v
    for n, (mean, var) in ckpt.running_stats.items():
        yield f"bn/{n}/running_mean", mean
        yield f"bn/{n}/running_var", var
    for n, v in ckpt.adam_m.items():
        yield f"adam/m/{n}", v
    for n, v in ckpt.adam_v.items():
        yield f"adam/v/{n}", v


def save_checkpoint(ckpt: Checkpoint, path):
    records = list(_records(ckpt))
    chunks = [MAGIC, struct.pack("<II", ckpt.format_version, len(records))]
    for name, arr in records:
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype
        if dt.str not in _CODES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<BI", _CODES[dt.str], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes())
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: not an MPVCKPT file")
    version, count = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    records = {}
    for _ in range(count):
        (n,) = r.unpack("<I")
        name = r.take(n).decode("utf-8")
        code, ndim = r.unpack("<BI")
        if code not in _DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}I")
        dt = np.dtype(_DTYPES[code])
        size = int(np.prod(shape)) * dt.itemsize
        records[name] = np.frombuffer(r.take(size), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))

    def meta_json(key):
        return json.loads(records[key].tobytes().decode("utf-8")) if key in records else None

    params, stats, m, v = {}, {}, {}, {}
    for name, arr in records.items():
        kind, _, rest = name.partition("/")
        if kind == "param":
            params[rest] = arr
        elif kind == "bn":
            bn_name, stat = rest.rsplit("/", 1)
            stats.setdefault(bn_name, [None, None])[stat == "running_var"] = arr
        elif kind == "adam":
            which, _, pname = rest.partition("/")
            (m if which == "m" else v)[pname] = arr
    tcfg = meta_json("meta/train_config")
    return Checkpoint(
        config=MPVCNNConfig.from_dict(meta_json("meta/config")),
        parameters=params,
        running_stats={k: tuple(s) for k, s in stats.items()},
        adam_m=m,
        adam_v=v,
        adam_t=int(records["meta/adam_t"][0]),
        epoch=int(records["meta/epoch"][0]),
        rng_state=meta_json("meta/rng"),
        train_config=TrainConfig(**tcfg) if tcfg else None,
        format_version=version,
    )
