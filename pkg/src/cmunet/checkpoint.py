"""Little-endian binary checkpoints.

Layout (all integers little-endian)::

    b"CMUN1"
    u32 config_len, config_len bytes of UTF-8 ``key = value`` text
    u64 epoch
    u32 tensor_count
    per tensor:
        u32 name_len, name bytes (UTF-8)
        u8  dtype tag (1 float32, 2 float64, 3 int64)
        u8  rank
        rank x u64 dims
        raw row-major values
    u32 CRC-32 (zlib polynomial) of every preceding byte
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from cmunet.config import RunConfig, format_config, parse_config
from cmunet.errors import CheckpointError
from cmunet.model import Model, build_model
from cmunet.optim import AdamState

MAGIC = b"CMUN1"
DTYPE_TAGS = {np.dtype("<f4"): 1, np.dtype("<f8"): 2, np.dtype("<i8"): 3}
TAG_DTYPES = {v: k for k, v in DTYPE_TAGS.items()}


@dataclass
class Checkpoint:
    config: RunConfig
    epoch: int
    tensors: dict[str, np.ndarray]


def encode(config: RunConfig, epoch: int, tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC]
    cfg = format_config(config).encode("utf-8")
    parts += [struct.pack("<I", len(cfg)), cfg, struct.pack("<Q", epoch), struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        le = arr.dtype.newbyteorder("<")
        if le not in DTYPE_TAGS:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        raw_name = name.encode("utf-8")
        parts += [struct.pack("<I", len(raw_name)), raw_name, struct.pack("<BB", DTYPE_TAGS[le], arr.ndim)]
        parts += [struct.pack("<Q", d) for d in arr.shape]
        parts.append(np.ascontiguousarray(arr, dtype=le).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(blob: bytes) -> Checkpoint:
    if len(blob) < len(MAGIC) + 4 or blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a cmunet checkpoint (bad magic)")
    body, (stored,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != stored:
        raise CheckpointError("checkpoint checksum mismatch; file is corrupt")
    pos = len(MAGIC)

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(body):
            raise CheckpointError("truncated checkpoint")
        vals = struct.unpack_from(fmt, body, pos)
        pos += size
        return vals

    def take_bytes(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(body):
            raise CheckpointError("truncated checkpoint")
        out = body[pos:pos + n]
        pos += n
        return out

    (cfg_len,) = take("<I")
    config = parse_config(take_bytes(cfg_len).decode("utf-8"))
    (epoch,) = take("<Q")
    (count,) = take("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = take("<I")
        name = take_bytes(name_len).decode("utf-8")
        tag, rank = take("<BB")
        if tag not in TAG_DTYPES:
            raise CheckpointError(f"unknown dtype tag {tag} for tensor {name!r}")
        shape = take("<" + "Q" * rank) if rank else ()
        dtype = TAG_DTYPES[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        tensors[name] = np.frombuffer(take_bytes(nbytes), dtype=dtype).reshape(shape).copy()
    if pos != len(body):
        raise CheckpointError("trailing bytes after tensor table")
    return Checkpoint(config=config, epoch=epoch, tensors=tensors)


def model_tensors(model: Model, adam: AdamState | None = None) -> dict[str, np.ndarray]:
    tensors = {name: t.data for name, t in model.named_tensors()}
    if adam is not None:
        tensors["adam.t"] = np.asarray(adam.t, dtype=np.int64)
        for name in model.params:
            tensors[f"adam.m.{name}"] = adam.m[name]
            tensors[f"adam.v.{name}"] = adam.v[name]
    return tensors


def save_checkpoint(path: str | Path, model: Model, config: RunConfig, epoch: int,
                    adam: AdamState | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(config, epoch, model_tensors(model, adam)))
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode(blob)


def load_into(model: Model, ckpt: Checkpoint) -> None:
    """Copy checkpoint tensors into ``model``. Everything is validated before
    the first assignment, so a mismatch leaves the model untouched."""
    expected = dict(model.named_tensors())
    for name, t in expected.items():
        if name not in ckpt.tensors:
            raise CheckpointError(f"checkpoint lacks tensor {name!r}")
        if ckpt.tensors[name].shape != t.shape:
            raise CheckpointError(
                f"shape mismatch for {name!r}: checkpoint {ckpt.tensors[name].shape}, model {t.shape}")
    extra = [n for n in ckpt.tensors if n not in expected and not n.startswith("adam.")]
    if extra:
        raise CheckpointError(f"checkpoint has tensors the model does not: {extra[:5]}")
    for name, t in expected.items():
        t.data = ckpt.tensors[name].astype(t.dtype, copy=True)


def restore_model(ckpt: Checkpoint) -> Model:
    cfg = ckpt.config
    model = build_model(cfg.model_config(), seed=cfg.seed, dtype=np.dtype(cfg.dtype))
    load_into(model, ckpt)
    return model


def restore_adam(ckpt: Checkpoint, model: Model) -> AdamState | None:
    if "adam.t" not in ckpt.tensors:
        return None
    cfg = ckpt.config
    state = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps, t=int(ckpt.tensors["adam.t"]))
    for name in model.params:
        state.m[name] = ckpt.tensors[f"adam.m.{name}"].copy()
        state.v[name] = ckpt.tensors[f"adam.v.{name}"].copy()
    return state
