"""Versioned binary checkpoints: model config, named tensors, optimizer state.

Layout (little-endian): magic "ICKP", u16 version, u32 header length, JSON
header, then raw tensor blocks in header-manifest order (all parameters,
then first/second moments interleaved per optimizer entry). Loading validates
names and shapes strictly. Files are hashed with sha256 for lineage tracking.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError
from .model import MetaModel, ModelConfig

MAGIC = b"ICKP"
FORMAT_VERSION = 1


@dataclass
class OptimState:
    """AdamW first/second moments plus the iteration counter."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def init_like(cls, params) -> "OptimState":
        m = {name: np.zeros_like(t.data) for name, t in params.items()}
        v = {name: np.zeros_like(t.data) for name, t in params.items()}
        return cls(m=m, v=v, t=0)


@dataclass
class Checkpoint:
    model_cfg: ModelConfig
    params: dict
    opt: OptimState | None
    iteration: int
    parent: str | None
    meta: dict


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _manifest(tensors: dict) -> list:
    return [[name, list(arr.shape), str(arr.dtype)] for name, arr in tensors.items()]


def save_checkpoint(
    path,
    model: MetaModel,
    opt: OptimState | None = None,
    iteration: int = 0,
    parent: str | None = None,
    meta: dict | None = None,
) -> str:
    """Write a checkpoint and return its sha256 hash."""
    params = {name: t.data for name, t in model.params.items()}
    header = {
        "model_cfg": model.cfg.to_dict(),
        "iteration": int(iteration),
        "parent": parent,
        "meta": meta or {},
        "params": _manifest(params),
        "opt": None if opt is None else {"t": int(opt.t), "entries": _manifest(opt.m)},
    }
    blob = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name in params:
            fh.write(np.ascontiguousarray(params[name]).tobytes())
        if opt is not None:
            for name in opt.m:
                fh.write(np.ascontiguousarray(opt.m[name]).tobytes())
                fh.write(np.ascontiguousarray(opt.v[name]).tobytes())
    return file_sha256(path)


def _read_block(blob: bytes, offset: int, shape, dtype) -> tuple:
    dt = np.dtype(dtype).newbyteorder("<")
    count = int(np.prod(shape, dtype=np.int64))
    nbytes = count * dt.itemsize
    if offset + nbytes > len(blob):
        raise FormatError(
            f"truncated tensor block at offset {offset}: "
            f"need {offset + nbytes} bytes, file has {len(blob)}"
        )
    arr = np.frombuffer(blob, dtype=dt, count=count, offset=offset)
    return arr.reshape(shape).copy(), offset + nbytes


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 10:
        raise FormatError(f"file too short ({len(blob)} bytes) to be a checkpoint")
    if blob[:4] != MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r} at offset 0, expected {MAGIC!r}")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<I", blob, 6)
    if 10 + hlen > len(blob):
        raise FormatError(f"truncated header: need {10 + hlen} bytes, file has {len(blob)}")
    try:
        header = json.loads(blob[10 : 10 + hlen].decode())
        cfg = ModelConfig.from_dict(header["model_cfg"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"invalid checkpoint header: {exc}") from exc

    offset = 10 + hlen
    params = {}
    for name, shape, dtype in header["params"]:
        params[name], offset = _read_block(blob, offset, shape, dtype)
    opt = None
    if header.get("opt") is not None:
        m, v = {}, {}
        for name, shape, dtype in header["opt"]["entries"]:
            m[name], offset = _read_block(blob, offset, shape, dtype)
            v[name], offset = _read_block(blob, offset, shape, dtype)
        opt = OptimState(m=m, v=v, t=int(header["opt"]["t"]))
    if offset != len(blob):
        raise FormatError(f"trailing bytes after offset {offset} (file has {len(blob)})")
    return Checkpoint(
        model_cfg=cfg,
        params=params,
        opt=opt,
        iteration=int(header["iteration"]),
        parent=header.get("parent"),
        meta=header.get("meta", {}),
    )


def restore_model(ckpt: Checkpoint, dtype=np.float32) -> MetaModel:
    """Instantiate a model from a checkpoint with strict name/shape checks."""
    model = MetaModel(ckpt.model_cfg, seed=0, dtype=dtype)
    model.params.load_state_dict(ckpt.params)
    return model
