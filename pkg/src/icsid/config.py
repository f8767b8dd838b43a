"""Unified run configuration loaded from a single YAML document.

One file drives the whole pipeline: the data stream, the model, the
training loop, and evaluation options. Validation is strict: unknown keys
are rejected by their dotted path and out-of-range values are rejected
before any work starts. The fully resolved document (defaults applied) can
be echoed back to disk so a run directory always records exactly what ran.
"""

from __future__ import annotations

import dataclasses
import os
import pathlib
from dataclasses import dataclass
from typing import Any

import yaml

from .datagen import SignalSpec, StreamConfig
from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig
from .wh import WhClassConfig

ENV_OUT_ROOT = "ICSID_OUT_ROOT"

# Allowed keys per section. Anything else is rejected by name; silent
# acceptance of a typo like "lr_scedule" would be worse than an error.
_SCHEMA: dict[str, Any] = {
    "out_dir": None,
    "model_seed": None,
    "stream": {
        "m": None,
        "N": None,
        "n_in": None,
        "b": None,
        "seed": None,
        "input": {"kind": None, "prbs_hold": None, "amplitude": None},
        "system": {
            "order_min": None,
            "order_max": None,
            "pole_mag": None,
            "pole_phase": None,
            "noise_std": None,
            "calib_len": None,
            "burn_in": None,
            "max_retries": None,
            "f_activation": None,
            "standardization": None,
        },
    },
    "model": {
        "d_model": None,
        "n_layers": None,
        "n_heads": None,
        "d_ff": None,
        "patch_len": None,
        "n_u": None,
        "n_y": None,
        "sigma_min": None,
        "dropout": None,
    },
    "train": {
        "total_iters": None,
        "lr": None,
        "betas": None,
        "eps_opt": None,
        "weight_decay": None,
        "warmup_iters": None,
        "lr_schedule": None,
        "grad_clip": None,
        "val_every": None,
        "seed": None,
    },
    "val": {"count": None, "seed": None},
    "eval": {"chunk": None},
}


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs, with defaults already applied.

    ``model.n_in`` mirrors ``stream.n_in`` and ``train.b`` mirrors
    ``stream.b``; those fields are not independently configurable, which
    removes two classes of mismatch by construction.
    """

    stream: StreamConfig
    model: ModelConfig
    train: TrainConfig
    out_dir: str = "runs/run"
    model_seed: int = 0
    val_count: int = 256
    val_seed: int = 999_983
    eval_chunk: int = 64


def _check_keys(doc: dict, schema: dict, prefix: str = "") -> None:
    for key, value in doc.items():
        path = f"{prefix}{key}"
        if key not in schema:
            raise ConfigError(f"unknown config key {path!r}")
        sub = schema[key]
        if isinstance(sub, dict):
            if value is None:
                continue
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path!r} must be a mapping")
            _check_keys(value, sub, prefix=path + ".")


def _section(doc: dict, name: str) -> dict:
    value = doc.get(name) or {}
    return dict(value)


def _as_pair(value: Any, path: str) -> tuple:
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise ConfigError(f"config key {path!r} must be a pair [lo, hi]")
    return (float(value[0]), float(value[1]))


def build_run_config(doc: dict | None) -> RunConfig:
    """Construct a validated RunConfig from a parsed YAML document."""
    doc = dict(doc or {})
    _check_keys(doc, _SCHEMA)

    stream_doc = _section(doc, "stream")
    input_doc = _section(stream_doc, "input")
    system_doc = _section(stream_doc, "system")
    model_doc = _section(doc, "model")
    train_doc = _section(doc, "train")
    val_doc = _section(doc, "val")
    eval_doc = _section(doc, "eval")
    stream_doc.pop("input", None)
    stream_doc.pop("system", None)

    for name, key in (("system", "pole_mag"), ("system", "pole_phase")):
        if key in system_doc:
            system_doc[key] = _as_pair(system_doc[key], f"stream.{name}.{key}")
    if "betas" in train_doc:
        train_doc["betas"] = _as_pair(train_doc["betas"], "train.betas")

    def make(section: str, factory, kwargs: dict):
        try:
            return factory(**kwargs)
        except ConfigError as exc:
            raise ConfigError(f"in section {section!r}: {exc}") from None

    input_spec = make("stream.input", SignalSpec, input_doc)
    class_cfg = make("stream.system", WhClassConfig, system_doc)
    stream = make(
        "stream",
        StreamConfig,
        dict(stream_doc, input_spec=input_spec, class_cfg=class_cfg),
    )
    model = make(
        "model", ModelConfig, dict(model_doc, n_in=stream.n_in)
    )
    if stream.m % model.patch_len != 0:
        raise ConfigError(
            f"stream.m ({stream.m}) must be a multiple of "
            f"model.patch_len ({model.patch_len})"
        )
    train = make("train", TrainConfig, dict(train_doc, b=stream.b))

    def intval(section: dict, key: str, default: int, path: str) -> int:
        raw = section.get(key, default)
        if not isinstance(raw, int) or isinstance(raw, bool) or raw < 0:
            raise ConfigError(f"config key {path!r} must be a non-negative integer")
        return raw

    val_count = intval(val_doc, "count", 256, "val.count")
    val_seed = intval(val_doc, "seed", 999_983, "val.seed")
    eval_chunk = intval(eval_doc, "chunk", 64, "eval.chunk")
    if eval_chunk < 1:
        raise ConfigError("config key 'eval.chunk' must be >= 1")

    out_dir = doc.get("out_dir", "runs/run")
    if not isinstance(out_dir, str) or not out_dir:
        raise ConfigError("config key 'out_dir' must be a non-empty string")
    model_seed = intval(doc, "model_seed", 0, "model_seed")

    return RunConfig(
        stream=stream,
        model=model,
        train=train,
        out_dir=out_dir,
        model_seed=model_seed,
        val_count=val_count,
        val_seed=val_seed,
        eval_chunk=eval_chunk,
    )


def load_run_config(path: str | pathlib.Path) -> RunConfig:
    """Read and validate a YAML run configuration file."""
    with open(path, "r", encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(f"config root must be a mapping, got {type(doc).__name__}")
    return build_run_config(doc)


def resolve_out_dir(cfg: RunConfig) -> pathlib.Path:
    """Resolve the output directory, honoring the output-root env var.

    A relative ``out_dir`` lands under ``$ICSID_OUT_ROOT`` when that is set;
    absolute paths are taken as-is.
    """
    out = pathlib.Path(cfg.out_dir)
    root = os.environ.get(ENV_OUT_ROOT)
    if root and not out.is_absolute():
        out = pathlib.Path(root) / out
    return out


def resolved_dict(cfg: RunConfig) -> dict:
    """Nested plain-dict view of the config with every default filled in."""
    stream = dataclasses.asdict(cfg.stream)
    input_spec = stream.pop("input_spec")
    input_spec.pop("length")  # window lengths come from m and N
    system = stream.pop("class_cfg")
    system["pole_mag"] = list(system["pole_mag"])
    system["pole_phase"] = list(system["pole_phase"])
    stream["input"] = input_spec
    stream["system"] = system

    model = cfg.model.to_dict()
    model.pop("n_in")  # mirrors stream.n_in

    train = dataclasses.asdict(cfg.train)
    train["betas"] = list(train["betas"])
    train.pop("b")  # mirrors stream.b

    return {
        "out_dir": cfg.out_dir,
        "model_seed": cfg.model_seed,
        "stream": stream,
        "model": model,
        "train": train,
        "val": {"count": cfg.val_count, "seed": cfg.val_seed},
        "eval": {"chunk": cfg.eval_chunk},
    }


def echo_config(cfg: RunConfig, out_dir: str | pathlib.Path) -> pathlib.Path:
    """Write the fully resolved config into the output directory."""
    out = pathlib.Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config_resolved.yaml"
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(resolved_dict(cfg), fh, sort_keys=False)
    return path
