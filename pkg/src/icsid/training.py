"""Streaming NLL minimization with AdamW, checkpointing, and fine-tuning.

Each iteration draws a fresh minibatch of datasets (batch index = iteration,
so the stream position is a pure function of the data seed and the iteration
counter), runs the model, and takes one AdamW step on the Gaussian negative
log-likelihood. Validation metrics come from a fixed serialized set. Training
is resumable: checkpoint + optimizer state + iteration fully determine the
rest of the run, bitwise.
"""

from __future__ import annotations

import json
import math
import time
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor, no_grad, ops
from .checkpoint import OptimState, file_sha256, load_checkpoint, restore_model, save_checkpoint
from .datagen import Minibatch, StreamConfig, TestSet, make_batch, substream
from .errors import ConfigError, NumericError
from .model import MetaModel, PredDist

LOG2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class TrainConfig:
    total_iters: int = 1_000_000
    lr: float = 1e-4
    betas: tuple = (0.9, 0.95)
    eps_opt: float = 1e-8
    weight_decay: float = 0.01
    warmup_iters: int = -1  # -1 resolves to 1% of total_iters
    lr_schedule: str = "cosine"
    grad_clip: float | None = 1.0
    b: int = 32
    val_every: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.total_iters < 0:
            raise ConfigError(f"total_iters must be >= 0, got {self.total_iters}")
        if self.lr <= 0 or self.eps_opt <= 0:
            raise ConfigError("lr and eps_opt must be positive")
        if not (0 < self.betas[0] < 1 and 0 < self.betas[1] < 1):
            raise ConfigError(f"betas must lie in (0,1), got {self.betas}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError(f"grad_clip must be positive or None, got {self.grad_clip}")
        if self.warmup_iters == -1:
            object.__setattr__(self, "warmup_iters", self.total_iters // 100)
        if self.warmup_iters > self.total_iters:
            raise ConfigError("warmup_iters must not exceed total_iters")
        if self.b < 1 or self.val_every < 1:
            raise ConfigError("b and val_every must be >= 1")


def lr_at(cfg: TrainConfig, iteration: int) -> float:
    """Scheduled learning rate: linear warmup, then constant or cosine decay
    to 10% of the peak at the final iteration."""
    if cfg.warmup_iters > 0 and iteration < cfg.warmup_iters:
        return cfg.lr * (iteration + 1) / cfg.warmup_iters
    if cfg.lr_schedule == "constant":
        return cfg.lr
    span = max(cfg.total_iters - cfg.warmup_iters, 1)
    progress = min((iteration - cfg.warmup_iters) / span, 1.0)
    floor = 0.1 * cfg.lr
    return floor + 0.5 * (cfg.lr - floor) * (1.0 + math.cos(math.pi * progress))


def gaussian_nll(pred: PredDist, target) -> Tensor:
    """Mean over batch/time/channel of the Gaussian NLL of target under pred.

    Per element: 0.5*ln(2*pi) + ln(sigma) + (y - mu)^2 / (2*sigma^2).
    """
    mu, sigma = pred.mu, pred.sigma
    y = np.asarray(target, dtype=mu.data.dtype)
    if y.ndim == mu.ndim - 1:
        y = y[..., None]
    if y.shape != mu.data.shape:
        raise NumericError(f"target shape {y.shape} does not match mu shape {mu.data.shape}")
    if not (np.isfinite(y).all() and mu.all_finite() and sigma.all_finite()):
        raise NumericError("gaussian_nll received non-finite inputs")
    resid = Tensor(y) - mu
    quad = (resid * resid) / ((sigma * sigma) * 2.0)
    return ops.mean(quad + ops.log(sigma)) + 0.5 * LOG2PI


def gaussian_nll_arrays(mu: np.ndarray, sigma: np.ndarray, y: np.ndarray) -> float:
    """Array-only twin of gaussian_nll for evaluation paths."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if not (np.isfinite(mu).all() and np.isfinite(sigma).all() and np.isfinite(y).all()):
        raise NumericError("gaussian_nll received non-finite inputs")
    e = 0.5 * LOG2PI + np.log(sigma) + (y - mu) ** 2 / (2.0 * sigma**2)
    return float(e.mean())


def global_grad_norm(grads: dict) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.vdot(g, g).real)
    return math.sqrt(total)


def adamw_step(params, grads: dict, state: OptimState, cfg: TrainConfig, lr: float) -> None:
    """One decoupled-weight-decay Adam update, in place.

    Bias-corrected moments; denominator sqrt(v_hat) + eps. Weight decay is
    applied directly to the parameters, scaled by the scheduled lr.
    """
    b1, b2 = cfg.betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        if cfg.weight_decay:
            p.data -= lr * cfg.weight_decay * p.data
        p.data -= lr * m_hat / (np.sqrt(v_hat) + cfg.eps_opt)


@dataclass
class TrainResult:
    latest_path: str
    best_path: str | None
    metrics_path: str
    final_iteration: int
    best_val_rmse: float | None


class MetricsLog:
    """Append-only newline-delimited JSON metrics records."""

    def __init__(self, path, resume_before: int | None = None):
        self.path = Path(path)
        if resume_before is not None and self.path.exists():
            kept = []
            with open(self.path) as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    rec = json.loads(line)
                    if rec.get("iteration", -1) < resume_before:
                        kept.append(line)
            with open(self.path, "w") as fh:
                for line in kept:
                    fh.write(line + "\n")
        elif resume_before is None:
            self.path.write_text("")

    def append(self, record: dict) -> None:
        with open(self.path, "a") as fh:
            fh.write(json.dumps(record) + "\n")


def _validate(model: MetaModel, val_set: TestSet, chunk: int = 64) -> tuple:
    """Validation RMSE (per-sample then mean) and NLL on the fixed set."""
    n_in = val_set.cfg.n_in
    per_rmse = []
    nlls = []
    with no_grad():
        for lo in range(0, len(val_set), chunk):
            batch = Minibatch.stack(val_set.samples[lo : lo + chunk])
            pred = model.forward(batch)
            mu = pred.mu.data[..., 0]
            sigma = pred.sigma.data[..., 0]
            y = batch.qry_y[:, n_in:].astype(mu.dtype)
            per_rmse.extend(np.sqrt(np.mean((y - mu) ** 2, axis=1)).tolist())
            nlls.append(gaussian_nll_arrays(mu, sigma, y) * y.size)
    total = sum(len(val_set[i].qry_y) - n_in for i in range(len(val_set)))
    return float(np.mean(per_rmse)), float(sum(nlls) / total)


def train(
    model: MetaModel,
    stream_cfg: StreamConfig,
    val_set: TestSet | None,
    cfg: TrainConfig,
    out_dir,
    resume_from=None,
    parent: str | None = None,
    meta: dict | None = None,
) -> TrainResult:
    """Run (or resume) the training loop.

    resume_from names a checkpoint written by this function; iteration count,
    parameters, and optimizer state are restored from it and the metrics log
    is truncated to the restored iteration, so an interrupted run continues
    exactly as the uninterrupted one would have.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    latest_path = out / "latest.ckpt"
    best_path = out / "best.ckpt"
    metrics_path = out / "metrics.jsonl"

    if stream_cfg.n_in != model.cfg.n_in:
        raise ConfigError(
            f"stream n_in={stream_cfg.n_in} incompatible with model n_in={model.cfg.n_in}"
        )
    if stream_cfg.m % model.cfg.patch_len != 0:
        raise ConfigError(
            f"context length m={stream_cfg.m} not divisible by patch_len={model.cfg.patch_len}"
        )
    if stream_cfg.b != cfg.b:
        raise ConfigError(f"stream batch size {stream_cfg.b} != train batch size {cfg.b}")

    start_iter = 0
    opt = OptimState.init_like(model.params)
    best_val = math.inf
    have_best = False
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        model.params.load_state_dict(ckpt.params)
        if ckpt.opt is None:
            raise ConfigError(f"checkpoint {resume_from} has no optimizer state to resume from")
        opt = ckpt.opt
        start_iter = ckpt.iteration
        parent = ckpt.parent if parent is None else parent
        restored_best = ckpt.meta.get("best_val_rmse")
        if restored_best is not None:
            best_val = float(restored_best)
            have_best = True
        meta = {**ckpt.meta, **(meta or {})}

    log = MetricsLog(metrics_path, resume_before=start_iter if resume_from else None)
    if start_iter == 0:
        log.append(
            {
                "event": "start",
                "parent": parent,
                "input_spec": {
                    "kind": stream_cfg.input_spec.kind,
                    "prbs_hold": stream_cfg.input_spec.prbs_hold,
                    "amplitude": stream_cfg.input_spec.amplitude,
                },
                "total_iters": cfg.total_iters,
            }
        )

    def save(path, iteration, extra_meta=None):
        full_meta = {**(meta or {}), "best_val_rmse": (best_val if have_best else None)}
        if extra_meta:
            full_meta.update(extra_meta)
        return save_checkpoint(path, model, opt=opt, iteration=iteration, parent=parent, meta=full_meta)

    consecutive_skips = 0
    completed = start_iter
    try:
        for iteration in range(start_iter, cfg.total_iters):
            batch = make_batch(stream_cfg, iteration)
            rng = (
                np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(iteration, 1)))
                if model.cfg.dropout > 0
                else None
            )
            model.params.zero_grad()
            pred = model.forward(batch, train=True, rng=rng)
            n_in = batch.n_in
            loss = gaussian_nll(pred, batch.qry_y[:, n_in:])
            loss_val = float(loss.data)
            loss.backward()
            grads = {
                name: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for name, t in model.params.items()
            }

            lr = lr_at(cfg, iteration)
            finite = math.isfinite(loss_val) and all(np.isfinite(g).all() for g in grads.values())
            skipped = not finite
            if skipped:
                consecutive_skips += 1
                warnings.warn(f"skipping iteration {iteration}: non-finite loss or gradients")
                if consecutive_skips > 100:
                    raise NumericError(
                        f"aborting: {consecutive_skips} consecutive non-finite steps at iteration {iteration}"
                    )
                opt.t += 1
            else:
                consecutive_skips = 0
                if cfg.grad_clip is not None:
                    norm = global_grad_norm(grads)
                    if norm > cfg.grad_clip:
                        scale = cfg.grad_clip / norm
                        for g in grads.values():
                            g *= scale
                adamw_step(model.params, grads, opt, cfg, lr)

            record = {"iteration": iteration, "train_nll": loss_val, "lr": lr}
            if skipped:
                record["skipped"] = True
            is_val_iter = val_set is not None and (
                (iteration + 1) % cfg.val_every == 0 or iteration + 1 == cfg.total_iters
            )
            if is_val_iter:
                val_rmse, val_nll = _validate(model, val_set)
                record["val_rmse"] = val_rmse
                record["val_nll"] = val_nll
                if val_rmse < best_val:
                    best_val = val_rmse
                    have_best = True
                    save(best_path, iteration + 1)
                save(latest_path, iteration + 1)
            record["wallclock"] = time.time()
            log.append(record)
            completed = iteration + 1
    except KeyboardInterrupt:
        # Parameters may include a partially applied iteration; the marked
        # iteration is the last completed boundary, so resume never skips data.
        save(latest_path, completed)
        raise

    save(latest_path, cfg.total_iters)
    return TrainResult(
        latest_path=str(latest_path),
        best_path=str(best_path) if have_best else None,
        metrics_path=str(metrics_path),
        final_iteration=cfg.total_iters,
        best_val_rmse=best_val if have_best else None,
    )


def fine_tune(
    checkpoint_path,
    stream_cfg: StreamConfig,
    val_set: TestSet | None,
    cfg: TrainConfig,
    out_dir,
    resume_from=None,
) -> TrainResult:
    """Continue training a stored model on a new stream (fresh optimizer).

    The parent checkpoint's hash is recorded in the metrics log and in every
    checkpoint written, so output lineage is traceable. resume_from picks an
    interrupted fine-tuning run back up, same contract as train.
    """
    parent_hash = file_sha256(checkpoint_path)
    ckpt = load_checkpoint(checkpoint_path)
    model = restore_model(ckpt)
    return train(
        model,
        stream_cfg,
        val_set,
        cfg,
        out_dir,
        resume_from=resume_from,
        parent=parent_hash,
        meta={"fine_tuned_from": str(checkpoint_path)},
    )
