"""Evaluation: RMSE against the noise floor, NLL, and interval coverage.

Coverage is always reported per multiplier k (the fraction of targets inside
mu +- k*sigma); bands are never labeled with a percentage, so k=1.96 and k=3
can coexist without committing to either convention.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
import yaml

from .autodiff import no_grad
from .checkpoint import file_sha256, load_checkpoint, restore_model
from .datagen import Minibatch, TestSet, read_testset
from .errors import CompatibilityError, ValidationError
from .model import MetaModel, PredDist
from .training import gaussian_nll_arrays

COVERAGE_KS = (1.0, 1.96, 2.0, 3.0)


def rmse(mu, y) -> float:
    """Root mean squared error between a prediction and a target sequence."""
    mu = np.asarray(mu, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if mu.size == 0 or y.size == 0:
        raise ValidationError("rmse requires non-empty inputs")
    if mu.shape != y.shape:
        raise ValidationError(f"rmse shape mismatch: {mu.shape} vs {y.shape}")
    return float(np.sqrt(np.mean((y - mu) ** 2)))


def _dist_arrays(pred) -> tuple:
    mu = pred.mu.data if hasattr(pred.mu, "data") else np.asarray(pred.mu)
    sigma = pred.sigma.data if hasattr(pred.sigma, "data") else np.asarray(pred.sigma)
    return np.asarray(mu, dtype=np.float64), np.asarray(sigma, dtype=np.float64)


def coverage(pred: PredDist, y, k: float) -> float:
    """Fraction of targets inside the mu +- k*sigma band."""
    mu, sigma = _dist_arrays(pred)
    y = np.asarray(y, dtype=np.float64)
    if y.shape != mu.shape:
        if y.shape == mu.shape[:-1] and mu.shape[-1] == 1:
            y = y[..., None]
        else:
            raise ValidationError(f"coverage shape mismatch: target {y.shape} vs mu {mu.shape}")
    return float(np.mean(np.abs(y - mu) <= k * sigma))


@dataclass
class EvalReport:
    input_label: str
    n_samples: int
    n_in: int
    per_sample_rmse: list
    rmse: float
    nll: float
    coverage: dict
    config_hash: str
    checkpoint_hash: str
    testset_hash: str
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "input_label": self.input_label,
            "n_samples": self.n_samples,
            "n_in": self.n_in,
            "rmse": self.rmse,
            "nll": self.nll,
            "coverage": {f"k={k:g}": v for k, v in self.coverage.items()},
            "config_hash": self.config_hash,
            "checkpoint_hash": self.checkpoint_hash,
            "testset_hash": self.testset_hash,
            "per_sample_rmse": [float(v) for v in self.per_sample_rmse],
            **({"extra": self.extra} if self.extra else {}),
        }

    def to_text(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_text())


def _check_compat(model: MetaModel, ts: TestSet) -> None:
    problems = []
    if ts.cfg.n_in != model.cfg.n_in:
        problems.append(f"n_in: test set {ts.cfg.n_in} vs model {model.cfg.n_in}")
    if ts.cfg.m % model.cfg.patch_len != 0:
        problems.append(f"m: test set {ts.cfg.m} not divisible by model patch_len {model.cfg.patch_len}")
    if ts.cfg.N <= ts.cfg.n_in:
        problems.append(f"N: test set {ts.cfg.N} <= n_in {ts.cfg.n_in}")
    if problems:
        raise CompatibilityError("checkpoint/test-set mismatch: " + "; ".join(problems))


def _forward_testset(model: MetaModel, ts: TestSet, chunk: int = 64) -> tuple:
    """mu, sigma arrays of shape (count, N - n_in) plus the stacked targets."""
    n_in = ts.cfg.n_in
    if len(ts) == 0:
        empty = np.zeros((0, ts.cfg.N - n_in))
        return empty, empty.copy(), empty.copy()
    mus, sigmas, ys = [], [], []
    with no_grad():
        for lo in range(0, len(ts), chunk):
            batch = Minibatch.stack(ts.samples[lo : lo + chunk])
            pred = model.forward(batch)
            mus.append(pred.mu.data[..., 0])
            sigmas.append(pred.sigma.data[..., 0])
            ys.append(batch.qry_y[:, n_in:])
    return np.concatenate(mus), np.concatenate(sigmas), np.concatenate(ys)


def _config_hash(model: MetaModel, ts: TestSet, input_label: str) -> str:
    payload = json.dumps(
        {
            "model_cfg": model.cfg.to_dict(),
            "stream_cfg": json.loads(json.dumps(ts.cfg.__dict__, default=lambda o: o.__dict__)),
            "input_label": input_label,
            "coverage_ks": list(COVERAGE_KS),
        },
        sort_keys=True,
    ).encode()
    return hashlib.sha256(payload).hexdigest()


def evaluate(
    checkpoint_path, testset_path, input_label: str | None = None, chunk: int = 64
) -> EvalReport:
    """Forward the whole test set through a stored model and aggregate metrics.

    Aggregate RMSE is the mean of per-sample RMSEs; NLL and coverage pool all
    positions. Deterministic given the two files; chunk only bounds memory.
    """
    ckpt_hash = file_sha256(checkpoint_path)
    model = restore_model(load_checkpoint(checkpoint_path))
    ts_hash = file_sha256(testset_path)
    ts = read_testset(testset_path)
    _check_compat(model, ts)
    if input_label is None:
        input_label = ts.cfg.input_spec.kind

    mu, sigma, y = _forward_testset(model, ts, chunk=chunk)
    per_sample = [rmse(mu[i], y[i]) for i in range(len(ts))]
    cov = {
        k: float(np.mean(np.abs(y - mu) <= k * sigma)) if y.size else 0.0
        for k in COVERAGE_KS
    }
    return EvalReport(
        input_label=input_label,
        n_samples=len(ts),
        n_in=ts.cfg.n_in,
        per_sample_rmse=per_sample,
        rmse=float(np.mean(per_sample)) if per_sample else 0.0,
        nll=gaussian_nll_arrays(mu, sigma, y) if len(ts) else 0.0,
        coverage=cov,
        config_hash=_config_hash(model, ts, input_label),
        checkpoint_hash=ckpt_hash,
        testset_hash=ts_hash,
    )


def export_traces(checkpoint_path, testset_path, path, chunk: int = 64) -> None:
    """Write per-position traces: t, y, mu, sigma, error, mu +- 3 sigma bands.

    One CSV row per (sample, query position past the initial conditions);
    enough to redraw prediction/error/band figures with any plotting tool.
    """
    model = restore_model(load_checkpoint(checkpoint_path))
    ts = read_testset(testset_path)
    _check_compat(model, ts)
    mu, sigma, y = _forward_testset(model, ts, chunk=chunk)
    n_in = ts.cfg.n_in
    try:
        fh = open(path, "w", newline="")
    except OSError as exc:
        raise OSError(f"cannot write traces to {path}: {exc}") from exc
    with fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "t", "y", "mu", "sigma", "error", "lower", "upper"])
        for sid in range(mu.shape[0]):
            for j in range(mu.shape[1]):
                m, s, yy = float(mu[sid, j]), float(sigma[sid, j]), float(y[sid, j])
                w.writerow(
                    [sid, n_in + j + 1, repr(yy), repr(m), repr(s), repr(yy - m), repr(m - 3 * s), repr(m + 3 * s)]
                )
