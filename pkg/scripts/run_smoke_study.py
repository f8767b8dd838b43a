"""Desk-scale learning study backing the smoke-test acceptance checks.

Trains the small configuration (orders 1-2, d_model=32, 4+4 layers, L=4,
N=60, n_in=4, b=16) for 20k iterations at context lengths m=128 and m=32,
three seeds each, then measures out-of-distribution PRBS behavior and a
2k-iteration PRBS fine-tune of the m=128 seed-0 model. Everything is
seeded; rerunning reproduces the same numbers on the same platform.

Writes results/smoke_study.json and leaves all run directories under
results/smoke_runs/. Takes a few CPU-hours; progress prints per run.

Usage: python3 scripts/run_smoke_study.py [--out results]
"""

import argparse
import dataclasses
import json
import pathlib
import sys
import time

import numpy as np

from icsid.datagen import StreamConfig, read_testset, write_testset
from icsid.evaluation import evaluate
from icsid.model import MetaModel, ModelConfig
from icsid.training import TrainConfig, fine_tune, train
from icsid.wh import SignalSpec, WhClassConfig

SEEDS = (0, 1, 2)
CONTEXTS = (128, 32)
TOTAL_ITERS = 20_000
FT_ITERS = 2_000
VAL_COUNT = 256
TEST_COUNT = 256

MODEL = ModelConfig(d_model=32, n_layers=4, n_heads=2, n_in=4, patch_len=4)
CLASS = WhClassConfig(order_min=1, order_max=2)


def stream_cfg(m: int, seed: int, kind: str = "white_gaussian") -> StreamConfig:
    return StreamConfig(
        m=m, N=60, n_in=4, b=16, seed=seed,
        input_spec=SignalSpec(kind=kind), class_cfg=CLASS,
    )


def final_val_rmse(metrics_path) -> float:
    """Validation RMSE recorded at the last training iteration."""
    last = None
    with open(metrics_path) as fh:
        for line in fh:
            rec = json.loads(line)
            if "val_rmse" in rec:
                last = rec
    assert last is not None, f"no validation records in {metrics_path}"
    return float(last["val_rmse"])


def run_training(out_root: pathlib.Path, m: int, seed: int) -> dict:
    run_dir = out_root / f"smoke_runs/m{m}_seed{seed}"
    sc = stream_cfg(m, seed=1000 + seed)
    val_path = run_dir / "val.icsd"
    run_dir.mkdir(parents=True, exist_ok=True)
    if not val_path.exists():
        write_testset(val_path, dataclasses.replace(sc, seed=999_983), VAL_COUNT)
    val = read_testset(val_path)

    # recipe picked by a short lr sweep: 3e-3 cosine with no weight decay
    # beat 1e-3/wd=0.01 by ~9% val rmse at equal budget on this model size
    tc = TrainConfig(total_iters=TOTAL_ITERS, lr=3e-3, betas=(0.9, 0.98),
                     weight_decay=0.0, warmup_iters=600, b=16, val_every=1000)
    model = MetaModel(MODEL, seed=seed)
    t0 = time.time()
    result = train(model, sc, val, tc, run_dir)
    hours = (time.time() - t0) / 3600
    rmse = final_val_rmse(result.metrics_path)
    print(f"[m={m} seed={seed}] final val rmse {rmse:.4f} "
          f"best {result.best_val_rmse:.4f} ({hours:.2f} h)", flush=True)
    return {
        "m": m,
        "seed": seed,
        "final_val_rmse": rmse,
        "best_val_rmse": result.best_val_rmse,
        "hours": round(hours, 3),
        "checkpoint": str(result.latest_path),
    }


def run_finetune_study(out_root: pathlib.Path, parent_ckpt: str) -> dict:
    """OOD degradation on PRBS and the effect of a short PRBS fine-tune."""
    ts_dir = out_root / "smoke_runs"
    white_ts = ts_dir / "test_white.icsd"
    prbs_ts = ts_dir / "test_prbs.icsd"
    if not white_ts.exists():
        write_testset(white_ts, stream_cfg(128, seed=555_001), TEST_COUNT)
    if not prbs_ts.exists():
        write_testset(prbs_ts, stream_cfg(128, seed=555_002, kind="prbs"), TEST_COUNT)

    rmse_white = evaluate(parent_ckpt, white_ts).rmse
    rmse_prbs_before = evaluate(parent_ckpt, prbs_ts).rmse
    print(f"[finetune] white {rmse_white:.4f} prbs before {rmse_prbs_before:.4f}",
          flush=True)

    ft_dir = ts_dir / "finetune_prbs"
    sc = stream_cfg(128, seed=2000, kind="prbs")
    val_path = ft_dir / "val.icsd"
    ft_dir.mkdir(parents=True, exist_ok=True)
    if not val_path.exists():
        write_testset(val_path, dataclasses.replace(sc, seed=999_979), VAL_COUNT)
    val = read_testset(val_path)
    tc = TrainConfig(total_iters=FT_ITERS, lr=3e-4, b=16, val_every=500)
    t0 = time.time()
    result = fine_tune(parent_ckpt, sc, val, tc, ft_dir)
    hours = (time.time() - t0) / 3600
    rmse_prbs_after = evaluate(result.latest_path, prbs_ts).rmse
    print(f"[finetune] prbs after {rmse_prbs_after:.4f} ({hours:.2f} h)", flush=True)
    return {
        "rmse_white": rmse_white,
        "rmse_prbs_before": rmse_prbs_before,
        "rmse_prbs_after": rmse_prbs_after,
        "hours": round(hours, 3),
        "checkpoint": str(result.latest_path),
    }


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="results")
    args = parser.parse_args(argv)
    out_root = pathlib.Path(args.out)

    runs = []
    for m in CONTEXTS:
        for seed in SEEDS:
            runs.append(run_training(out_root, m, seed))
            _dump(out_root, runs, None)

    parent = next(r["checkpoint"] for r in runs if r["m"] == 128 and r["seed"] == 0)
    ft = run_finetune_study(out_root, parent)
    _dump(out_root, runs, ft)

    med128 = float(np.median([r["final_val_rmse"] for r in runs if r["m"] == 128]))
    med32 = float(np.median([r["final_val_rmse"] for r in runs if r["m"] == 32]))
    print(f"median final val rmse: m=128 {med128:.4f}  m=32 {med32:.4f}")
    return 0


def _dump(out_root: pathlib.Path, runs: list, ft: dict | None) -> None:
    out_root.mkdir(parents=True, exist_ok=True)
    med = {
        m: float(np.median([r["final_val_rmse"] for r in runs if r["m"] == m]))
        for m in CONTEXTS
        if any(r["m"] == m for r in runs)
    }
    doc = {
        "model": MODEL.to_dict(),
        "total_iters": TOTAL_ITERS,
        "ft_iters": FT_ITERS,
        "seeds": list(SEEDS),
        "runs": runs,
        "median_final_val_rmse": {str(k): v for k, v in med.items()},
        "finetune": ft,
    }
    with open(out_root / "smoke_study.json", "w") as fh:
        json.dump(doc, fh, indent=2)


if __name__ == "__main__":
    sys.exit(main())
