"""Release gate: one test per shipping criterion, each ending in a single
PASS/FAIL verdict line.

Criteria 1-8 and 11 run from scratch in seconds to minutes. Criteria 9 and 10
read the training-study summary committed at results/smoke_study.json; if that
file is missing they regenerate it by running scripts/run_smoke_study.py,
which trains six small models plus one fine-tune and takes a few hours on a
single CPU core.
"""

import dataclasses
import json
import math
import pathlib
import subprocess
import sys

import numpy as np
import pytest

from icsid.autodiff import Tensor, grad_check, no_grad
from icsid.checkpoint import load_checkpoint
from icsid.datagen import StreamConfig, make_batch, read_testset, write_testset
from icsid.evaluation import coverage, evaluate, rmse
from icsid.lti import sample_lti
from icsid.model import MetaModel, ModelConfig, PredDist, param_count
from icsid.training import TrainConfig, gaussian_nll, gaussian_nll_arrays, train
from icsid.wh import WhClassConfig, sample_wh

ROOT = pathlib.Path(__file__).resolve().parents[1]


def _verdict(ok: bool, label: str, detail: str) -> None:
    print(f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}")
    assert ok, f"{label}: {detail}"


def test_criterion_01_parameter_counts():
    base = ModelConfig(d_model=128, n_layers=12, n_heads=4, d_ff=512, n_in=10, patch_len=4)
    with_patching = param_count(base)
    plain = param_count(dataclasses.replace(base, patch_len=1))
    ok = (
        abs(with_patching - 5.54e6) <= 0.05 * 5.54e6
        and abs(plain - 5.50e6) <= 0.05 * 5.50e6
    )
    _verdict(ok, "criterion 1 parameter counts",
             f"patched {with_patching} (target 5.54M +-5%), plain {plain} (target 5.50M +-5%)")


def test_criterion_02_gradient_correctness():
    cfg = ModelConfig(d_model=8, n_layers=2, n_heads=2, n_in=2, patch_len=4)
    stream = StreamConfig(
        m=16, N=12, n_in=2, b=1, seed=11,
        class_cfg=WhClassConfig(order_min=1, order_max=2, calib_len=500),
    )
    model = MetaModel(cfg, seed=0, dtype=np.float64)
    batch = make_batch(stream, 0)
    target = batch.qry_y[:, stream.n_in:].astype(np.float64)

    def loss(_params):
        return gaussian_nll(model.forward(batch), target)

    worst = grad_check(loss, model.params, step=1e-5)
    ok = worst < 1e-4
    _verdict(ok, "criterion 2 gradient correctness",
             f"max relative error {worst:.3e} over {model.param_count()} parameters (< 1e-4)")


def test_criterion_03_nll_closed_forms():
    half_log_2pi = 0.5 * math.log(2.0 * math.pi)

    def nll(mu, sigma, y):
        pred = PredDist(mu=Tensor(np.float64(mu)), sigma=Tensor(np.float64(sigma)))
        return float(gaussian_nll(pred, np.float64(y)).data)

    errs = [
        abs(nll(0.0, 1.0, 0.0) - half_log_2pi),
        abs(nll(0.0, 1.0, 1.0) - (half_log_2pi + 0.5)),
    ]
    # joint scaling of residual and sigma by c shifts the NLL by ln c
    rng = np.random.default_rng(0)
    mu = rng.standard_normal(100)
    sigma = np.abs(rng.standard_normal(100)) + 0.5
    y = rng.standard_normal(100)
    for c in (2.0, 7.3):
        shifted = gaussian_nll_arrays(c * mu, c * sigma, c * y)
        errs.append(abs(shifted - (gaussian_nll_arrays(mu, sigma, y) + math.log(c))))
    ok = max(errs) < 1e-9
    _verdict(ok, "criterion 3 NLL closed forms", f"max deviation {max(errs):.3e} (< 1e-9)")


def test_criterion_04_filter_matches_convolution_oracle():
    rng = np.random.default_rng(20260814)
    worst = 0.0
    for _ in range(200):
        blk = sample_lti(rng)
        u = rng.standard_normal(64)
        y = blk.filter(u, reset=True)
        y_ref = np.convolve(u, blk.impulse_response(2000))[:64]
        worst = max(worst, float(np.max(np.abs(y - y_ref))))
    ok = worst < 1e-9
    _verdict(ok, "criterion 4 filter oracle equivalence",
             f"max |recursive - convolution| {worst:.3e} over 200 blocks (< 1e-9)")


def test_criterion_05_class_distribution_constraints():
    rng = np.random.default_rng(5)
    mags, phases = [], []
    for _ in range(10_000):
        blk = sample_lti(rng)
        mags.append(np.abs(blk.poles))
        im = blk.poles[blk.poles.imag > 0]
        phases.append(np.angle(im))
    mags = np.concatenate(mags)
    phases = np.concatenate(phases)
    poles_ok = (
        float(mags.min()) > 0.5 and float(mags.max()) < 0.97
        and float(phases.min()) > 0.0 and float(phases.max()) < math.pi / 2
    )

    # every sampled system must have passed the standardization check on the
    # sampler's fresh 10k-sample noiseless verification run
    sys_rng = np.random.default_rng(6)
    worst_mean, worst_std = 0.0, 1.0
    std_ok = True
    for _ in range(128):
        system = sample_wh(sys_rng)
        worst_mean = max(worst_mean, abs(system.verify_mean))
        if abs(system.verify_std - 1.0) > abs(worst_std - 1.0):
            worst_std = system.verify_std
        if not (abs(system.verify_mean) < 0.05 and 0.9 < system.verify_std < 1.1):
            std_ok = False
    ok = poles_ok and std_ok
    _verdict(ok, "criterion 5 class distribution",
             f"pole mag [{mags.min():.3f}, {mags.max():.3f}], phase [{phases.min():.3f}, "
             f"{phases.max():.3f}], fresh-run worst |mean| {worst_mean:.3f}, "
             f"worst std {worst_std:.3f} over 128 systems")


def test_criterion_06_causality_and_patch_locality():
    cfg = ModelConfig(d_model=16, n_layers=2, n_heads=2, n_in=3, patch_len=4)
    stream = StreamConfig(
        m=24, N=16, n_in=3, b=2, seed=9,
        class_cfg=WhClassConfig(order_min=1, order_max=2, calib_len=500),
    )
    model = MetaModel(cfg, seed=1, dtype=np.float64)
    rng = np.random.default_rng(2)

    worst_past = 0.0
    for trial in range(100):
        batch = make_batch(stream, trial % 7)
        t = int(rng.integers(stream.n_in, stream.N))
        qry_u = batch.qry_u.copy()
        qry_u[:, t] += rng.normal(0.0, 3.0)
        pert = dataclasses.replace(batch, qry_u=qry_u)
        with no_grad():
            mu0 = model.forward(batch).mu.data
            mu1 = model.forward(pert).mu.data
        j_cut = t - stream.n_in
        if j_cut > 0:
            worst_past = max(worst_past, float(np.max(np.abs(mu1[:, :j_cut] - mu0[:, :j_cut]))))
    causal_ok = worst_past <= 1e-10

    local_ok = True
    model32 = MetaModel(cfg, seed=1)
    n_patches = stream.m // cfg.patch_len
    for trial in range(100):
        batch = make_batch(stream, trial % 5)
        j = int(rng.integers(n_patches))
        pos = j * cfg.patch_len + int(rng.integers(cfg.patch_len))
        ctx_u = batch.ctx_u.copy()
        ctx_u[:, pos] += np.float32(rng.normal(0.0, 3.0))
        with no_grad():
            base = model32.patch_embed(batch.ctx_u, batch.ctx_y).data
            pert = model32.patch_embed(ctx_u, batch.ctx_y).data
        others = [i for i in range(n_patches) if i != j]
        if not np.array_equal(base[:, others], pert[:, others]):
            local_ok = False
    ok = causal_ok and local_ok
    _verdict(ok, "criterion 6 causality and patch locality",
             f"max past-position change {worst_past:.3e} (<= 1e-10), "
             f"off-patch embeddings {'unchanged' if local_ok else 'CHANGED'} over 100 trials each")


def test_criterion_07_noise_floor():
    stream = StreamConfig(m=16, N=110, n_in=10, b=1, seed=77)
    rmses = []
    for i in range(256):
        mb = make_batch(stream, i)
        rmses.append(rmse(mb.qry_y_clean[0, stream.n_in:], mb.qry_y[0, stream.n_in:]))
    got = float(np.mean(rmses))
    ok = abs(got - 0.1) < 0.005
    _verdict(ok, "criterion 7 noise floor",
             f"oracle RMSE {got:.4f} over 256 samples (0.1 +- 0.005)")


def test_criterion_08_coverage_correctness():
    rng = np.random.default_rng(0)
    n = 1_000_000
    mu = np.zeros(n)
    sigma = np.ones(n)
    y = rng.standard_normal(n)
    pred = PredDist(mu=Tensor(mu), sigma=Tensor(sigma))
    c196 = coverage(pred, y, k=1.96)
    c3 = coverage(pred, y, k=3.0)
    ok = abs(c196 - 0.950) <= 0.002 and abs(c3 - 0.9973) <= 0.002
    _verdict(ok, "criterion 8 coverage correctness",
             f"k=1.96 -> {c196:.4f} (0.950 +- 0.002), k=3 -> {c3:.4f} (0.9973 +- 0.002)")


def _study_results() -> dict:
    path = ROOT / "results" / "smoke_study.json"
    if not path.exists():
        subprocess.run(
            [sys.executable, str(ROOT / "scripts" / "run_smoke_study.py")],
            check=True,
        )
    return json.loads(path.read_text())


def test_criterion_09_desk_scale_learning():
    study = _study_results()
    finals = {}
    for run in study["runs"]:
        finals.setdefault(run["m"], []).append(run["final_val_rmse"])
    med128 = float(np.median(finals[128]))
    med32 = float(np.median(finals[32]))
    hours = max(run["hours"] for run in study["runs"])
    ok = (len(finals[128]) == 3 and len(finals[32]) == 3
          and med128 < 0.25 and med128 <= med32 and hours < 3.0)
    _verdict(ok, "criterion 9 desk-scale learning",
             f"median val RMSE m=128 {med128:.4f} (< 0.25), m=32 {med32:.4f} "
             f"(>= m=128), slowest run {hours:.2f} h (< 3)")


def test_criterion_10_finetuning_direction():
    ft = _study_results()["finetune"]
    ok = (
        ft["rmse_prbs_before"] > ft["rmse_white"]
        and ft["rmse_prbs_after"] < ft["rmse_prbs_before"]
    )
    _verdict(ok, "criterion 10 fine-tuning direction",
             f"white {ft['rmse_white']:.4f} -> PRBS {ft['rmse_prbs_before']:.4f} (degrades), "
             f"after fine-tune {ft['rmse_prbs_after']:.4f} (improves)")


def test_criterion_11_resumability_and_determinism(tmp_path, monkeypatch):
    cls = WhClassConfig(order_min=1, order_max=2, calib_len=500)
    stream = StreamConfig(m=16, N=12, n_in=2, b=4, seed=21, class_cfg=cls)
    model_cfg = ModelConfig(d_model=16, n_layers=2, n_heads=2, n_in=2, patch_len=4)
    tc = TrainConfig(total_iters=10, lr=1e-3, b=4, val_every=5, warmup_iters=2)
    val_path = tmp_path / "val.icsd"
    write_testset(val_path, dataclasses.replace(stream, seed=900), 8)
    val = read_testset(val_path)

    model_a = MetaModel(model_cfg, seed=1)
    res_a = train(model_a, stream, val, tc, tmp_path / "straight")

    import icsid.training as training_mod
    real_make_batch = training_mod.make_batch

    def interrupting(cfg, index):
        if index == 6:
            raise KeyboardInterrupt
        return real_make_batch(cfg, index)

    monkeypatch.setattr(training_mod, "make_batch", interrupting)
    with pytest.raises(KeyboardInterrupt):
        train(MetaModel(model_cfg, seed=1), stream, val, tc, tmp_path / "resumed")
    monkeypatch.setattr(training_mod, "make_batch", real_make_batch)
    res_b = train(
        MetaModel(model_cfg, seed=1), stream, val, tc, tmp_path / "resumed",
        resume_from=tmp_path / "resumed" / "latest.ckpt",
    )

    pa = load_checkpoint(res_a.latest_path)
    pb = load_checkpoint(res_b.latest_path)
    params_equal = all(np.array_equal(pa.params[n], pb.params[n]) for n in pa.params)

    def strip(path):
        rows = []
        for line in open(path):
            r = json.loads(line)
            r.pop("wallclock", None)
            rows.append(r)
        return rows

    logs_equal = strip(res_a.metrics_path) == strip(res_b.metrics_path)

    # generate and eval are bitwise deterministic given the same seeds
    t1, t2 = tmp_path / "a.icsd", tmp_path / "b.icsd"
    write_testset(t1, stream, 6)
    write_testset(t2, stream, 6)
    gen_equal = t1.read_bytes() == t2.read_bytes()
    r1 = evaluate(res_a.latest_path, t1)
    r2 = evaluate(res_a.latest_path, t1)
    eval_equal = r1.to_dict() == r2.to_dict()

    ok = params_equal and logs_equal and gen_equal and eval_equal
    _verdict(ok, "criterion 11 resumability and determinism",
             f"resume params equal: {params_equal}, logs equal: {logs_equal}, "
             f"generate bitwise: {gen_equal}, eval deterministic: {eval_equal}")
