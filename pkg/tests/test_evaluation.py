"""Evaluation metrics, report serialization, and trace export."""

import csv
import dataclasses
import math

import numpy as np
import pytest
import yaml

from icsid.autodiff import Tensor
from icsid.checkpoint import save_checkpoint
from icsid.datagen import StreamConfig, write_testset
from icsid.errors import CompatibilityError, ValidationError
from icsid.evaluation import (
    COVERAGE_KS,
    EvalReport,
    coverage,
    evaluate,
    export_traces,
    rmse,
)
from icsid.model import MetaModel, ModelConfig, PredDist
from icsid.training import gaussian_nll_arrays
from icsid.wh import WhClassConfig

CFG = ModelConfig(d_model=8, n_layers=1, n_heads=1, n_in=2, patch_len=2)
STREAM = StreamConfig(
    m=8, N=10, n_in=2, b=2, seed=3,
    class_cfg=WhClassConfig(order_min=1, order_max=1, calib_len=300),
)


def test_rmse_hand_value():
    assert rmse(np.array([1.0, 2.0]), np.array([2.0, 4.0])) == pytest.approx(
        math.sqrt((1 + 4) / 2)
    )
    assert rmse(np.zeros(5), np.zeros(5)) == 0.0


def test_rmse_validates_inputs():
    with pytest.raises(ValidationError):
        rmse(np.zeros(3), np.zeros(4))
    with pytest.raises(ValidationError):
        rmse(np.zeros(0), np.zeros(0))


def _dist(mu, sigma):
    return PredDist(mu=Tensor(np.asarray(mu)), sigma=Tensor(np.asarray(sigma)))


def test_coverage_exact_small_case():
    mu = np.zeros(4)
    sigma = np.ones(4)
    y = np.array([0.5, 1.5, -0.5, 3.5])
    assert coverage(_dist(mu, sigma), y, k=1.0) == 0.5
    assert coverage(_dist(mu, sigma), y, k=2.0) == 0.75
    assert coverage(_dist(mu, sigma), y, k=4.0) == 1.0


def test_coverage_monte_carlo_gaussian():
    # correctness of the band count against the Gaussian CDF
    rng = np.random.default_rng(0)
    n = 200_000
    mu = np.zeros(n)
    sigma = np.abs(rng.standard_normal(n)) + 0.5
    y = rng.normal(mu, sigma)
    for k, want in ((1.0, 0.6827), (1.96, 0.95), (3.0, 0.9973)):
        got = coverage(_dist(mu, sigma), y, k=k)
        assert abs(got - want) < 0.005


def test_coverage_ks_constant():
    assert COVERAGE_KS == (1.0, 1.96, 2.0, 3.0)


def test_report_dict_and_yaml_shape():
    rep = EvalReport(
        input_label="white_gaussian",
        n_samples=2,
        n_in=2,
        per_sample_rmse=[0.5, 0.7],
        rmse=0.6,
        nll=1.0,
        coverage={1.0: 0.7, 1.96: 0.94, 2.0: 0.95, 3.0: 0.99},
        config_hash="c" * 64,
        checkpoint_hash="a" * 64,
        testset_hash="b" * 64,
    )
    d = rep.to_dict()
    assert d["coverage"]["k=1.96"] == 0.94
    assert "%" not in yaml.safe_dump(d)
    parsed = yaml.safe_load(rep.to_text())
    assert parsed["rmse"] == 0.6
    assert parsed["n_samples"] == 2


def _make_artifacts(tmp_path, stream=STREAM, count=4, seed=0):
    model = MetaModel(CFG, seed=seed)
    ckpt = tmp_path / "m.ckpt"
    save_checkpoint(ckpt, model, iteration=1)
    ts = tmp_path / "t.icsd"
    write_testset(ts, stream, count)
    return ckpt, ts


def test_evaluate_report_well_formed(tmp_path):
    ckpt, ts = _make_artifacts(tmp_path)
    rep = evaluate(ckpt, ts)
    assert rep.n_samples == 4
    assert rep.input_label == "white_gaussian"
    assert len(rep.per_sample_rmse) == 4
    assert rep.rmse == pytest.approx(float(np.mean(rep.per_sample_rmse)))
    assert np.isfinite(rep.nll)
    assert set(rep.coverage) == set(COVERAGE_KS)
    assert rep.rmse > 0.1  # an untrained model sits far above the noise floor
    assert len(rep.checkpoint_hash) == 64
    assert len(rep.testset_hash) == 64


def test_evaluate_is_deterministic(tmp_path):
    ckpt, ts = _make_artifacts(tmp_path)
    r1 = evaluate(ckpt, ts)
    r2 = evaluate(ckpt, ts)
    assert r1.to_dict() == r2.to_dict()


def test_evaluate_chunking_does_not_change_results(tmp_path):
    ckpt, ts = _make_artifacts(tmp_path, count=5)
    r1 = evaluate(ckpt, ts, chunk=1)
    r2 = evaluate(ckpt, ts, chunk=64)
    assert r1.per_sample_rmse == pytest.approx(r2.per_sample_rmse, abs=1e-7)


def test_evaluate_rejects_incompatible_testset(tmp_path):
    bad_stream = dataclasses.replace(STREAM, n_in=3, N=11)
    ckpt, ts = _make_artifacts(tmp_path, stream=bad_stream)
    with pytest.raises(CompatibilityError) as err:
        evaluate(ckpt, ts)
    assert "3" in str(err.value) and "2" in str(err.value)  # both values named


def test_evaluate_empty_testset(tmp_path):
    ckpt, ts = _make_artifacts(tmp_path, count=0)
    rep = evaluate(ckpt, ts)
    assert rep.n_samples == 0
    assert rep.rmse == 0.0


def test_report_save_roundtrip(tmp_path):
    ckpt, ts = _make_artifacts(tmp_path)
    rep = evaluate(ckpt, ts)
    out = tmp_path / "report.yaml"
    rep.save(out)
    parsed = yaml.safe_load(out.read_text())
    assert parsed["rmse"] == pytest.approx(rep.rmse)
    assert parsed["checkpoint_hash"] == rep.checkpoint_hash


def test_traces_csv_recomputes_report_rmse(tmp_path):
    ckpt, ts = _make_artifacts(tmp_path)
    rep = evaluate(ckpt, ts)
    path = tmp_path / "traces.csv"
    export_traces(ckpt, ts, path)
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    n_pos = STREAM.N - STREAM.n_in
    assert len(rows) == 4 * n_pos
    assert rows[0]["t"] == str(STREAM.n_in + 1)

    by_sample = {}
    for r in rows:
        by_sample.setdefault(r["sample_id"], []).append(float(r["error"]))
    rms = [math.sqrt(np.mean(np.square(errs))) for _, errs in sorted(by_sample.items())]
    assert float(np.mean(rms)) == pytest.approx(rep.rmse, abs=1e-6)

    # band columns are mu +- 3 sigma
    r0 = rows[0]
    assert float(r0["lower"]) == pytest.approx(float(r0["mu"]) - 3 * float(r0["sigma"]))
    assert float(r0["upper"]) == pytest.approx(float(r0["mu"]) + 3 * float(r0["sigma"]))


def test_traces_nll_consistency(tmp_path):
    # pooled NLL recomputed from the trace rows matches the report
    ckpt, ts = _make_artifacts(tmp_path)
    rep = evaluate(ckpt, ts)
    path = tmp_path / "traces.csv"
    export_traces(ckpt, ts, path)
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    mu = np.array([float(r["mu"]) for r in rows])
    sigma = np.array([float(r["sigma"]) for r in rows])
    y = np.array([float(r["y"]) for r in rows])
    assert gaussian_nll_arrays(mu, sigma, y) == pytest.approx(rep.nll, abs=1e-9)
