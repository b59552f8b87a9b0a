"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s``. The verdict lines
are repeated in the terminal summary of any pytest run that includes them.
"""

import csv
import hashlib
import time

import numpy as np
import pytest
import yaml

from stflow import diffcore as dc
from stflow import preprocess as pp
from stflow.ablation import fit_holdout
from stflow.cli import main
from stflow.data import from_generated
from stflow.datagen import GenSpec, gen_flows, gen_network
from stflow.estimator import MSTGCNForecaster
from stflow.graphs import StationProfile, build_influential
from stflow.model import MSTGCN, ModelConfig
from stflow.preprocess import make_windows
from stflow.train import metrics, naive_baseline

from acceptance_log import record
from oracles import influential_scalar, lambda_oracle
from test_diffcore import _op_cases

SEEDS = range(5)


def _toy_loss(seed):
    rng = np.random.default_rng(seed)
    v = 4
    geo = np.zeros((v, v))
    for i in range(v - 1):
        geo[i, i + 1] = geo[i + 1, i] = 1.0
    inf = rng.uniform(size=(v, v))
    np.fill_diagonal(inf, 0.0)
    inf /= inf.sum(axis=1, keepdims=True)
    model = MSTGCN(ModelConfig(n_stations=v, h=5, f=1, m=2, c_out=4, c_sout=2, seed=seed),
                   geographic=geo, influential=inf)
    x, e = rng.normal(size=(v, 5)), rng.integers(0, 2, size=(v, 5, 2)).astype(float)
    target = rng.normal(size=(v, 1))
    return model.params, lambda: dc.mean_all(dc.square(dc.sub(model.forward(x, e), target)))


def test_criterion_1_gradient_fidelity():
    t0 = time.perf_counter()
    worst, where = 0.0, ""
    for seed in SEEDS:
        cases = _op_cases(np.random.default_rng(seed))
        cases["mstgcn_loss"] = _toy_loss(seed)
        for name, (params, f) in cases.items():
            err = dc.gradcheck(f, params, eps=1e-5)
            if err > worst:
                worst, where = err, f"{name} seed {seed}"
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 30.0
    record(1, ok, f"max rel err {worst:.2e} ({where}) over {len(cases)} graphs x 5 seeds in {elapsed:.1f}s")
    assert ok


def test_criterion_2_boxcox():
    rng = np.random.default_rng(0)
    y = rng.uniform(1e-2, 1e2, size=10_000)
    worst = 0.0
    for lam in (-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0):
        st = pp.NormalizationState(lam=lam, shift=0.0, topk_days=[0])
        worst = max(worst, float(np.max(np.abs(pp.boxcox_inverse(pp.boxcox_forward(y, st), st) - y))))
    grid = pp.lambda_grid(-2.0, 2.0, 0.01)
    mismatches = 0
    for seed in range(10):
        r = np.random.default_rng(100 + seed)
        panel = r.lognormal(mean=5.0, sigma=r.uniform(0.3, 1.2), size=(20, 30))
        if pp.fit_lambda(panel, k=5, grid=grid).lam != lambda_oracle(panel, 5, grid):
            mismatches += 1
    ok = worst <= 1e-8 and mismatches == 0
    record(2, ok, f"roundtrip max abs err {worst:.1e}; fit_lambda vs oracle mismatches {mismatches}/10")
    assert ok


def test_criterion_3_influential_oracle():
    rng = np.random.default_rng(42)
    worst, row_err = 0.0, 0.0
    for _ in range(20):
        prof = [StationProfile(f"s{i}", *rng.uniform(0, 100, 2), rng.uniform(5, 80)) for i in range(5)]
        w = build_influential(prof).adjacency
        ref = influential_scalar([(p.x, p.y) for p in prof], [p.mileage for p in prof])
        worst = max(worst, float(np.max(np.abs(w - ref))))
        row_err = max(row_err, float(np.max(np.abs(w.sum(axis=1) - 1.0))))
    ok = worst <= 1e-12 and row_err <= 1e-9
    record(3, ok, f"max |W - oracle| {worst:.1e}; max |row sum - 1| {row_err:.1e}")
    assert ok


def test_criterion_4_paper_scale_forward():
    v = 269
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    geo = np.zeros((v, v))
    for i in range(v - 1):
        geo[i, i + 1] = geo[i + 1, i] = 1.0
    prof = [StationProfile(f"s{i}", *rng.uniform(0, 100, 2), rng.uniform(5, 80)) for i in range(v)]
    model = MSTGCN(ModelConfig(n_stations=v, h=15, f=1, m=3, c_out=64, c_sout=16),
                   geographic=geo, influential=build_influential(prof).adjacency)
    out = model.predict(rng.normal(size=(v, 15)), rng.integers(0, 2, size=(v, 15, 2)).astype(float))
    elapsed = time.perf_counter() - t0
    ok = out.shape == (269, 1) and bool(np.all(np.isfinite(out))) and elapsed < 5.0
    record(4, ok, f"output {out.shape} in {elapsed:.2f}s")
    assert ok


def _dataset(seed, **kw):
    spec = GenSpec(seed=seed, **kw)
    net = gen_network(spec)
    flows, ext, _ = gen_flows(spec, net)
    return from_generated(flows, ext, net)


def test_criterion_5_learning_capability():
    t0 = time.perf_counter()
    ds = _dataset(0, n_stations=10, n_days=120)
    ext = ds.external_features()
    memo = MSTGCNForecaster(epochs=300, lr=1e-2, batch_size=1, seed=0)
    memo.fit(ds.flows[:, :16], ext=ext[:, :16], geographic=ds.geographic(), influential=ds.influential())
    train_mape = metrics(memo.predict(ds.flows[:, :15], ext[:, :15]), ds.flows[:, 15:16]).mape

    wins = []
    for seed in SEEDS:
        ds = _dataset(seed, n_stations=10, n_days=120)
        _, rep = fit_holdout(MSTGCNForecaster(seed=seed), ds, test_days=15)
        samples = make_windows(ds.flows, ds.external_features(), 15, 1)
        tail = samples.subset(np.flatnonzero(samples.start + 15 >= ds.n_days - 15))
        wins.append(rep.mean_rmse < naive_baseline(tail).mean_rmse)
    elapsed = time.perf_counter() - t0
    ok = train_mape < 5.0 and sum(wins) >= 4 and elapsed < 600.0
    record(5, ok, f"single-window train MAPE {train_mape:.3f}% (300 epochs); "
                  f"beats persistence RMSE in {sum(wins)}/5 seeds; {elapsed:.0f}s")
    assert ok


@pytest.fixture(scope="module")
def ablation_table(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("ablation")
    data = tmp / "data"
    assert main(["generate", "--v", "10", "--days", "120", "--seed", "0", "--out", str(data),
                 "--weekend-lo", "2", "--weekend-hi", "2", "--suppression", "0.5"]) == 0
    cfg = {"data": {"dir": str(data)},
           "train": {"seeds": list(SEEDS), "test_days": 15},
           "ablate": {"variants": ["full", "nonE", "nonT"]},
           "output": {"dir": str(tmp / "out")}}
    (tmp / "cfg.yaml").write_text(yaml.safe_dump(cfg))
    assert main(["ablate", str(tmp / "cfg.yaml")]) == 0
    with open(tmp / "out" / "ablation.csv") as fh:
        return {r["variant"]: float(r["mape"]) for r in csv.DictReader(fh)}


def test_criterion_6_ablation_direction(ablation_table):
    t = ablation_table
    ok = t["full"] <= t["nonE"] and t["full"] <= t["nonT"]
    record(6, ok, f"median MAPE full {t['full']:.2f}% nonE {t['nonE']:.2f}% nonT {t['nonT']:.2f}%")
    assert ok


def test_criterion_7_long_tail():
    ds = _dataset(0, n_stations=50, n_days=120, alpha=1.2)
    _, rep = fit_holdout(MSTGCNForecaster(seed=0), ds, test_days=15)
    station = np.array(rep.station_mape)
    volume = ds.flows[:, :ds.n_days - 15].mean(axis=1)
    top = np.argsort(-volume, kind="stable")[:ds.n_stations // 10]
    top_med, net_med = float(np.median(station[top])), float(np.median(station))
    ok = bool(np.all(np.isfinite(station[top]))) and top_med <= 2.0 * net_med
    record(7, ok, f"top-decile median station MAPE {top_med:.2f}% vs network median {net_med:.2f}% "
                  f"(ratio {top_med / net_med:.2f}, limit 2)")
    assert ok


def test_criterion_8_determinism(tmp_path):
    data = tmp_path / "data"
    assert main(["generate", "--v", "10", "--days", "120", "--seed", "5", "--out", str(data)]) == 0
    digests = []
    for run in ("a", "b"):
        cfg = {"data": {"dir": str(data)}, "train": {"epochs": 20}, "output": {"dir": str(tmp_path / run)}}
        (tmp_path / f"{run}.yaml").write_text(yaml.safe_dump(cfg))
        assert main(["train", str(tmp_path / f"{run}.yaml")]) == 0
        digests.append(tuple(hashlib.sha256((tmp_path / run / name).read_bytes()).hexdigest()
                             for name in ("checkpoint.json", "metrics.csv")))
    ok = digests[0] == digests[1]
    record(8, ok, f"checkpoint and metrics sha256 equal across two runs: {ok}")
    assert ok
