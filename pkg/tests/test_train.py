import numpy as np
import pytest

from stflow import diffcore as dc
from stflow import train as tr
from stflow.diffcore import ParamStore
from stflow.model import MSTGCN, ModelConfig
from stflow.preprocess import make_windows
from stflow.train import TrainConfig

from oracles import central_difference, persistence_scalar


def toy_model(seed=0, v=4):
    cfg = ModelConfig(n_stations=v, h=5, f=1, m=2, c_out=4, c_sout=2, seed=seed)
    geo = np.ones((v, v)) - np.eye(v)
    return MSTGCN(cfg, geographic=geo, influential=geo / (v - 1))


def toy_samples(v=4, d=14, seed=0):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(v, d))
    ext = rng.integers(0, 2, size=(v, d, 2)).astype(float)
    return make_windows(z, ext, 5, 1)


def test_loss_mse_examples():
    pred = dc.constant(np.ones((3, 1)))
    assert tr.loss_mse(pred, np.ones((3, 1))).value == 0.0
    assert tr.loss_mse(pred, np.ones((3, 1)) - 0.5).value == pytest.approx(0.25)


def test_loss_mse_gradient():
    ps = ParamStore()
    target = np.array([[1.0], [-2.0], [0.5]])
    p = ps.add("p", [[0.3], [0.1], [2.0]])
    dc.backward(tr.loss_mse(p, target))
    np.testing.assert_allclose(p.grad, 2 * (p.value - target) / 3, atol=1e-15)
    fd = central_difference(lambda x: np.mean((x - target) ** 2), p.value)
    np.testing.assert_allclose(p.grad, fd, atol=1e-8)


def test_sgd_step_example():
    ps = ParamStore()
    p = ps.add("p", [1.0])
    p.grad = np.array([0.5])
    tr.step(ps, TrainConfig(optimizer="sgd", lr=0.1, clip=None))
    assert p.value[0] == pytest.approx(0.95)


def test_zero_grad_keeps_params():
    ps = ParamStore()
    p = ps.add("p", [1.0, -2.0])
    for opt in ("sgd", "adam"):
        ps.zero_grad()
        tr.step(ps, TrainConfig(optimizer=opt, lr=0.1))
        np.testing.assert_array_equal(p.value, [1.0, -2.0])


def test_clip_threshold():
    ps = ParamStore()
    p = ps.add("p", [0.0])
    p.grad = np.array([10.0])
    tr.step(ps, TrainConfig(optimizer="sgd", lr=1.0, clip=1.0))
    assert p.value[0] == pytest.approx(-1.0)


def test_nonfinite_gradient_raises():
    ps = ParamStore()
    ps.add("w", [1.0]).grad = np.array([np.nan])
    with pytest.raises(tr.TrainingDiverged, match="w"):
        tr.step(ps, TrainConfig())


def test_fit_memorizes_one_sample():
    samples = toy_samples(d=6)
    assert len(samples) == 1
    hist = tr.fit(toy_model(), samples, TrainConfig(epochs=300, lr=1e-2, batch_size=1))
    assert hist.train_loss[-1] < 1e-3


def test_fit_deterministic():
    samples = toy_samples()
    cfg = TrainConfig(epochs=5, batch_size=3, seed=7)
    a, b = toy_model(seed=1), toy_model(seed=1)
    assert tr.fit(a, samples, cfg).train_loss == tr.fit(b, samples, cfg).train_loss
    for (_, x), (_, y) in zip(a.params.items(), b.params.items()):
        np.testing.assert_array_equal(x.value, y.value)


def test_fit_zero_lr_flat():
    hist = tr.fit(toy_model(), toy_samples(), TrainConfig(epochs=4, lr=0.0, optimizer="sgd"))
    assert len(set(hist.train_loss)) == 1


def test_early_stopping_restores_best():
    samples = toy_samples(d=30)
    val = samples.subset(np.arange(20, len(samples)))
    train = samples.subset(np.arange(20))
    model = toy_model()
    hist = tr.fit(model, train, TrainConfig(epochs=60, lr=3e-2, patience=3), val=val)
    assert hist.best_epoch is not None
    assert tr.evaluate_loss(model, val) == pytest.approx(min(hist.val_loss))


def test_metrics_examples():
    m = tr.metrics([110.0, 190.0], [100.0, 200.0])
    assert (m.mae, m.rmse, m.mape) == (pytest.approx(10.0), pytest.approx(10.0), pytest.approx(7.5))
    z = tr.metrics([3.0, 4.0], [3.0, 4.0])
    assert (z.rmse, z.mape, z.mae) == (0.0, 0.0, 0.0)


def test_metrics_permutation_invariant():
    rng = np.random.default_rng(0)
    p, t = rng.uniform(1, 9, 20), rng.uniform(1, 9, 20)
    perm = rng.permutation(20)
    a, b = tr.metrics(p, t), tr.metrics(p[perm], t[perm])
    assert a.rmse == pytest.approx(b.rmse) and a.mape == pytest.approx(b.mape) and a.mae == pytest.approx(b.mae)


def test_metrics_zero_truth():
    m = tr.metrics([1.0, 5.0], [0.0, 4.0])
    assert m.excluded == 1 and m.mape == pytest.approx(25.0)
    with pytest.raises(tr.MetricError):
        tr.metrics([1.0], [0.0])


def test_baseline_constant_and_ramp():
    const = np.full((3, 12), 7.0)
    ext = np.zeros((3, 12, 2))
    rep = tr.naive_baseline(make_windows(const, ext, 5, 1))
    assert rep.mean_rmse == 0.0 and rep.mean_mae == 0.0
    ramp = np.tile(10.0 + 2.5 * np.arange(12), (3, 1))
    assert tr.naive_baseline(make_windows(ramp, ext, 5, 1)).mean_mae == pytest.approx(2.5)


def test_baseline_matches_scalar_oracle():
    rng = np.random.default_rng(3)
    flows = rng.uniform(50, 500, size=(6, 30))
    rep = tr.naive_baseline(make_windows(flows, np.zeros((6, 30, 2)), 7, 2))
    ref = persistence_scalar(flows, 7, 2)
    np.testing.assert_allclose(rep.rmse, [r for r, _ in ref], rtol=1e-12)
    np.testing.assert_allclose(rep.mae, [a for _, a in ref], rtol=1e-12)


def test_report_rows_and_station_mape():
    pred = np.array([[[110.0], [50.0]], [[90.0], [50.0]]])
    truth = np.array([[[100.0], [50.0]], [[100.0], [0.0]]])
    rep = tr.evaluate(pred, truth, ["d1", "d2"])
    np.testing.assert_allclose(rep.station_mape, [10.0, 0.0])
    rows = rep.rows("full", 0)
    assert [r["day"] for r in rows] == ["d1", "d2", "all"]
    assert rows[-1]["mape"] == pytest.approx(np.mean(rep.mape))
