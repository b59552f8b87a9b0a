"""Loss, optimizers, the training loop, evaluation metrics and a persistence baseline."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import DimensionError, Node, ParamStore
from .model import MSTGCN
from .preprocess import SampleSet

logger = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


class MetricError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    clip: float | None = 5.0
    patience: int | None = None
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def loss_mse(pred: Node, target) -> Node:
    target = dc.as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"loss_mse: prediction {pred.shape} vs target {target.shape}")
    return dc.mean_all(dc.square(dc.sub(pred, target)))


# ----------------------------------------------------------------------------
# optimizers


def clip_grads(params: ParamStore, threshold: float | None) -> float:
    """Scale all gradients so their global L2 norm is at most ``threshold``."""
    norm = float(np.sqrt(sum(float(np.sum(n.grad ** 2)) for _, n in params.items())))
    if threshold is not None and norm > threshold:
        factor = threshold / norm
        for _, n in params.items():
            n.grad = n.grad * factor
    return norm


class Optimizer:
    def __init__(self, params: ParamStore, cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(n.value) for k, n in params.items()}
        self.v = {k: np.zeros_like(n.value) for k, n in params.items()}

    def step(self) -> None:
        cfg = self.cfg
        for name, node in self.params.items():
            if node.grad is None:
                node.grad = np.zeros_like(node.value)
            if not np.all(np.isfinite(node.grad)):
                raise TrainingDiverged(f"non-finite gradient for parameter {name}")
        clip_grads(self.params, cfg.clip)
        self.t += 1
        for name, node in self.params.items():
            g = node.grad
            if cfg.optimizer == "sgd":
                node.value = node.value - cfg.lr * g
                continue
            m = self.m[name] = cfg.beta1 * self.m[name] + (1 - cfg.beta1) * g
            v = self.v[name] = cfg.beta2 * self.v[name] + (1 - cfg.beta2) * g * g
            m_hat = m / (1 - cfg.beta1 ** self.t)
            v_hat = v / (1 - cfg.beta2 ** self.t)
            node.value = node.value - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)


def step(params: ParamStore, cfg: TrainConfig, state: Optimizer | None = None) -> Optimizer:
    """One update from the populated grads. Pass back the returned state for Adam moments."""
    opt = state or Optimizer(params, cfg)
    opt.step()
    return opt


# ----------------------------------------------------------------------------
# training loop


@dataclass
class History:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int | None = None
    stopped_early: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def _batch_loss(model: MSTGCN, samples: SampleSet, idx) -> Node:
    ext = samples.externals[idx] if model.config.uses_external else None
    pred = model.forward(samples.inputs[idx], ext)
    return loss_mse(pred, samples.targets_norm[idx])


def evaluate_loss(model: MSTGCN, samples: SampleSet) -> float:
    return float(_batch_loss(model, samples, np.arange(len(samples))).value)


def fit(model: MSTGCN, samples: SampleSet, cfg: TrainConfig, val: SampleSet | None = None) -> History:
    """Mini-batch training on normalized targets.

    With ``cfg.patience`` and a validation set, training stops after that many
    epochs without validation improvement and the best parameters are restored.
    """
    if len(samples) == 0:
        raise ValueError("no training samples")
    rng = np.random.default_rng(cfg.seed)
    opt = Optimizer(model.params, cfg)
    hist = History()
    best, best_state, waited = np.inf, None, 0
    n = len(samples)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = np.sort(order[start:start + cfg.batch_size])
            model.params.zero_grad()
            loss = _batch_loss(model, samples, idx)
            lv = float(loss.value)
            if not np.isfinite(lv):
                raise TrainingDiverged(f"loss became non-finite at epoch {epoch}")
            dc.backward(loss)
            opt.step()
            total += lv * len(idx)
        hist.train_loss.append(total / n)
        if val is not None and len(val):
            vl = evaluate_loss(model, val)
            hist.val_loss.append(vl)
            if vl < best:
                best, best_state, waited = vl, model.params.state_dict(), 0
                hist.best_epoch = epoch
            elif cfg.patience is not None:
                waited += 1
                if waited >= cfg.patience:
                    hist.stopped_early = True
                    break
        logger.debug("epoch %d train %.6g", epoch, hist.train_loss[-1])
    if best_state is not None and cfg.patience is not None:
        model.params.load_state_dict(best_state)
    return hist


# ----------------------------------------------------------------------------
# metrics


@dataclass
class DayMetrics:
    rmse: float
    mape: float
    mae: float
    included: int
    excluded: int


def metrics(pred, truth) -> DayMetrics:
    """RMSE, MAPE (%) and MAE on raw-scale flows; MAPE skips zero-truth entries."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    truth = np.asarray(truth, dtype=np.float64).reshape(-1)
    if pred.shape != truth.shape:
        raise DimensionError(f"metrics: prediction {pred.shape} vs truth {truth.shape}")
    err = pred - truth
    ok = truth != 0
    if not ok.any():
        raise MetricError("MAPE undefined: every ground-truth value is zero")
    return DayMetrics(
        rmse=float(np.sqrt(np.mean(err ** 2))),
        mape=float(100.0 * np.mean(np.abs(err[ok] / truth[ok]))),
        mae=float(np.mean(np.abs(err))),
        included=int(ok.sum()),
        excluded=int((~ok).sum()),
    )


@dataclass
class EvalReport:
    """Per-day metrics and their averages over the evaluated days."""

    days: list[str]
    rmse: list[float]
    mape: list[float]
    mae: list[float]
    station_mape: list[float]
    excluded: int = 0
    clamped: int = 0

    @property
    def mean_rmse(self) -> float:
        return float(np.mean(self.rmse))

    @property
    def mean_mape(self) -> float:
        return float(np.mean(self.mape))

    @property
    def mean_mae(self) -> float:
        return float(np.mean(self.mae))

    def aggregate(self) -> dict:
        return {"rmse": self.mean_rmse, "mape": self.mean_mape, "mae": self.mean_mae,
                "excluded": self.excluded, "clamped": self.clamped}

    def rows(self, variant: str, seed: int) -> list[dict]:
        out = [{"variant": variant, "seed": seed, "day": d, "rmse": r, "mape": p, "mae": a}
               for d, r, p, a in zip(self.days, self.rmse, self.mape, self.mae)]
        agg = self.aggregate()
        out.append({"variant": variant, "seed": seed, "day": "all",
                    "rmse": agg["rmse"], "mape": agg["mape"], "mae": agg["mae"]})
        return out


def evaluate(pred, truth, days: Sequence[str] | None = None, clamped: int = 0) -> EvalReport:
    """Build a report from ``[N, V, f]`` raw predictions and truths, one row per sample."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 3:
        raise DimensionError(f"evaluate: expected matching [N, V, f], got {pred.shape} and {truth.shape}")
    n = pred.shape[0]
    days = list(days) if days is not None else [str(i) for i in range(n)]
    per_day = [metrics(pred[i], truth[i]) for i in range(n)]
    with np.errstate(divide="ignore", invalid="ignore"):
        ape = np.abs((pred - truth) / truth)
    ape = np.where(truth != 0, ape, np.nan)
    station = np.nanmean(ape.transpose(1, 0, 2).reshape(pred.shape[1], -1), axis=1) * 100.0
    return EvalReport(
        days=days,
        rmse=[m.rmse for m in per_day],
        mape=[m.mape for m in per_day],
        mae=[m.mae for m in per_day],
        station_mape=[float(x) for x in station],
        excluded=sum(m.excluded for m in per_day),
        clamped=clamped,
    )


def persistence_forecast(samples: SampleSet) -> np.ndarray:
    """Repeat the last observed day for every step of the horizon."""
    if samples.f > samples.h:
        raise ValueError("persistence needs f <= h")
    last = samples.raw_inputs[:, :, -1:]
    return np.repeat(last, samples.f, axis=2)


def naive_baseline(samples: SampleSet, days: Sequence[str] | None = None) -> EvalReport:
    return evaluate(persistence_forecast(samples), samples.targets, days)
