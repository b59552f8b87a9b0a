"""Hold-out evaluation and the variant ablation runner."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from sklearn.base import clone

from .data import Dataset
from .diffcore import WindowError
from .estimator import MSTGCNForecaster
from .model import VARIANT_GRAPHS
from .preprocess import make_windows
from .train import EvalReport, naive_baseline

logger = logging.getLogger(__name__)

METRICS = ("rmse", "mape", "mae")


def train_span(ds: Dataset, test_days: int, h: int, f: int) -> int:
    """Number of leading days used for fitting; the last ``test_days`` are held out."""
    n_train = ds.n_days - test_days
    if test_days < 1 or n_train < h + f:
        raise WindowError(f"{ds.n_days} days cannot hold h+f={h + f} training days plus {test_days} test days")
    return n_train


def fit_holdout(est: MSTGCNForecaster, ds: Dataset, test_days: int = 15) -> tuple[MSTGCNForecaster, EvalReport]:
    """Fit on everything before the last ``test_days`` days and score the windows ending in them.

    λ and the station statistics only ever see the training span.
    """
    n_train = train_span(ds, test_days, est.h, est.f)
    ext = ds.external_features()
    geo = ds.geographic() if "geographic" in _graphs(est) else None
    inf = ds.influential() if "influential" in _graphs(est) else None
    est.fit(ds.flows[:, :n_train], ext=ext[:, :n_train], geographic=geo, influential=inf)
    report = est.evaluate(ds.flows, ext, n_train, days=[d.isoformat() for d in ds.days])
    return est, report


def baseline_holdout(ds: Dataset, h: int, f: int, test_days: int = 15) -> EvalReport:
    n_train = train_span(ds, test_days, h, f)
    samples = make_windows(ds.flows, ds.external_features(), h, f)
    test = samples.subset(np.flatnonzero(samples.start + h >= n_train))
    return naive_baseline(test, [ds.days[s + h].isoformat() for s in test.start])


def _graphs(est: MSTGCNForecaster) -> tuple[str, ...]:
    return VARIANT_GRAPHS[est.variant]


@dataclass
class AblationResult:
    runs: list[tuple[str, int, EvalReport]] = field(default_factory=list)
    baseline: EvalReport | None = None

    @property
    def variants(self) -> list[str]:
        seen = []
        for v, _, _ in self.runs:
            if v not in seen:
                seen.append(v)
        return seen

    def median(self, variant: str, metric: str) -> float:
        vals = [r.aggregate()[metric] for v, _, r in self.runs if v == variant]
        return float(np.median(vals))

    def table(self) -> list[dict]:
        """One row per variant with median metrics over seeds."""
        rows = []
        for v in self.variants:
            n = sum(1 for name, _, _ in self.runs if name == v)
            rows.append({"variant": v, "runs": n, **{m: self.median(v, m) for m in METRICS}})
        return rows

    def metric_rows(self) -> list[dict]:
        rows = []
        for v, seed, rep in self.runs:
            rows.extend(rep.rows(v, seed))
        if self.baseline is not None:
            rows.extend(self.baseline.rows("persistence", -1))
        return rows

    def to_json(self) -> dict:
        """Plot-ready summary.

        Schema::

            {"metrics": ["rmse", "mape", "mae"],
             "variants": [{"variant": str, "median": {metric: float},
                           "runs": [{"seed": int, metric: float, ...,
                                     "station_mape": [float, ...]}]}],
             "baseline": {metric: float} | null}
        """
        out = {"metrics": list(METRICS), "variants": [], "baseline": None}
        for v in self.variants:
            runs = [{"seed": seed, **{m: rep.aggregate()[m] for m in METRICS}, "station_mape": rep.station_mape}
                    for name, seed, rep in self.runs if name == v]
            out["variants"].append({"variant": v, "median": {m: self.median(v, m) for m in METRICS}, "runs": runs})
        if self.baseline is not None:
            out["baseline"] = {m: self.baseline.aggregate()[m] for m in METRICS}
        return out


def run_ablation(ds: Dataset, base: MSTGCNForecaster, variants: Sequence[str], seeds: Sequence[int],
                 test_days: int = 15) -> AblationResult:
    """Train every (variant, seed) pair on the same split and collect hold-out reports."""
    if not seeds:
        raise ValueError("need at least one seed")
    result = AblationResult()
    for variant in variants:
        for seed in seeds:
            est = clone(base).set_params(variant=variant, seed=int(seed))
            _, report = fit_holdout(est, ds, test_days)
            logger.info("%s seed %d: mape %.3f rmse %.3f", variant, seed, report.mean_mape, report.mean_rmse)
            result.runs.append((variant, int(seed), report))
    result.baseline = baseline_holdout(ds, base.h, base.f, test_days)
    return result
