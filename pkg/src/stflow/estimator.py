"""scikit-learn style estimators around the MSTGCN network.

:class:`MSTGCNRegressor` learns normalized windows -> normalized targets.
:class:`MSTGCNForecaster` adds the Box-Cox stage and works on raw ``[V, D]``
flow panels, which is what the CLI and the ablation runner drive.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.metrics import r2_score
from sklearn.utils.validation import check_is_fitted

from .diffcore import DimensionError
from .model import MSTGCN, ModelConfig
from .preprocess import BoxCoxNormalizer, SampleSet, make_windows
from .train import EvalReport, TrainConfig, evaluate, fit


def _check_3d(X, name: str) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 4 and X.shape[-1] == 1:
        X = X[..., 0]
    if X.ndim != 3:
        raise DimensionError(f"{name} must be [n_samples, n_stations, steps], got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains NaN or Inf")
    return X


class MSTGCNRegressor(RegressorMixin, BaseEstimator):
    """Multi-graph spatio-temporal GCN on pre-normalized sliding windows.

    ``fit(X, y, ext=..., geographic=..., influential=...)`` with ``X`` of shape
    ``[N, V, h]``, ``y`` of shape ``[N, V, f]`` and ``ext`` of shape
    ``[N, V, h, 2]``. The geographic/influential adjacencies are ``[V, V]``.
    """

    def __init__(self, h=15, f=1, m=3, c_out=64, c_sout=16, variant="full", tie_glu_kernels=False,
                 elastic_nonneg="abs", optimizer="adam", lr=1e-3, epochs=100, batch_size=16, clip=5.0,
                 patience=None, val_fraction=0.1, seed=0):
        self.h = h
        self.f = f
        self.m = m
        self.c_out = c_out
        self.c_sout = c_sout
        self.variant = variant
        self.tie_glu_kernels = tie_glu_kernels
        self.elastic_nonneg = elastic_nonneg
        self.optimizer = optimizer
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.clip = clip
        self.patience = patience
        self.val_fraction = val_fraction
        self.seed = seed

    def _model_config(self, n_stations: int) -> ModelConfig:
        return ModelConfig(n_stations=n_stations, h=self.h, f=self.f, m=self.m, c_out=self.c_out,
                           c_sout=self.c_sout, variant=self.variant, seed=self.seed,
                           tie_glu_kernels=self.tie_glu_kernels, elastic_nonneg=self.elastic_nonneg)

    def _train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, lr=self.lr, optimizer=self.optimizer, batch_size=self.batch_size,
                           clip=self.clip, patience=self.patience, val_fraction=self.val_fraction, seed=self.seed)

    def build(self, n_stations: int, geographic=None, influential=None) -> MSTGCN:
        """Construct an untrained network; used by ``fit`` and checkpoint loading."""
        self.model_ = MSTGCN(self._model_config(n_stations), geographic, influential)
        self.n_stations_ = n_stations
        return self.model_

    def fit(self, X, y, ext=None, geographic=None, influential=None):
        X = _check_3d(X, "X")
        y = _check_3d(y, "y")
        n, v, h = X.shape
        if h != self.h:
            raise DimensionError(f"X has {h} input steps, estimator expects h={self.h}")
        if y.shape != (n, v, self.f):
            raise DimensionError(f"y must be {(n, v, self.f)}, got {y.shape}")
        if ext is None:
            if self.variant != "nonE":
                raise ValueError(f"variant {self.variant!r} needs ext")
            ext = np.zeros((n, v, h, 2))
        ext = np.asarray(ext, dtype=np.float64)
        if ext.shape != (n, v, h, 2):
            raise DimensionError(f"ext must be {(n, v, h, 2)}, got {ext.shape}")
        cfg = self._train_config()
        model = self.build(v, geographic, influential)

        samples = SampleSet(X, ext, y, y, X, np.arange(n), h, self.f)
        val = None
        if self.patience is not None and n >= 2:
            # hold out the latest windows by date
            n_val = max(1, int(round(self.val_fraction * n)))
            val = samples.subset(np.arange(n - n_val, n))
            samples = samples.subset(np.arange(n - n_val))
        self.history_ = fit(model, samples, cfg, val)
        return self

    def predict(self, X, ext=None):
        check_is_fitted(self, "model_")
        X = _check_3d(X, "X")
        if ext is None and self.model_.config.uses_external:
            raise ValueError(f"variant {self.variant!r} needs ext")
        return self.model_.predict(X, ext)

    def score(self, X, y, ext=None, sample_weight=None):
        y = _check_3d(y, "y")
        return r2_score(y.reshape(-1), self.predict(X, ext).reshape(-1), sample_weight=sample_weight)


class MSTGCNForecaster(MSTGCNRegressor):
    """End-to-end forecaster on raw flows: Box-Cox, windowing, MSTGCN, inverse.

    Extra parameters
    ----------------
    k : int
        Peak days used to fit the Box-Cox λ.
    lambda_grid : tuple
        ``(lo, hi, step)`` of the λ search.
    shift : "auto" or float
        Offset added before the transform.
    standardize : bool
        Per-station centering and scaling after the transform.

    The ``nonT`` variant skips the Box-Cox stage and trains on raw flows.
    """

    def __init__(self, h=15, f=1, m=3, c_out=64, c_sout=16, variant="full", tie_glu_kernels=False,
                 elastic_nonneg="abs", optimizer="adam", lr=1e-3, epochs=100, batch_size=16, clip=5.0,
                 patience=None, val_fraction=0.1, seed=0, k=5, lambda_grid=(-2.0, 2.0, 0.01), shift="auto",
                 standardize=True):
        super().__init__(h=h, f=f, m=m, c_out=c_out, c_sout=c_sout, variant=variant,
                         tie_glu_kernels=tie_glu_kernels, elastic_nonneg=elastic_nonneg, optimizer=optimizer,
                         lr=lr, epochs=epochs, batch_size=batch_size, clip=clip, patience=patience,
                         val_fraction=val_fraction, seed=seed)
        self.k = k
        self.lambda_grid = lambda_grid
        self.shift = shift
        self.standardize = standardize

    def make_normalizer(self) -> BoxCoxNormalizer:
        return BoxCoxNormalizer(k=self.k, grid=tuple(self.lambda_grid), shift=self.shift,
                                standardize=self.standardize, enabled=self.variant != "nonT")

    def windows(self, flows, ext) -> SampleSet:
        check_is_fitted(self, "normalizer_")
        flows = np.asarray(flows, dtype=np.float64)
        return make_windows(self.normalizer_.transform(flows), ext, self.h, self.f, raw=flows)

    def fit(self, X, y=None, ext=None, geographic=None, influential=None):
        """Fit on a raw ``[V, D]`` panel ``X`` with ``[V, D, 2]`` external labels ``ext``."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2:
            raise DimensionError(f"X must be a [V, D] flow panel, got {X.shape}")
        if ext is None:
            ext = np.zeros(X.shape + (2,))
        self.normalizer_ = self.make_normalizer().fit(X)
        samples = self.windows(X, ext)
        super().fit(samples.inputs, samples.targets_norm, ext=samples.externals,
                    geographic=geographic, influential=influential)
        return self

    def predict(self, X, ext=None, return_clamped: bool = False):
        """Raw-scale ``[(N,) V, f]`` forecasts from raw ``[(N,) V, h]`` histories."""
        check_is_fitted(self, "model_")
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 2
        if single:
            X = X[None]
            ext = None if ext is None else np.asarray(ext)[None]
        if ext is None:
            ext = np.zeros(X.shape + (2,))
        z = MSTGCNRegressor.predict(self, self.normalizer_.transform(X), ext)
        clamped = self.normalizer_.n_out_of_domain(z)
        out = self.normalizer_.inverse_transform(z, clamp=True)
        out = out[0] if single else out
        return (out, clamped) if return_clamped else out

    def evaluate(self, flows, ext, first_target: int, days=None) -> EvalReport:
        """Score every window whose first target day index is ``>= first_target``.

        ``days`` labels the panel's day axis (e.g. ISO dates) for the report.
        """
        flows = np.asarray(flows, dtype=np.float64)
        samples = make_windows(flows, ext, self.h, self.f)
        keep = np.flatnonzero(samples.start + self.h >= first_target)
        if keep.size == 0:
            raise ValueError("no evaluation windows in the requested span")
        test = samples.subset(keep)
        pred, clamped = self.predict(test.raw_inputs, test.externals, return_clamped=True)
        labels = None
        if days is not None:
            labels = [str(days[s + self.h]) for s in test.start]
        return evaluate(pred, test.targets, labels, clamped=clamped)
