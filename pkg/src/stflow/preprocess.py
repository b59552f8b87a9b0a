"""Feature processing: Box-Cox normalization, external factor encoding, windowing."""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .diffcore import WindowError

EXTREME_WEATHER = frozenset({"heavy rain", "heavy fog", "strong wind", "heavy snow"})
NORMAL_WEATHER = frozenset({
    "clear", "sunny", "cloudy", "overcast", "light rain", "moderate rain", "drizzle",
    "fog", "light fog", "haze", "wind", "light snow", "moderate snow",
})
WEATHER_VOCABULARY = EXTREME_WEATHER | NORMAL_WEATHER

WORKDAY, HOLIDAY, WEEKEND = 0, 1, 2

DEFAULT_GRID = (-2.0, 2.0, 0.01)


class DomainError(ValueError):
    """Input lies outside the domain of the transform."""


class DegenerateError(ValueError):
    """Statistic is undefined for the given data."""


class UnknownWeatherError(KeyError):
    pass


@dataclass
class FlowPanel:
    """Daily flows, ``values[v, d]`` for station ``stations[v]`` on ``days[d]``."""

    stations: list[str]
    days: list[dt.date]
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.stations), len(self.days)):
            raise ValueError(f"values shape {self.values.shape} != ({len(self.stations)}, {len(self.days)})")
        if np.any(~np.isfinite(self.values)) or np.any(self.values < 0):
            raise ValueError("flows must be finite and non-negative")
        for a, b in zip(self.days, self.days[1:]):
            if (b - a).days != 1:
                raise ValueError(f"days not contiguous between {a} and {b}")

    @property
    def n_stations(self) -> int:
        return len(self.stations)

    @property
    def n_days(self) -> int:
        return len(self.days)


@dataclass
class ExternalPanel:
    weather: np.ndarray  # [V, D] in {0, 1}
    calendar: np.ndarray  # [D] in {0, 1, 2}

    def __post_init__(self):
        self.weather = np.asarray(self.weather, dtype=np.int64)
        self.calendar = np.asarray(self.calendar, dtype=np.int64)
        if self.weather.ndim != 2 or self.calendar.shape != (self.weather.shape[1],):
            raise ValueError(f"weather {self.weather.shape} and calendar {self.calendar.shape} disagree")
        if not np.isin(self.weather, (0, 1)).all():
            raise ValueError("weather labels must be 0 or 1")
        if not np.isin(self.calendar, (WORKDAY, HOLIDAY, WEEKEND)).all():
            raise ValueError("calendar labels must be 0, 1 or 2")

    def features(self) -> np.ndarray:
        """``[V, D, 2]`` array of (weather, calendar) labels."""
        v, d = self.weather.shape
        cal = np.broadcast_to(self.calendar[None, :], (v, d))
        return np.stack([self.weather, cal], axis=-1).astype(np.float64)


@dataclass
class NormalizationState:
    lam: float
    shift: float = 0.0
    topk_days: list[int] = field(default_factory=list)
    vital_few: list[int] = field(default_factory=list)
    center: list[float] | None = None
    scale: list[float] | None = None


@dataclass
class SampleSet:
    inputs: np.ndarray  # [N, V, h] normalized
    externals: np.ndarray  # [N, V, h, 2]
    targets: np.ndarray  # [N, V, f] raw scale
    targets_norm: np.ndarray  # [N, V, f] normalized
    raw_inputs: np.ndarray  # [N, V, h] raw scale
    start: np.ndarray  # [N] first input day index of each sample
    h: int
    f: int

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def subset(self, idx) -> "SampleSet":
        idx = np.asarray(idx)
        return SampleSet(self.inputs[idx], self.externals[idx], self.targets[idx],
                         self.targets_norm[idx], self.raw_inputs[idx], self.start[idx], self.h, self.f)


# ----------------------------------------------------------------------------
# Box-Cox


# below this |λ| the power form loses all precision; its limit is the log
LOG_LIMIT = 1e-12


def boxcox_forward(y, state: NormalizationState) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    shifted = y + state.shift
    if np.any(shifted <= 0):
        where = np.argwhere(shifted <= 0)[0]
        raise DomainError(f"Box-Cox input must be positive after shift; offending (station, day) index {tuple(int(i) for i in where)}")
    logy = np.log(shifted)
    if abs(state.lam) < LOG_LIMIT:
        return logy
    return np.expm1(state.lam * logy) / state.lam


def boxcox_inverse(z, state: NormalizationState, clamp: bool = False) -> np.ndarray:
    """Map normalized values back to flows.

    With ``clamp`` set, entries outside the invertible region (``1 + λz <= 0``)
    are pinned to ``-shift`` (zero flow before shift) instead of raising.
    """
    z = np.asarray(z, dtype=np.float64)
    lam = state.lam
    if abs(lam) < LOG_LIMIT:
        return np.exp(z) - state.shift
    base = 1.0 + lam * z
    bad = base <= 0
    if np.any(bad):
        if not clamp:
            raise DomainError(f"1 + lambda*z <= 0 for {int(bad.sum())} value(s); prediction outside invertible region")
        out = np.exp(np.log1p(np.where(bad, 0.0, lam * z)) / lam) - state.shift
        return np.where(bad, 0.0, out)
    return np.exp(np.log1p(lam * z) / lam) - state.shift


def boxcox_llf(lam: float, y: np.ndarray) -> float:
    """Profile log-likelihood of the Box-Cox model for positive ``y``."""
    logy = np.log(y)
    n = logy.size
    if abs(lam) < LOG_LIMIT:
        transformed = logy
    else:
        transformed = np.expm1(lam * logy) / lam
    var = np.mean((transformed - transformed.mean()) ** 2)
    return (lam - 1.0) * logy.sum() - 0.5 * n * np.log(var)


def lambda_grid(lo: float = -2.0, hi: float = 2.0, step: float = 0.01) -> np.ndarray:
    if step <= 0 or hi < lo:
        raise ValueError(f"bad lambda grid ({lo}, {hi}, {step})")
    n = int(round((hi - lo) / step)) + 1
    return np.round(lo + step * np.arange(n), 10)


def select_topk_days(values: np.ndarray, k: int) -> list[int]:
    """Days ranked by their largest single-station flow; ties go to the earlier day."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("empty panel")
    d = values.shape[1]
    if not 1 <= k <= d:
        raise ValueError(f"K must lie in [1, {d}], got {k}")
    peaks = values.max(axis=0)
    order = np.lexsort((np.arange(d), -peaks))
    return [int(i) for i in order[:k]]


def fit_lambda(values: np.ndarray, k: int = 5, grid: np.ndarray | None = None,
               shift: float | None = None) -> NormalizationState:
    """Grid-search the Box-Cox λ on the top-K peak days.

    ``shift`` defaults to 1 when any flow is zero, else 0.
    """
    values = np.asarray(values, dtype=np.float64)
    if grid is None:
        grid = lambda_grid(*DEFAULT_GRID)
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size == 0:
        raise ValueError("empty lambda grid")
    days = select_topk_days(values, k)
    if shift is None:
        shift = 1.0 if np.any(values == 0) else 0.0
    sample = values[:, days].reshape(-1) + shift
    if np.ptp(sample) == 0:
        raise DegenerateError("all values identical; Box-Cox likelihood has no maximum")
    scores = np.array([boxcox_llf(lam, sample) for lam in grid])
    best = float(grid[int(np.argmax(scores))])
    return NormalizationState(lam=best, shift=shift, topk_days=days)


def detect_vital_few(values: np.ndarray, topk_days: Sequence[int]) -> list[int]:
    """Stations whose mean flow over the peak days exceeds mean + 3 sigma of the rest.

    Each station is scored against the other stations' peak-day means. With
    itself included, one outlier among n stations can never reach a z-score
    above (n - 1) / sqrt(n), which would mask it for n <= 10.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] < 2:
        raise DegenerateError("need at least two stations for the three-sigma rule")
    if len(topk_days) == 0:
        raise ValueError("topk_days is empty")
    means = values[:, list(topk_days)].mean(axis=1)
    vital = []
    for i in range(means.size):
        rest = np.delete(means, i)
        if means[i] > rest.mean() + 3.0 * rest.std():
            vital.append(i)
    return vital


class BoxCoxNormalizer(TransformerMixin, BaseEstimator):
    """Box-Cox transform with a single λ fitted on the top-K peak days.

    Fitted on ``[V, D]`` flow panels (stations in rows). ``transform`` and
    ``inverse_transform`` accept any array whose second-to-last axis is the
    station axis, e.g. ``[V, D]`` or ``[N, V, h]``.

    Parameters
    ----------
    k : int
        Number of peak days used in the likelihood search (1..5).
    grid : tuple
        ``(lo, hi, step)`` for the λ search.
    shift : "auto" or float
        Offset added before transforming; "auto" uses 1 if any zero flow exists.
    standardize : bool
        Center and scale each station's transformed series by its fitted mean
        and standard deviation.
    enabled : bool
        When False the transform is the identity (no feature processing).
    """

    def __init__(self, k: int = 5, grid: tuple = DEFAULT_GRID, shift="auto", standardize: bool = True,
                 enabled: bool = True):
        self.k = k
        self.grid = grid
        self.shift = shift
        self.standardize = standardize
        self.enabled = enabled

    def fit(self, X, y=None):
        X = check_array(X, ensure_min_samples=1, ensure_min_features=1)
        if np.any(X < 0):
            raise DomainError("flows must be non-negative")
        if not 1 <= self.k <= 5:
            raise ValueError(f"k must lie in 1..5, got {self.k}")
        k = min(self.k, X.shape[1])
        if self.enabled:
            shift = None if self.shift == "auto" else float(self.shift)
            state = fit_lambda(X, k, lambda_grid(*self.grid), shift=shift)
            if self.standardize:
                z = boxcox_forward(X, state)
                sd = z.std(axis=1)
                state.center = [float(c) for c in z.mean(axis=1)]
                state.scale = [float(s) if s > 0 else 1.0 for s in sd]
        else:
            state = NormalizationState(lam=1.0, shift=0.0, topk_days=select_topk_days(X, k))
        state.vital_few = detect_vital_few(X, state.topk_days) if X.shape[0] >= 2 else []
        self.state_ = state
        self.lambda_ = state.lam
        self.shift_ = state.shift
        self.topk_days_ = state.topk_days
        self.vital_few_ = state.vital_few
        return self

    @classmethod
    def from_state(cls, state: NormalizationState, enabled: bool = True, **params) -> "BoxCoxNormalizer":
        norm = cls(enabled=enabled, standardize=state.center is not None, **params)
        norm.state_ = state
        norm.lambda_, norm.shift_ = state.lam, state.shift
        norm.topk_days_, norm.vital_few_ = state.topk_days, state.vital_few
        return norm

    def _affine(self):
        st = self.state_
        if st.center is None:
            return None
        return np.asarray(st.center)[:, None], np.asarray(st.scale)[:, None]

    def transform(self, X):
        check_is_fitted(self, "state_")
        X = np.asarray(X, dtype=np.float64)
        if not self.enabled:
            return X.copy()
        z = boxcox_forward(X, self.state_)
        aff = self._affine()
        return z if aff is None else (z - aff[0]) / aff[1]

    def _unscale(self, X):
        X = np.asarray(X, dtype=np.float64)
        aff = self._affine()
        return X if aff is None else X * aff[1] + aff[0]

    def inverse_transform(self, X, clamp: bool = False):
        check_is_fitted(self, "state_")
        X = np.asarray(X, dtype=np.float64)
        if not self.enabled:
            return X.copy()
        return boxcox_inverse(self._unscale(X), self.state_, clamp=clamp)

    def n_out_of_domain(self, X) -> int:
        """How many normalized values fall outside the invertible region."""
        check_is_fitted(self, "state_")
        if not self.enabled or abs(self.state_.lam) < LOG_LIMIT:
            return 0
        return int(np.sum(1.0 + self.state_.lam * self._unscale(X) <= 0))


# ----------------------------------------------------------------------------
# external factors


def encode_weather(condition: str, strict: bool = True) -> int:
    token = " ".join(condition.strip().lower().replace("_", " ").split())
    if token in EXTREME_WEATHER:
        return 1
    if token in NORMAL_WEATHER:
        return 0
    if strict:
        raise UnknownWeatherError(f"unknown weather condition {condition!r}")
    return 0


def encode_calendar(date: dt.date, holidays: Iterable[dt.date] = ()) -> int:
    # holiday wins over weekend
    if date in set(holidays):
        return HOLIDAY
    if date.weekday() >= 5:
        return WEEKEND
    return WORKDAY


def encode_external(condition: str, date, holidays: Iterable[dt.date] = (), strict: bool = True) -> tuple[int, int]:
    if isinstance(date, str):
        date = dt.date.fromisoformat(date)
    return encode_weather(condition, strict), encode_calendar(date, holidays)


def calendar_labels(days: Sequence[dt.date], holidays: Iterable[dt.date] = ()) -> np.ndarray:
    hol = set(holidays)
    return np.array([encode_calendar(d, hol) for d in days], dtype=np.int64)


# ----------------------------------------------------------------------------
# windowing


def make_windows(normalized: np.ndarray, ext: np.ndarray, h: int, f: int,
                 raw: np.ndarray | None = None) -> SampleSet:
    """Slide an ``h``-day input / ``f``-day target window over ``[V, D]`` panels.

    ``ext`` is ``[V, D, 2]``. ``raw`` holds the untransformed flows used as
    metric targets; defaults to ``normalized`` itself.
    """
    normalized = np.asarray(normalized, dtype=np.float64)
    ext = np.asarray(ext, dtype=np.float64)
    raw = normalized if raw is None else np.asarray(raw, dtype=np.float64)
    if h < 1 or f < 1:
        raise ValueError(f"h and f must be positive, got h={h}, f={f}")
    v, d = normalized.shape
    if ext.shape != (v, d, 2) or raw.shape != (v, d):
        raise ValueError(f"panel shapes disagree: flows {normalized.shape}, ext {ext.shape}, raw {raw.shape}")
    n = d - h - f + 1
    if n < 1:
        raise WindowError(f"need at least h+f={h + f} days, have {d}")
    starts = np.arange(n)
    inp = np.stack([normalized[:, s:s + h] for s in starts])
    exts = np.stack([ext[:, s:s + h, :] for s in starts])
    tgt = np.stack([raw[:, s + h:s + h + f] for s in starts])
    tgt_n = np.stack([normalized[:, s + h:s + h + f] for s in starts])
    raw_in = np.stack([raw[:, s:s + h] for s in starts])
    return SampleSet(inp, exts, tgt, tgt_n, raw_in, starts, h, f)
