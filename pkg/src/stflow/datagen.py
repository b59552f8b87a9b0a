"""Seeded synthetic highway networks and long-tail daily flow panels.

Every multiplicative effect applied to a station-day is kept in the returned
effect log, so tests can replay the panel from its factors exactly.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field

import numpy as np

from .graphs import StationProfile, distance_matrix
from .preprocess import EXTREME_WEATHER, ExternalPanel, FlowPanel, calendar_labels

NORMAL_CONDITIONS = ("clear", "cloudy", "overcast", "light rain")
EXTREME_CONDITIONS = tuple(sorted(EXTREME_WEATHER))


@dataclass
class GenSpec:
    n_stations: int = 50
    n_days: int = 200
    seed: int = 0
    alpha: float = 1.2
    base_scale: float = 500.0
    weekend_range: tuple[float, float] = (1.0, 1.6)
    holidays: tuple[dt.date, ...] = ()
    weather_prob: float = 0.08
    suppression: float = 0.5
    coupling: float = 0.2
    noise: float = 0.05
    start: dt.date = dt.date(2017, 5, 1)
    weekday_profile: tuple[float, ...] = (1.0, 0.97, 0.98, 1.0, 1.06, 1.0, 1.0)

    def __post_init__(self):
        if self.n_stations < 2:
            raise ValueError("n_stations must be >= 2")
        if self.n_days < 1:
            raise ValueError("n_days must be >= 1")
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        lo, hi = self.weekend_range
        if not 0 < lo <= hi:
            raise ValueError("weekend_range must satisfy 0 < lo <= hi")
        if not 0.0 <= self.weather_prob <= 1.0:
            raise ValueError("weather_prob must lie in [0, 1]")
        if not 0.0 < self.suppression <= 1.0:
            raise ValueError("suppression must lie in (0, 1]")
        if not 0.0 <= self.coupling < 1.0:
            raise ValueError("coupling must lie in [0, 1)")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if len(self.weekday_profile) != 7 or min(self.weekday_profile) <= 0:
            raise ValueError("weekday_profile needs 7 positive factors")

    @property
    def days(self) -> list[dt.date]:
        return [self.start + dt.timedelta(days=i) for i in range(self.n_days)]


@dataclass
class Network:
    profiles: list[StationProfile]
    edges: list[tuple[int, int]]

    @property
    def ids(self) -> list[str]:
        return [p.id for p in self.profiles]


@dataclass
class EffectLog:
    base: np.ndarray  # [V]
    weekday: np.ndarray  # [D]
    calendar: np.ndarray  # [V, D]
    weather: np.ndarray  # [V, D]
    coupling: np.ndarray  # [V, D], already scaled by kappa
    noise: np.ndarray  # [V, D]
    conditions: list[list[str]] = field(default_factory=list)

    def replay(self) -> np.ndarray:
        return (self.base[:, None] * self.weekday[None, :] * self.calendar * self.weather
                * (1.0 + self.coupling) * self.noise)


def _components(n: int, edges) -> list[set[int]]:
    adj = {i: set() for i in range(n)}
    for i, j in edges:
        adj[i].add(j)
        adj[j].add(i)
    seen, comps = set(), []
    for s in range(n):
        if s in seen:
            continue
        comp, stack = set(), [s]
        while stack:
            u = stack.pop()
            if u in comp:
                continue
            comp.add(u)
            stack.extend(adj[u] - comp)
        seen |= comp
        comps.append(comp)
    return comps


def gen_network(spec: GenSpec, k: int = 3) -> Network:
    """Random stations on a 100 km square, joined to their k nearest neighbours."""
    rng = np.random.default_rng((spec.seed, 1))
    v = spec.n_stations
    xy = rng.uniform(0.0, 100.0, size=(v, 2))
    ids = [f"S{i:03d}" for i in range(v)]
    dist = distance_matrix([StationProfile(ids[i], *xy[i], 1.0) for i in range(v)])
    kk = min(k, v - 1)
    edges = set()
    for i in range(v):
        order = [j for j in np.argsort(dist[i], kind="stable") if j != i][:kk]
        for j in order:
            edges.add((min(i, int(j)), max(i, int(j))))
    comps = _components(v, edges)
    while len(comps) > 1:
        a, rest = sorted(comps[0]), sorted(set(range(v)) - comps[0])
        sub = dist[np.ix_(a, rest)]
        ia, ib = np.unravel_index(np.argmin(sub), sub.shape)
        i, j = a[ia], rest[ib]
        edges.add((min(i, j), max(i, j)))
        comps = _components(v, edges)
    mean_dist = dist.sum(axis=1) / (v - 1)
    mileage = mean_dist * rng.uniform(0.5, 1.0, size=v)
    profiles = [StationProfile(ids[i], float(xy[i, 0]), float(xy[i, 1]), float(mileage[i])) for i in range(v)]
    return Network(profiles, sorted(edges))


def gen_flows(spec: GenSpec, network: Network) -> tuple[FlowPanel, ExternalPanel, EffectLog]:
    rng = np.random.default_rng((spec.seed, 2))
    v, d = spec.n_stations, spec.n_days
    days = spec.days
    calendar = calendar_labels(days, spec.holidays)

    base = (rng.pareto(spec.alpha, size=v) + 1.0) * spec.base_scale
    weekday = np.array([spec.weekday_profile[day.weekday()] for day in days])
    weekend_mult = rng.uniform(*spec.weekend_range, size=v)
    cal = np.where(calendar[None, :] != 0, weekend_mult[:, None], 1.0)

    extreme = rng.random((v, d)) < spec.weather_prob
    weather = np.where(extreme, spec.suppression, 1.0)
    ext_pick = rng.integers(0, len(EXTREME_CONDITIONS), size=(v, d))
    norm_pick = rng.integers(0, len(NORMAL_CONDITIONS), size=(v, d))
    conditions = [[EXTREME_CONDITIONS[ext_pick[i, t]] if extreme[i, t] else NORMAL_CONDITIONS[norm_pick[i, t]]
                   for t in range(d)] for i in range(v)]

    log_noise = rng.normal(0.0, spec.noise, size=(v, d)) if spec.noise > 0 else np.zeros((v, d))
    noise = np.exp(log_noise)
    # yesterday's shocks at geographic neighbours spill over to today
    shock = np.tanh(log_noise / spec.noise) if spec.noise > 0 else np.zeros((v, d))
    nbr = np.zeros((v, v))
    for i, j in network.edges:
        nbr[i, j] = nbr[j, i] = 1.0
    deg = np.maximum(nbr.sum(axis=1, keepdims=True), 1.0)
    coupling = np.zeros((v, d))
    coupling[:, 1:] = spec.coupling * ((nbr / deg) @ shock[:, :-1])

    log = EffectLog(base, weekday, cal, weather, coupling, noise, conditions)
    flows = FlowPanel(network.ids, days, log.replay())
    ext = ExternalPanel(extreme.astype(np.int64), calendar)
    return flows, ext, log
