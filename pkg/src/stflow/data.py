"""Dataset container and the CSV formats read by the CLI.

Files in a dataset directory::

    flows.csv      station_id,date,flow
    profiles.csv   station_id,x,y,mean_mileage
    edges.csv      from_id,to_id
    weather.csv    station_id,date,condition
    holidays.csv   one ISO date per line, no header
"""

from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .datagen import EffectLog, Network
from .graphs import StationProfile, build_geographic, build_influential
from .preprocess import ExternalPanel, FlowPanel, UnknownWeatherError, calendar_labels, encode_weather

FLOWS, PROFILES, EDGES, WEATHER, HOLIDAYS = "flows.csv", "profiles.csv", "edges.csv", "weather.csv", "holidays.csv"


class DataFormatError(ValueError):
    """Malformed or missing CSV content; carries the file and line when known."""

    def __init__(self, message: str, path=None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}" + (f":{line}" if line is not None else "") + ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


class ContiguityError(ValueError):
    pass


@dataclass
class Dataset:
    stations: list[str]
    days: list[dt.date]
    flows: np.ndarray  # [V, D]
    weather: np.ndarray  # [V, D] in {0, 1}
    holidays: list[dt.date]
    profiles: list[StationProfile]
    edges: list[tuple[int, int]]

    @property
    def n_stations(self) -> int:
        return len(self.stations)

    @property
    def n_days(self) -> int:
        return len(self.days)

    @property
    def calendar(self) -> np.ndarray:
        return calendar_labels(self.days, self.holidays)

    @property
    def flow_panel(self) -> FlowPanel:
        return FlowPanel(self.stations, self.days, self.flows)

    @property
    def external_panel(self) -> ExternalPanel:
        return ExternalPanel(self.weather, self.calendar)

    def external_features(self) -> np.ndarray:
        return self.external_panel.features()

    def geographic(self) -> np.ndarray:
        return build_geographic(self.edges, self.n_stations).adjacency

    def influential(self) -> np.ndarray:
        return build_influential(self.profiles).adjacency

    def head(self, n_days: int) -> "Dataset":
        """The first ``n_days`` days only."""
        return Dataset(self.stations, self.days[:n_days], self.flows[:, :n_days], self.weather[:, :n_days],
                       self.holidays, self.profiles, self.edges)


def from_generated(flows: FlowPanel, ext: ExternalPanel, network: Network, holidays: Sequence[dt.date] = ()) -> Dataset:
    return Dataset(list(flows.stations), list(flows.days), flows.values.copy(), ext.weather.copy(),
                   list(holidays), list(network.profiles), list(network.edges))


# ----------------------------------------------------------------------------
# reading


def _rows(path: Path, columns: Sequence[str]):
    try:
        fh = open(path, newline="")
    except FileNotFoundError:
        raise DataFormatError("file not found", path) from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataFormatError("empty file", path, 1)
        header = [h.strip() for h in header]
        missing = [c for c in columns if c not in header]
        if missing:
            raise DataFormatError(f"missing column(s) {missing}; header is {header}", path, 1)
        pos = [header.index(c) for c in columns]
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataFormatError(f"expected {len(header)} fields, got {len(row)}", path, line)
            yield line, [row[p].strip() for p in pos]


def _date(text: str, path, line) -> dt.date:
    try:
        return dt.date.fromisoformat(text)
    except ValueError:
        raise DataFormatError(f"bad date {text!r}", path, line) from None


def _float(text: str, path, line) -> float:
    try:
        val = float(text)
    except ValueError:
        raise DataFormatError(f"bad number {text!r}", path, line) from None
    if not np.isfinite(val):
        raise DataFormatError(f"non-finite number {text!r}", path, line)
    return val


def read_flows(path) -> tuple[list[str], list[dt.date], np.ndarray]:
    path = Path(path)
    cells: dict[tuple[str, dt.date], float] = {}
    stations: dict[str, None] = {}
    for line, (sid, date, flow) in _rows(path, ("station_id", "date", "flow")):
        d = _date(date, path, line)
        val = _float(flow, path, line)
        if val < 0:
            raise DataFormatError(f"negative flow {val}", path, line)
        if (sid, d) in cells:
            raise DataFormatError(f"duplicate flow for {sid} on {d}", path, line)
        cells[(sid, d)] = val
        stations.setdefault(sid, None)
    if not cells:
        raise DataFormatError("no flow rows", path)
    days = sorted({d for _, d in cells})
    for a, b in zip(days, days[1:]):
        if (b - a).days != 1:
            raise ContiguityError(f"{path}: dates jump from {a} to {b}")
    ids = sorted(stations)
    index = {d: i for i, d in enumerate(days)}
    values = np.full((len(ids), len(days)), np.nan)
    for (sid, d), val in cells.items():
        values[ids.index(sid), index[d]] = val
    if np.isnan(values).any():
        i, j = np.argwhere(np.isnan(values))[0]
        raise DataFormatError(f"missing flow for station {ids[i]} on {days[j]}", path)
    return ids, days, values


def read_profiles(path, stations: Sequence[str]) -> list[StationProfile]:
    path = Path(path)
    found = {}
    for line, (sid, x, y, mileage) in _rows(path, ("station_id", "x", "y", "mean_mileage")):
        m = _float(mileage, path, line)
        if m <= 0:
            raise DataFormatError(f"mean_mileage must be positive, got {m}", path, line)
        found[sid] = StationProfile(sid, _float(x, path, line), _float(y, path, line), m)
    missing = [s for s in stations if s not in found]
    if missing:
        raise DataFormatError(f"no profile for station(s) {missing[:5]}", path)
    return [found[s] for s in stations]


def read_edges(path, stations: Sequence[str]) -> list[tuple[int, int]]:
    path = Path(path)
    index = {s: i for i, s in enumerate(stations)}
    edges = []
    for line, (a, b) in _rows(path, ("from_id", "to_id")):
        if a not in index or b not in index:
            raise DataFormatError(f"edge references unknown station ({a}, {b})", path, line)
        edges.append((index[a], index[b]))
    return edges


def read_weather(path, stations: Sequence[str], days: Sequence[dt.date], strict: bool = True) -> np.ndarray:
    """``[V, D]`` extreme-weather labels; station-days absent from the file count as normal."""
    path = Path(path)
    si = {s: i for i, s in enumerate(stations)}
    di = {d: i for i, d in enumerate(days)}
    out = np.zeros((len(stations), len(days)), dtype=np.int64)
    for line, (sid, date, cond) in _rows(path, ("station_id", "date", "condition")):
        d = _date(date, path, line)
        try:
            q = encode_weather(cond, strict)
        except UnknownWeatherError:
            raise DataFormatError(f"unknown weather condition {cond!r}", path, line) from None
        if sid in si and d in di:
            out[si[sid], di[d]] = q
    return out


def read_holidays(path) -> list[dt.date]:
    path = Path(path)
    out = []
    with open(path) as fh:
        for line, text in enumerate(fh, start=1):
            text = text.strip()
            if not text or text.startswith("#") or text == "date":
                continue
            out.append(_date(text, path, line))
    return sorted(set(out))


def load_dataset(directory=None, *, flows=None, profiles=None, edges=None, weather=None, holidays=None,
                 strict_weather: bool = True) -> Dataset:
    """Read a dataset; explicit paths override the default names inside ``directory``.

    Weather and holiday files are optional: missing files mean normal weather
    and no holidays.
    """
    base = Path(directory) if directory is not None else None

    def pick(given, name):
        if given is not None:
            return Path(given)
        return base / name if base is not None else None

    fp = pick(flows, FLOWS)
    if fp is None:
        raise DataFormatError("no flow file given")
    stations, days, values = read_flows(fp)
    prof = read_profiles(pick(profiles, PROFILES), stations)
    edg = read_edges(pick(edges, EDGES), stations)
    wp, hp = pick(weather, WEATHER), pick(holidays, HOLIDAYS)
    q = read_weather(wp, stations, days, strict_weather) if wp is not None and wp.exists() else \
        np.zeros((len(stations), len(days)), dtype=np.int64)
    hol = read_holidays(hp) if hp is not None and hp.exists() else []
    return Dataset(stations, days, values, q, hol, prof, edg)


# ----------------------------------------------------------------------------
# writing


def write_dataset(ds: Dataset, directory, effects: EffectLog | None = None) -> list[Path]:
    """Write the five CSV files; weather conditions come from ``effects`` when given."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    paths = []

    def dump(name, header, rows):
        p = out / name
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if header:
                w.writerow(header)
            w.writerows(rows)
        paths.append(p)

    dump(FLOWS, ("station_id", "date", "flow"),
         ((s, d.isoformat(), f"{ds.flows[i, j]:.3f}") for i, s in enumerate(ds.stations)
          for j, d in enumerate(ds.days)))
    dump(PROFILES, ("station_id", "x", "y", "mean_mileage"),
         ((p.id, f"{p.x:.6f}", f"{p.y:.6f}", f"{p.mileage:.6f}") for p in ds.profiles))
    dump(EDGES, ("from_id", "to_id"), ((ds.stations[i], ds.stations[j]) for i, j in ds.edges))

    def condition(i, j):
        if effects is not None and effects.conditions:
            return effects.conditions[i][j]
        return "heavy rain" if ds.weather[i, j] else "clear"

    dump(WEATHER, ("station_id", "date", "condition"),
         ((s, d.isoformat(), condition(i, j)) for i, s in enumerate(ds.stations) for j, d in enumerate(ds.days)))
    dump(HOLIDAYS, None, ((d.isoformat(),) for d in ds.holidays))
    return paths
