"""Geographic, influential and elastic highway graphs."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Node, ParamStore

GEOGRAPHIC, INFLUENTIAL, ELASTIC = "geographic", "influential", "elastic"


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class StationProfile:
    id: str
    x: float
    y: float
    mileage: float


@dataclass
class HighwayGraph:
    kind: str
    adjacency: np.ndarray
    propagation: np.ndarray


def distance_matrix(profiles: Sequence[StationProfile]) -> np.ndarray:
    xy = np.array([[p.x, p.y] for p in profiles], dtype=np.float64)
    diff = xy[:, None, :] - xy[None, :, :]
    return np.sqrt((diff ** 2).sum(axis=-1))


def propagation(adjacency, nonneg: str | None = None):
    """``D^-1/2 (W + I) D^-1/2`` with ``D_ii = sum_j (W + I)_ij``.

    Returns a Node when given a Node (differentiable), otherwise an ndarray.
    ``nonneg`` ("abs" or "relu") is applied to ``W`` first.
    """
    if isinstance(adjacency, Node):
        w = adjacency
        if nonneg == "abs":
            w = dc.absolute(w)
        elif nonneg == "relu":
            w = dc.relu(w)
        v = w.shape[0]
        a_hat = dc.add(w, np.eye(v))
        deg = dc.row_sum(a_hat)
        if np.any(deg.value <= 0):
            raise GraphError(f"non-positive degree at node(s) {np.flatnonzero(deg.value <= 0).tolist()}")
        return dc.diag_scale(a_hat, dc.power(deg, -0.5))
    w = np.asarray(adjacency, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise GraphError(f"adjacency must be square, got {w.shape}")
    if nonneg == "abs":
        w = np.abs(w)
    elif nonneg == "relu":
        w = np.maximum(w, 0.0)
    a_hat = w + np.eye(w.shape[0])
    deg = a_hat.sum(axis=1)
    if np.any(deg <= 0):
        raise GraphError(f"non-positive degree at node(s) {np.flatnonzero(deg <= 0).tolist()}")
    d = deg ** -0.5
    return d[:, None] * a_hat * d[None, :]


def build_geographic(edges: Iterable[tuple[int, int]], n_stations: int, directed: bool = False) -> HighwayGraph:
    w = np.zeros((n_stations, n_stations))
    seen = set()
    for i, j in edges:
        i, j = int(i), int(j)
        if not (0 <= i < n_stations and 0 <= j < n_stations):
            raise GraphError(f"edge ({i}, {j}) references a station outside 0..{n_stations - 1}")
        if i == j:
            raise GraphError(f"self-loop at station {i}")
        key = (i, j) if directed else (min(i, j), max(i, j))
        if key in seen:
            warnings.warn(f"duplicate edge {key} ignored", stacklevel=2)
            continue
        seen.add(key)
        w[i, j] = 1.0
        if not directed:
            w[j, i] = 1.0
    return HighwayGraph(GEOGRAPHIC, w, propagation(w))


def influential_adjacency(dist: np.ndarray, mileage: np.ndarray) -> np.ndarray:
    """Row-softmax of the scaled mismatch between distance and exit mileage.

    Row ``i`` ranks every other station ``j`` by how closely ``dist[i, j]``
    matches the mean trip length of vehicles leaving ``i``.
    """
    dist = np.asarray(dist, dtype=np.float64)
    mileage = np.asarray(mileage, dtype=np.float64)
    v = dist.shape[0]
    if v < 2:
        raise GraphError("influential graph needs at least two stations")
    w = np.zeros((v, v))
    for i in range(v):
        others = np.array([j for j in range(v) if j != i])
        gap = np.abs(dist[i, others] - mileage[i])
        top = gap.max()
        if top == 0:
            raise GraphError(f"station {i}: every candidate matches its mileage exactly; scal undefined")
        scal = 1.0 - (gap - gap.min()) / top
        e = np.exp(scal - scal.max())
        w[i, others] = e / e.sum()
    return w


def build_influential(profiles: Sequence[StationProfile]) -> HighwayGraph:
    mileage = np.array([p.mileage for p in profiles], dtype=np.float64)
    if np.any(mileage <= 0):
        raise GraphError("station mileage must be positive")
    w = influential_adjacency(distance_matrix(profiles), mileage)
    return HighwayGraph(INFLUENTIAL, w, propagation(w))


def init_elastic(n_stations: int, store: ParamStore, name: str = "elastic.a") -> Node:
    if n_stations < 1:
        raise GraphError("need at least one station")
    return store.normal(name, (n_stations,), 0.1)


def elastic_adjacency(a: Node) -> Node:
    """``a aᵀ`` with the diagonal zeroed, differentiable in ``a``."""
    v = a.shape[0]
    return dc.hadamard(dc.outer(a), 1.0 - np.eye(v))
