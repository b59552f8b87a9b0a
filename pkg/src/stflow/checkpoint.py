"""Versioned single-file checkpoints.

The file is canonical JSON (sorted keys, shortest round-trip float repr), so
saving the same fitted forecaster twice yields identical bytes and loading
restores every parameter bit for bit. ``content_hash`` is the SHA-256 of the
document with that key removed.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .estimator import MSTGCNForecaster
from .preprocess import BoxCoxNormalizer, NormalizationState

FORMAT = "stflow-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()


def _tensor(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": [float(x) for x in a.reshape(-1)]}


def _array(d: dict) -> np.ndarray:
    return np.array(d["data"], dtype=np.float64).reshape(d["shape"])


def to_document(fc: MSTGCNForecaster, stations, last_day: str | None = None,
                geographic=None, influential=None) -> dict:
    st = fc.normalizer_.state_
    graphs = {}
    if geographic is not None:
        graphs["geographic"] = _tensor(geographic)
    if influential is not None:
        graphs["influential"] = _tensor(influential)
    params = fc.get_params()
    params["lambda_grid"] = list(params["lambda_grid"])
    doc = {
        "format": FORMAT,
        "version": VERSION,
        "config": params,
        "seed": int(fc.seed),
        "stations": list(stations),
        "last_day": last_day,
        "normalization": {
            "enabled": bool(fc.normalizer_.enabled),
            "lambda": float(st.lam),
            "shift": float(st.shift),
            "topk_days": [int(i) for i in st.topk_days],
            "vital_few": [int(i) for i in st.vital_few],
            "center": st.center,
            "scale": st.scale,
        },
        "graphs": graphs,
        "params": {k: _tensor(v) for k, v in fc.model_.params.state_dict().items()},
    }
    doc["content_hash"] = hashlib.sha256(_canonical(doc)).hexdigest()
    return doc


def save(path, fc: MSTGCNForecaster, stations, last_day: str | None = None,
         geographic=None, influential=None) -> str:
    doc = to_document(fc, stations, last_day, geographic, influential)
    Path(path).write_bytes(_canonical(doc) + b"\n")
    return doc["content_hash"]


def load(path) -> tuple[MSTGCNForecaster, dict]:
    """Rebuild a fitted forecaster; returns it with the raw document."""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if doc.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not an stflow checkpoint")
    if doc.get("version") != VERSION:
        raise CheckpointError(f"checkpoint version {doc.get('version')} unsupported (expected {VERSION})")
    body = {k: v for k, v in doc.items() if k != "content_hash"}
    if hashlib.sha256(_canonical(body)).hexdigest() != doc.get("content_hash"):
        raise CheckpointError(f"{path}: content hash mismatch")

    cfg = dict(doc["config"])
    cfg["lambda_grid"] = tuple(cfg["lambda_grid"])
    fc = MSTGCNForecaster(**cfg)
    nd = doc["normalization"]
    state = NormalizationState(lam=nd["lambda"], shift=nd["shift"], topk_days=nd["topk_days"],
                               vital_few=nd["vital_few"], center=nd["center"], scale=nd["scale"])
    fc.normalizer_ = BoxCoxNormalizer.from_state(state, enabled=nd["enabled"], k=fc.k,
                                                 grid=fc.lambda_grid, shift=fc.shift)
    graphs = {k: _array(v) for k, v in doc["graphs"].items()}
    model = fc.build(len(doc["stations"]), graphs.get("geographic"), graphs.get("influential"))
    model.params.load_state_dict({k: _array(v) for k, v in doc["params"].items()})
    return fc, doc
