"""Run configuration files (YAML).

Example::

    data:
      dir: data                 # or flows:/profiles:/edges:/weather:/holidays: paths
    model: {h: 15, f: 1, m: 3, c_out: 64, c_sout: 16, variant: full}
    normalize: {k: 5, grid: [-2.0, 2.0, 0.01], shift: auto, standardize: true}
    train: {optimizer: adam, lr: 0.001, epochs: 100, batch_size: 16, seeds: [0], test_days: 15}
    ablate: {variants: [full, gs, rs, nonE, nonT]}
    output: {dir: runs/example}

Relative paths resolve against the config file's directory. Unknown keys
are rejected.
"""

from __future__ import annotations

import copy
import os
from dataclasses import dataclass
from pathlib import Path

import yaml

from .data import EDGES, FLOWS, HOLIDAYS, PROFILES, WEATHER
from .model import VARIANTS

SEED_ENV = "STFLOW_SEED"

DEFAULTS = {
    "data": {"dir": None, "flows": None, "profiles": None, "edges": None, "weather": None, "holidays": None,
             "strict_weather": True},
    "model": {"n_stations": None, "h": 15, "f": 1, "m": 3, "c_out": 64, "c_sout": 16, "variant": "full",
              "tie_glu_kernels": False, "elastic_nonneg": "abs"},
    "normalize": {"k": 5, "grid": [-2.0, 2.0, 0.01], "shift": "auto", "standardize": True},
    "train": {"optimizer": "adam", "lr": 1e-3, "epochs": 100, "batch_size": 16, "clip": 5.0, "patience": None,
              "val_fraction": 0.1, "seeds": [0], "test_days": 15},
    "ablate": {"variants": list(VARIANTS)},
    "output": {"dir": "runs"},
}


class ConfigFileError(ValueError):
    pass


@dataclass
class RunConfig:
    sections: dict
    base_dir: Path

    def __getitem__(self, key):
        return self.sections[key]

    def data_paths(self) -> dict[str, Path | None]:
        d = self.sections["data"]
        root = self._resolve(d["dir"]) if d["dir"] else None
        names = {"flows": FLOWS, "profiles": PROFILES, "edges": EDGES, "weather": WEATHER, "holidays": HOLIDAYS}
        out = {}
        for key, default in names.items():
            if d[key]:
                out[key] = self._resolve(d[key])
            else:
                out[key] = root / default if root is not None else None
        return out

    @property
    def output_dir(self) -> Path:
        return self._resolve(self.sections["output"]["dir"])

    @property
    def seeds(self) -> list[int]:
        env = os.environ.get(SEED_ENV)
        if env is not None and env.strip():
            try:
                return [int(env)]
            except ValueError:
                raise ConfigFileError(f"{SEED_ENV} must be an integer, got {env!r}") from None
        return [int(s) for s in self.sections["train"]["seeds"]]

    def estimator_params(self) -> dict:
        m, n, t = self.sections["model"], self.sections["normalize"], self.sections["train"]
        return {
            "h": m["h"], "f": m["f"], "m": m["m"], "c_out": m["c_out"], "c_sout": m["c_sout"],
            "variant": m["variant"], "tie_glu_kernels": m["tie_glu_kernels"], "elastic_nonneg": m["elastic_nonneg"],
            "optimizer": t["optimizer"], "lr": t["lr"], "epochs": t["epochs"], "batch_size": t["batch_size"],
            "clip": t["clip"], "patience": t["patience"], "val_fraction": t["val_fraction"],
            "k": n["k"], "lambda_grid": tuple(n["grid"]), "shift": n["shift"], "standardize": n["standardize"],
        }

    def _resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p


def _merge(defaults: dict, given: dict, where: str) -> dict:
    out = copy.deepcopy(defaults)
    for key, val in (given or {}).items():
        if key not in defaults:
            raise ConfigFileError(f"unknown key {where}{key!r}")
        if isinstance(defaults[key], dict):
            if not isinstance(val, dict):
                raise ConfigFileError(f"{where}{key!r} must be a mapping")
            out[key] = _merge(defaults[key], val, f"{where}{key}.")
        else:
            out[key] = val
    return out


def _validate(s: dict) -> None:
    m, n, t = s["model"], s["normalize"], s["train"]
    for key in ("h", "f", "m", "c_out", "c_sout"):
        if not isinstance(m[key], int) or m[key] < 1:
            raise ConfigFileError(f"model.{key} must be a positive integer")
    if m["variant"] not in VARIANTS:
        raise ConfigFileError(f"model.variant must be one of {VARIANTS}")
    if m["h"] < 2 * m["m"] - 1:
        raise ConfigFileError("model.h must be at least 2*m - 1")
    if not isinstance(n["k"], int) or not 1 <= n["k"] <= 5:
        raise ConfigFileError("normalize.k must be an integer in 1..5")
    if len(n["grid"]) != 3 or n["grid"][2] <= 0 or n["grid"][1] < n["grid"][0]:
        raise ConfigFileError("normalize.grid must be [lo, hi, step] with step > 0")
    if n["shift"] != "auto" and not isinstance(n["shift"], (int, float)):
        raise ConfigFileError("normalize.shift must be 'auto' or a number")
    if t["optimizer"] not in ("adam", "sgd"):
        raise ConfigFileError("train.optimizer must be 'adam' or 'sgd'")
    if not t["lr"] > 0:
        raise ConfigFileError("train.lr must be positive")
    if not isinstance(t["epochs"], int) or t["epochs"] < 1:
        raise ConfigFileError("train.epochs must be a positive integer")
    if not t["seeds"] or not all(isinstance(x, int) for x in t["seeds"]):
        raise ConfigFileError("train.seeds must be a non-empty list of integers")
    if not isinstance(t["test_days"], int) or t["test_days"] < 1:
        raise ConfigFileError("train.test_days must be a positive integer")
    bad = [v for v in s["ablate"]["variants"] if v not in VARIANTS]
    if bad or not s["ablate"]["variants"]:
        raise ConfigFileError(f"ablate.variants must be a non-empty subset of {VARIANTS}")


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except OSError as exc:
        raise ConfigFileError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigFileError(f"{path}: invalid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigFileError(f"{path}: top level must be a mapping")
    sections = _merge(DEFAULTS, raw, "")
    _validate(sections)
    cfg = RunConfig(sections, path.parent.resolve())
    paths = cfg.data_paths()
    for key in ("flows", "profiles", "edges"):
        if paths[key] is None or not paths[key].is_file():
            raise ConfigFileError(f"data.{key}: file not found ({paths[key]})")
    for key in ("weather", "holidays"):
        if sections["data"][key] and not paths[key].is_file():
            raise ConfigFileError(f"data.{key}: file not found ({paths[key]})")
    return cfg
