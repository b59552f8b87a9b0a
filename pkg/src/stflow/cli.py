"""``stflow`` command line: generate, train, evaluate, predict, ablate.

Exit codes
----------
0 success
2 usage or configuration error (bad flags, unknown config keys, missing paths)
3 malformed CSV input (message carries file and line)
4 non-contiguous dates in the flow file
5 too few days for the requested windows (h + f plus the test span)
6 not enough history before the requested prediction date
7 unreadable, tampered or incompatible checkpoint
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .ablation import METRICS, baseline_holdout, fit_holdout, run_ablation, train_span
from .config import ConfigFileError, load_config
from .data import ContiguityError, DataFormatError, Dataset, from_generated, load_dataset, write_dataset
from .datagen import GenSpec, gen_flows, gen_network
from .diffcore import WindowError
from .estimator import MSTGCNForecaster
from .model import VARIANT_GRAPHS, ConfigError
from .train import TrainingDiverged

EXIT_OK, EXIT_USAGE, EXIT_FORMAT, EXIT_CONTIGUITY, EXIT_WINDOW, EXIT_HISTORY, EXIT_CHECKPOINT = 0, 2, 3, 4, 5, 6, 7

CHECKPOINT_FILE = "checkpoint.json"
METRICS_FILE = "metrics.csv"
HISTORY_FILE = "history.json"
ABLATION_CSV = "ablation.csv"
ABLATION_JSON = "ablation.json"


class CLIError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


class InsufficientHistory(CLIError):
    def __init__(self, message: str):
        super().__init__(message, EXIT_HISTORY)


# ----------------------------------------------------------------------------
# helpers


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _write_metrics(path: Path, rows: list[dict]) -> None:
    _write_csv(path, ("variant", "seed", "day", *METRICS),
               ((r["variant"], r["seed"], r["day"], *(float(r[m]) for m in METRICS)) for r in rows))


def _load_from_config(cfg) -> Dataset:
    paths = cfg.data_paths()
    ds = load_dataset(flows=paths["flows"], profiles=paths["profiles"], edges=paths["edges"],
                      weather=paths["weather"], holidays=paths["holidays"],
                      strict_weather=cfg["data"]["strict_weather"])
    expected = cfg["model"]["n_stations"]
    if expected is not None and expected != ds.n_stations:
        raise ConfigFileError(f"model.n_stations is {expected} but the data has {ds.n_stations} stations")
    return ds


def _estimator(cfg, seed: int) -> MSTGCNForecaster:
    return MSTGCNForecaster(**cfg.estimator_params(), seed=seed)


def _graphs_for(variant: str, ds: Dataset):
    kinds = VARIANT_GRAPHS[variant]
    geo = ds.geographic() if "geographic" in kinds else None
    inf = ds.influential() if "influential" in kinds else None
    return geo, inf


def _report(args, payload: dict, text: str) -> None:
    if args.json:
        print(json.dumps(payload, sort_keys=True))
    else:
        print(text)


# ----------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    try:
        holidays = tuple(dt.date.fromisoformat(d) for d in args.holiday)
        start = dt.date.fromisoformat(args.start)
    except ValueError as exc:
        raise CLIError(f"bad date: {exc}", EXIT_USAGE) from None
    try:
        spec = GenSpec(n_stations=args.v, n_days=args.days, seed=args.seed, alpha=args.alpha,
                       weekend_range=(args.weekend_lo, args.weekend_hi), holidays=holidays,
                       weather_prob=args.weather_prob, suppression=args.suppression,
                       coupling=args.coupling, noise=args.noise, start=start)
    except ValueError as exc:
        raise CLIError(f"invalid generator spec: {exc}", EXIT_USAGE) from None
    network = gen_network(spec)
    flows, ext, effects = gen_flows(spec, network)
    ds = from_generated(flows, ext, network, holidays)
    paths = write_dataset(ds, args.out, effects)
    _report(args, {"out": str(args.out), "files": [p.name for p in paths]},
            f"wrote {len(paths)} files to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    ds = _load_from_config(cfg)
    seed = cfg.seeds[0]
    test_days = cfg["train"]["test_days"]
    est = _estimator(cfg, seed)
    n_train = train_span(ds, test_days, est.h, est.f)
    est, report = fit_holdout(est, ds, test_days)
    baseline = baseline_holdout(ds, est.h, est.f, test_days)

    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    geo, inf = _graphs_for(est.variant, ds)
    digest = checkpoint.save(out / CHECKPOINT_FILE, est, ds.stations, ds.days[n_train - 1].isoformat(), geo, inf)
    _write_metrics(out / METRICS_FILE, report.rows(est.variant, seed) + baseline.rows("persistence", -1))
    history = est.history_.to_dict()
    history.update({"seed": seed, "variant": est.variant, "lambda": est.normalizer_.lambda_,
                    "train_days": n_train, "test_days": test_days})
    _write_json(out / HISTORY_FILE, history)

    agg, base = report.aggregate(), baseline.aggregate()
    _report(args, {"checkpoint": str(out / CHECKPOINT_FILE), "content_hash": digest, "metrics": agg,
                   "persistence": base},
            f"trained {est.variant} (seed {seed}) on {n_train} days; test over {len(report.days)} windows\n"
            f"  model       rmse {agg['rmse']:.3f}  mape {agg['mape']:.3f}%  mae {agg['mae']:.3f}\n"
            f"  persistence rmse {base['rmse']:.3f}  mape {base['mape']:.3f}%  mae {base['mae']:.3f}\n"
            f"  checkpoint  {out / CHECKPOINT_FILE}")
    return EXIT_OK


def _checkpoint_data(data_dir, doc_variant):
    uses_ext = doc_variant != "nonE"
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise CLIError(f"data directory {data_dir} not found", EXIT_USAGE)
    if uses_ext and not (data_dir / "weather.csv").is_file():
        raise DataFormatError(f"variant {doc_variant} needs weather data", data_dir / "weather.csv")
    return load_dataset(data_dir)


def _align(ds: Dataset, stations: list[str]) -> np.ndarray:
    if sorted(ds.stations) != sorted(stations):
        raise DataFormatError("stations in the data do not match the checkpoint", Path("flows.csv"))
    return np.array([ds.stations.index(s) for s in stations])


def cmd_evaluate(args) -> int:
    est, doc = checkpoint.load(args.checkpoint)
    ds = _checkpoint_data(args.data, est.variant)
    order = _align(ds, doc["stations"])
    flows, ext = ds.flows[order], ds.external_features()[order]
    first = 0
    if doc["last_day"] is not None:
        last = dt.date.fromisoformat(doc["last_day"])
        first = max(0, (last - ds.days[0]).days + 1)
    if first + 1 > ds.n_days or ds.n_days < est.h + est.f:
        raise CLIError("no days after the training span to evaluate", EXIT_WINDOW)
    report = est.evaluate(flows, ext, max(first, est.h), days=[d.isoformat() for d in ds.days])
    rows = report.rows(est.variant, int(doc["seed"]))
    if args.out:
        _write_metrics(Path(args.out), rows)
    agg = report.aggregate()
    _report(args, {"metrics": agg, "windows": len(report.days)},
            f"{est.variant}: rmse {agg['rmse']:.3f}  mape {agg['mape']:.3f}%  mae {agg['mae']:.3f} "
            f"over {len(report.days)} windows")
    return EXIT_OK


def cmd_predict(args) -> int:
    est, doc = checkpoint.load(args.checkpoint)
    ds = _checkpoint_data(args.data, est.variant)
    order = _align(ds, doc["stations"])
    stations = doc["stations"]
    if args.date:
        try:
            target = dt.date.fromisoformat(args.date)
        except ValueError:
            raise CLIError(f"bad --date {args.date!r}", EXIT_USAGE) from None
    else:
        target = ds.days[-1] + dt.timedelta(days=1)
    end = (target - ds.days[0]).days  # index of the first predicted day
    if end - est.h < 0 or end > ds.n_days:
        raise InsufficientHistory(f"predicting {target} needs the {est.h} preceding days; "
                                  f"data covers {ds.days[0]}..{ds.days[-1]}")
    window = ds.flows[order, end - est.h:end]
    ext = ds.external_features()[order, end - est.h:end]
    pred = est.predict(window, ext)
    vital = set(int(i) for i in doc["normalization"]["vital_few"])

    rows = []
    for i, sid in enumerate(stations):
        for j in range(est.f):
            rows.append((sid, (target + dt.timedelta(days=j)).isoformat(), float(pred[i, j]), int(i in vital)))
    header = ("station_id", "date", "predicted_flow", "vital_few")
    if args.out:
        _write_csv(Path(args.out), header, rows)
    if args.json:
        print(json.dumps([dict(zip(header, r)) for r in rows], sort_keys=True))
    elif not args.out:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(header)
        w.writerows((a, b, repr(c), d) for a, b, c, d in rows)
    else:
        print(f"wrote {len(rows)} predictions for {target} to {args.out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    ds = _load_from_config(cfg)
    base = _estimator(cfg, cfg.seeds[0])
    test_days = cfg["train"]["test_days"]
    train_span(ds, test_days, base.h, base.f)
    result = run_ablation(ds, base, cfg["ablate"]["variants"], cfg.seeds, test_days)

    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    table = result.table()
    _write_csv(out / ABLATION_CSV, ("variant", "runs", *METRICS),
               ((r["variant"], r["runs"], *(float(r[m]) for m in METRICS)) for r in table))
    _write_json(out / ABLATION_JSON, result.to_json())
    _write_metrics(out / METRICS_FILE, result.metric_rows())

    lines = [f"{'variant':<8} {'runs':>4} {'rmse':>12} {'mape%':>8} {'mae':>12}"]
    lines += [f"{r['variant']:<8} {r['runs']:>4} {r['rmse']:>12.3f} {r['mape']:>8.3f} {r['mae']:>12.3f}"
              for r in table]
    _report(args, {"table": table, "out": str(out)}, "\n".join(lines))
    return EXIT_OK


# ----------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stflow", description="Multi-graph spatio-temporal traffic flow forecasting.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--v", type=int, default=50, help="number of stations")
    g.add_argument("--days", type=int, default=200)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", type=Path, default=Path("data"))
    g.add_argument("--alpha", type=float, default=1.2, help="Pareto tail index of station volumes")
    g.add_argument("--weekend-lo", type=float, default=1.0)
    g.add_argument("--weekend-hi", type=float, default=1.6)
    g.add_argument("--weather-prob", type=float, default=0.08)
    g.add_argument("--suppression", type=float, default=0.5, help="flow multiplier under extreme weather")
    g.add_argument("--coupling", type=float, default=0.2)
    g.add_argument("--noise", type=float, default=0.05)
    g.add_argument("--start", default="2017-05-01")
    g.add_argument("--holiday", action="append", default=[], metavar="DATE")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="fit on a config's data and score the held-out tail")
    t.add_argument("config", type=Path)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score a checkpoint on the days after its training span")
    e.add_argument("checkpoint", type=Path)
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--out", type=Path)
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("predict", help="forecast the next day(s) from a checkpoint")
    r.add_argument("checkpoint", type=Path)
    r.add_argument("--data", type=Path, required=True)
    r.add_argument("--date", help="first day to predict (default: day after the data ends)")
    r.add_argument("--out", type=Path)
    r.set_defaults(func=cmd_predict)

    a = sub.add_parser("ablate", help="train every variant over every seed")
    a.add_argument("config", type=Path)
    a.set_defaults(func=cmd_ablate)

    for sp in (g, t, e, r, a):
        sp.add_argument("--json", action="store_true", help="machine-readable output")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigFileError, ConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataFormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except ContiguityError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_CONTIGUITY
    except WindowError as exc:
        print(f"window error: {exc}", file=sys.stderr)
        return EXIT_WINDOW
    except checkpoint.CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
