import csv
import hashlib
import json
import shutil

import numpy as np
import pytest
import yaml

from stflow import checkpoint
from stflow.cli import main
from stflow.data import load_dataset


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy") / "data"
    assert main(["generate", "--v", "10", "--days", "120", "--seed", "3", "--out", str(out)]) == 0
    return out


def write_config(tmp_path, data, name="cfg.yaml", **sections):
    cfg = {"data": {"dir": str(data)}, "train": {"epochs": 5, "seeds": [0]}, "output": {"dir": str(tmp_path / "run")}}
    for key, val in sections.items():
        cfg.setdefault(key, {}).update(val)
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return path


def test_generate_writes_five_identical_files(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["generate", "--v", "50", "--days", "200", "--seed", "7", "--out", str(out)]) == 0
    names = sorted(p.name for p in a.iterdir())
    assert names == ["edges.csv", "flows.csv", "holidays.csv", "profiles.csv", "weather.csv"]
    for n in names:
        assert digest(a / n) == digest(b / n)


def test_generate_invalid_spec(tmp_path):
    assert main(["generate", "--v", "1", "--out", str(tmp_path / "x")]) == 2


def test_generated_roundtrip(data_dir):
    ds = load_dataset(data_dir)
    assert ds.flows.shape == (10, 120)
    assert len(ds.edges) >= 9


def test_train_end_to_end(tmp_path, data_dir):
    cfg = write_config(tmp_path, data_dir)
    assert main(["train", str(cfg)]) == 0
    run = tmp_path / "run"
    assert (run / "checkpoint.json").exists()
    with open(run / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert {r["variant"] for r in rows} == {"full", "persistence"}
    assert all(np.isfinite(float(r[m])) for r in rows for m in ("rmse", "mape", "mae"))
    hist = json.loads((run / "history.json").read_text())
    assert len(hist["train_loss"]) == 5 and hist["train_days"] == 105


def test_train_deterministic(tmp_path, data_dir):
    hashes = []
    for i in range(2):
        cfg = write_config(tmp_path, data_dir, name=f"c{i}.yaml", output={"dir": str(tmp_path / f"r{i}")})
        assert main(["train", str(cfg)]) == 0
        hashes.append((digest(tmp_path / f"r{i}" / "checkpoint.json"), digest(tmp_path / f"r{i}" / "metrics.csv")))
    assert hashes[0] == hashes[1]


def test_seed_env_override(tmp_path, data_dir, monkeypatch):
    monkeypatch.setenv("STFLOW_SEED", "11")
    cfg = write_config(tmp_path, data_dir)
    assert main(["train", str(cfg)]) == 0
    assert json.loads((tmp_path / "run" / "history.json").read_text())["seed"] == 11


def test_lambda_ignores_test_rows(tmp_path, data_dir):
    altered = tmp_path / "altered"
    shutil.copytree(data_dir, altered)
    lines = (altered / "flows.csv").read_text().splitlines()
    out = [lines[0]]
    for line in lines[1:]:
        sid, day, flow = line.split(",")
        if day >= "2017-08-14":  # the 15 held-out days
            flow = f"{float(flow) * 40:.3f}"
        out.append(",".join((sid, day, flow)))
    (altered / "flows.csv").write_text("\n".join(out) + "\n")
    lams = []
    for name, d in (("a", data_dir), ("b", altered)):
        cfg = write_config(tmp_path, d, name=f"{name}.yaml", train={"epochs": 1},
                           output={"dir": str(tmp_path / name)})
        assert main(["train", str(cfg)]) == 0
        lams.append(json.loads((tmp_path / name / "history.json").read_text())["lambda"])
    assert lams[0] == lams[1]


def test_corrupt_csv_row(tmp_path, data_dir, capsys):
    bad = tmp_path / "bad"
    shutil.copytree(data_dir, bad)
    lines = (bad / "flows.csv").read_text().splitlines()
    lines[6] = "S000,2017-05-06,not-a-number"
    (bad / "flows.csv").write_text("\n".join(lines) + "\n")
    assert main(["train", str(write_config(tmp_path, bad))]) == 3
    assert "flows.csv:7" in capsys.readouterr().err


def test_noncontiguous_dates(tmp_path, data_dir):
    gap = tmp_path / "gap"
    shutil.copytree(data_dir, gap)
    lines = (gap / "flows.csv").read_text().splitlines()
    kept = [lines[0]] + [l for l in lines[1:] if l.split(",")[1] != "2017-06-01"]
    (gap / "flows.csv").write_text("\n".join(kept) + "\n")
    assert main(["train", str(write_config(tmp_path, gap))]) == 4


def test_too_few_days(tmp_path):
    small = tmp_path / "small"
    assert main(["generate", "--v", "4", "--days", "20", "--out", str(small)]) == 0
    assert main(["train", str(write_config(tmp_path, small))]) == 5


def test_config_errors(tmp_path, data_dir):
    bad = write_config(tmp_path, data_dir, model={"colour": "red"})
    assert main(["train", str(bad)]) == 2
    missing = tmp_path / "m.yaml"
    missing.write_text(yaml.safe_dump({"data": {"dir": str(tmp_path / "nowhere")}}))
    assert main(["train", str(missing)]) == 2
    assert main(["train", str(tmp_path / "absent.yaml")]) == 2


@pytest.fixture(scope="module")
def trained(tmp_path_factory, data_dir):
    tmp = tmp_path_factory.mktemp("trained")
    paths = {}
    for variant in ("full", "nonE"):
        cfg = write_config(tmp, data_dir, name=f"{variant}.yaml", model={"variant": variant},
                           train={"epochs": 20}, output={"dir": str(tmp / variant)})
        assert main(["train", str(cfg)]) == 0
        paths[variant] = tmp / variant / "checkpoint.json"
    return paths


def test_predict_rows_and_band(tmp_path, trained, data_dir):
    out = tmp_path / "pred.csv"
    assert main(["predict", str(trained["full"]), "--data", str(data_dir), "--out", str(out)]) == 0
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 10
    assert set(rows[0]) == {"station_id", "date", "predicted_flow", "vital_few"}
    flows = load_dataset(data_dir).flows
    vals = np.array([float(r["predicted_flow"]) for r in rows])
    assert np.all(vals >= 0.1 * flows.min()) and np.all(vals <= 10 * flows.max())
    assert rows[0]["date"] == "2017-08-29"


def test_predict_insufficient_history(trained, data_dir):
    assert main(["predict", str(trained["full"]), "--data", str(data_dir), "--date", "2017-05-05"]) == 6


def test_predict_weather_requirement(tmp_path, trained, data_dir):
    dry = tmp_path / "dry"
    shutil.copytree(data_dir, dry)
    (dry / "weather.csv").unlink()
    assert main(["predict", str(trained["nonE"]), "--data", str(dry), "--out", str(tmp_path / "p.csv")]) == 0
    assert main(["predict", str(trained["full"]), "--data", str(dry)]) == 3


def test_evaluate_command(trained, data_dir, capsys):
    assert main(["evaluate", str(trained["full"]), "--data", str(data_dir), "--json"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["windows"] == 15 and np.isfinite(report["metrics"]["mape"])


def test_checkpoint_roundtrip_bitwise(tmp_path, trained):
    fc, doc = checkpoint.load(trained["full"])
    again = tmp_path / "again.json"
    geo = np.array(doc["graphs"]["geographic"]["data"]).reshape(doc["graphs"]["geographic"]["shape"])
    inf = np.array(doc["graphs"]["influential"]["data"]).reshape(doc["graphs"]["influential"]["shape"])
    checkpoint.save(again, fc, doc["stations"], doc["last_day"], geo, inf)
    assert again.read_bytes() == trained["full"].read_bytes()


def test_checkpoint_rejects_tampering(tmp_path, trained, data_dir):
    doc = json.loads(trained["full"].read_text())
    doc["normalization"]["lambda"] += 0.5
    tampered = tmp_path / "t.json"
    tampered.write_text(json.dumps(doc))
    assert main(["predict", str(tampered), "--data", str(data_dir)]) == 7
    doc = json.loads(trained["full"].read_text())
    doc["version"] = 99
    old = tmp_path / "v.json"
    old.write_text(json.dumps(doc))
    with pytest.raises(checkpoint.CheckpointError, match="version"):
        checkpoint.load(old)


def test_ablate_counts(tmp_path, data_dir):
    cfg = write_config(tmp_path, data_dir, train={"epochs": 1, "seeds": [0, 1, 2, 3, 4]},
                       ablate={"variants": ["full", "gs", "rs", "nonE", "nonT"]})
    assert main(["ablate", str(cfg)]) == 0
    run = tmp_path / "run"
    with open(run / "ablation.csv") as fh:
        table = list(csv.DictReader(fh))
    assert [r["variant"] for r in table] == ["full", "gs", "rs", "nonE", "nonT"]
    assert all(r["runs"] == "5" for r in table)
    doc = json.loads((run / "ablation.json").read_text())
    assert sum(len(v["runs"]) for v in doc["variants"]) == 25
    assert set(doc["baseline"]) == {"rmse", "mape", "mae"}


def test_ablate_identical_variants_identical_rows(tmp_path, data_dir):
    cfg = write_config(tmp_path, data_dir, train={"epochs": 1, "seeds": [0, 1]}, ablate={"variants": ["nonE"]})
    assert main(["ablate", str(cfg)]) == 0
    first = (tmp_path / "run" / "ablation.csv").read_bytes()
    assert main(["ablate", str(cfg)]) == 0
    assert (tmp_path / "run" / "ablation.csv").read_bytes() == first
