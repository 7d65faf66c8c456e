import csv
import json

import pytest

from milcl.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from milcl.data import load_dataset

TINY = {
    "synth": {"tasks": 2, "train_per_class": 4, "val_per_class": 2, "test_per_class": 3, "n_min": 10, "n_max": 20},
    "train": {"K": 4, "pool_budget": 4, "epochs": 2, "patience": 1, "hidden": 8},
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(TINY))
    return path


@pytest.fixture
def run(tmp_path, config):
    data, out = tmp_path / "data", tmp_path / "run"
    assert main(["gen-data", "--config", str(config), "--out", str(data)]) == EXIT_OK
    assert main(["train", "--config", str(config), "--data", str(data), "--out", str(out)]) == EXIT_OK
    return data, out


def test_usage_errors_exit_1(config, capsys):
    assert main([]) == EXIT_USAGE
    assert main(["gen-data", "--out", "x"]) == EXIT_USAGE
    assert main(["gen-data", "--config", str(config), "--out", "x", "--bogus"]) == EXIT_USAGE
    assert main(["train", "--config", str(config), "--data", "d", "--out", "o", "--method", "lwf"]) == EXIT_USAGE
    assert main(["gen-data", "--config", str(config), "--out", "x", "--seed", "abc"]) == EXIT_USAGE


def test_non_integer_env_seed_is_usage_error(config, tmp_path, monkeypatch):
    monkeypatch.setenv("MILCL_SEED", "seven")
    assert main(["gen-data", "--config", str(config), "--out", str(tmp_path / "d")]) == EXIT_USAGE


def test_data_errors_exit_2(tmp_path, config):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "d")]) == EXIT_DATA
    bad.write_text(json.dumps({"synth": {"tasks": 0}}))
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "d")]) == EXIT_DATA
    bad.write_text(json.dumps({"synth": {"colour": "red"}}))
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "d")]) == EXIT_DATA
    assert main(["train", "--config", str(config), "--data", str(tmp_path / "missing"),
                 "--out", str(tmp_path / "r")]) == EXIT_DATA


def test_corrupt_bag_exits_2(tmp_path, config):
    data = tmp_path / "data"
    main(["gen-data", "--config", str(config), "--out", str(data)])
    with open(data / "manifest.csv", newline="") as fh:
        first = next(csv.DictReader(fh))["path"]
    raw = (data / first).read_bytes()
    (data / first).write_bytes(b"XXXX" + raw[4:])
    assert main(["train", "--config", str(config), "--data", str(data), "--out", str(tmp_path / "r")]) == EXIT_DATA


def test_seed_flag_beats_environment(tmp_path, config, monkeypatch):
    monkeypatch.setenv("MILCL_SEED", "11")
    main(["gen-data", "--config", str(config), "--out", str(tmp_path / "env")])
    main(["gen-data", "--config", str(config), "--out", str(tmp_path / "flag"), "--seed", "3"])
    monkeypatch.delenv("MILCL_SEED")
    main(["gen-data", "--config", str(config), "--out", str(tmp_path / "s11"), "--seed", "11"])
    main(["gen-data", "--config", str(config), "--out", str(tmp_path / "s3"), "--seed", "3"])
    assert (tmp_path / "env" / "manifest.csv").read_bytes() == (tmp_path / "s11" / "manifest.csv").read_bytes()
    env_bag = sorted((tmp_path / "env").rglob("*.milb"))[0].read_bytes()
    assert env_bag == sorted((tmp_path / "s11").rglob("*.milb"))[0].read_bytes()
    flag_bag = sorted((tmp_path / "flag").rglob("*.milb"))[0].read_bytes()
    assert flag_bag == sorted((tmp_path / "s3").rglob("*.milb"))[0].read_bytes()
    assert flag_bag != env_bag


def test_gen_data_layout(tmp_path, config):
    data = tmp_path / "data"
    assert main(["gen-data", "--config", str(config), "--out", str(data)]) == EXIT_OK
    with open(data / "manifest.csv", newline="") as fh:
        reader = csv.DictReader(fh)
        assert reader.fieldnames == ["path", "label", "task", "split", "bag_id"]
        rows = list(reader)
    assert len(rows) == 2 * 2 * (4 + 2 + 3)
    stream = load_dataset(data)
    assert len(stream.tasks) == 2 and stream.tasks[1].classes == (2, 3)


def test_train_manifest_contents(run):
    _, out = run
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["method"] == "ours"
    assert manifest["config"]["K"] == 4
    assert set(manifest["metrics"]) == {"aacc", "bwt"}
    assert manifest["checkpoints"] == ["session_1.milm", "session_2.milm"]
    for name in manifest["checkpoints"] + manifest["pools"]:
        assert (out / name).exists()
    assert str(out) not in (out / "manifest.json").read_text()


def test_eval_reproduces_training_accuracy(run):
    data, out = run
    assert main(["eval", "--run", str(out), "--data", str(data)]) == EXIT_OK
    report = json.loads((out / "eval.json").read_text())
    manifest = json.loads((out / "manifest.json").read_text())
    assert report["matches_manifest"] and report["matrix"]["rows"] == manifest["matrix"]["rows"]


def test_eval_detects_tampered_manifest(run):
    data, out = run
    manifest = json.loads((out / "manifest.json").read_text())
    manifest["metrics"]["aacc"] = -1.0
    (out / "manifest.json").write_text(json.dumps(manifest))
    assert main(["eval", "--run", str(out), "--data", str(data)]) == EXIT_DATA


def test_eval_with_joint_run_reports_im(run, tmp_path, config):
    data, out = run
    joint = tmp_path / "joint"
    assert main(["train", "--config", str(config), "--data", str(data), "--out", str(joint),
                 "--method", "joint"]) == EXIT_OK
    assert main(["eval", "--run", str(joint), "--data", str(data)]) == EXIT_OK
    assert main(["eval", "--run", str(out), "--data", str(data), "--joint-run", str(joint)]) == EXIT_OK
    assert "im" in json.loads((out / "eval.json").read_text())


def test_analysis_subcommands(run, tmp_path):
    data, out = run
    dec = tmp_path / "decouple.csv"
    assert main(["decouple", "--run", str(out), "--data", str(data), "--out", str(dec)]) == EXIT_OK
    with open(dec, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["row", "col", "accuracy"] and len(rows) == 4

    trace = tmp_path / "gradtrace.csv"
    assert main(["grad-trace", "--run", str(out), "--out", str(trace), "--window", "3"]) == EXIT_OK
    with open(trace, newline="") as fh:
        assert csv.DictReader(fh).fieldnames == ["window", "block", "min", "q1", "median", "q3", "max"]
    assert main(["grad-trace", "--run", str(out), "--out", str(trace), "--window", "0"]) != EXIT_OK

    drift = tmp_path / "drift"
    assert main(["drift", "--run", str(out), "--data", str(data), "--out", str(drift), "--bags", "2"]) == EXIT_OK
    files = sorted(drift.glob("drift_*.csv"))
    assert len(files) == 2
    with open(files[0], newline="") as fh:
        assert csv.DictReader(fh).fieldnames == ["patch", "a_ref", "a_t", "delta"]
    assert main(["drift", "--run", str(out), "--data", str(data), "--out", str(drift), "--session", "9"]) == EXIT_USAGE


def test_missing_run_manifest_exits_2(tmp_path):
    assert main(["grad-trace", "--run", str(tmp_path), "--out", str(tmp_path / "g.csv")]) == EXIT_DATA
