import json
import logging
import math
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from src.config import OUT_DIR_ENV
from src.flow import flow_log_prob
from src.main import run, setup_logging
from src.parser import build_parser
from src.persistence import load_coverage, load_model, load_record
from src.regions import load_region

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
PIPELINE = ["simulate", "train", "calibrate", "region", "coverage", "sample"]


def tiny_config(**sections):
    doc = {
        "data": {"source": "particle", "n": 120, "context_len": 4, "horizon": 1, "sigma": 0.05,
                 "seed": 3},
        "model": {"n_layers": 2, "hidden_dim": 4, "net_width": 8, "net_depth": 1},
        "train": {"epochs": 2, "batch_size": 32, "learning_rate": 0.001, "seed": 1},
        "split": {"train": 60, "calibration": 30, "seed": 2},
        "region": {"cells": 20, "n_samples": 200, "volume_series": 2, "box_samples": 50,
                   "forecast_samples": 5},
        "epsilons": [0.1, 0.2],
    }
    for name, values in sections.items():
        if isinstance(doc.get(name), dict):
            doc[name].update(values)
        else:
            doc[name] = values
    return doc


@pytest.fixture
def config_file(tmp_path):
    def write(**sections):
        path = tmp_path / "config.json"
        path.write_text(json.dumps(tiny_config(**sections)))
        return str(path)

    return write


def run_pipeline(config, out, commands=PIPELINE, extra=()):
    return [run([command, "--config", config, "--out", str(out), "-q", *extra])
            for command in commands]


def test_full_pipeline_writes_every_artifact(tmp_path, config_file):
    out = tmp_path / "out"
    assert run_pipeline(config_file(), out) == [0] * len(PIPELINE)
    for name in ("data.csv", "data.meta.json", "model.json", "loss_trace.csv",
                 "calibration.json", "region.json", "region.csv", "coverage.json",
                 "coverage.csv", "samples.csv"):
        assert (out / name).exists(), name

    model, record = load_model(out / "model.json"), load_record(out / "calibration.json")
    assert record.size == 30
    assert record.model_hash == model.model_hash()
    assert len(pd.read_csv(out / "loss_trace.csv")) == 2

    region = load_region(out / "region.json")
    assert region.mode == "grid" and region.epsilon == 0.1
    assert region.n_candidates == 400
    region_doc = json.loads((out / "region.json").read_text())
    assert region_doc["run_config"]["epsilons"] == [0.1, 0.2]
    assert region_doc["run_config"]["region"]["cells"] == 20

    report = load_coverage(out / "coverage.json")
    assert [row["epsilon"] for row in report["rows"]] == [0.1, 0.2]
    assert all(row["total"] == 30 for row in report["rows"])
    lines = (out / "coverage.csv").read_text().splitlines()
    assert lines[1].startswith("0.1,") and lines[2].startswith("0.2,")

    samples = pd.read_csv(out / "samples.csv")
    assert list(samples.columns) == ["sample", "step", "v0", "v1"]
    assert len(samples) == 5


def test_pipeline_is_deterministic(tmp_path, config_file):
    config = config_file()
    first, second = tmp_path / "a", tmp_path / "b"
    assert run_pipeline(config, first) == [0] * len(PIPELINE)
    assert run_pipeline(config, second) == [0] * len(PIPELINE)
    for path in sorted(first.iterdir()):
        assert path.read_bytes() == (second / path.name).read_bytes(), path.name


def test_zero_epochs_leave_a_standard_normal_flow(tmp_path, config_file):
    out = tmp_path / "out"
    assert run_pipeline(config_file(), out, ["simulate", "train"], ["--epochs", "0"]) == [0, 0]
    model = load_model(out / "model.json")
    value = flow_log_prob(model, np.zeros((4, 2)), np.zeros(2))
    assert abs(value + math.log(2 * math.pi)) < 1e-12
    assert len(pd.read_csv(out / "loss_trace.csv")) == 0


def test_mc_region_and_volume_report(tmp_path, config_file):
    out = tmp_path / "out"
    run_pipeline(config_file(), out, ["simulate", "train", "calibrate"])
    assert run(["region", "--config", config_file(), "--out", str(out), "--mode", "mc",
                "--series", "1", "-q"]) == 0
    region = load_region(out / "region.json")
    assert region.mode == "mc" and region.series == 1
    assert region.volume_method in ("importance", "empty")

    assert run(["coverage", "--config", config_file(), "--out", str(out), "--volume", "-q"]) == 0
    rows = load_coverage(out / "coverage.json")["rows"]
    assert all(row["mean_volume"] >= 0 and row["mean_box_volume"] > 0 for row in rows)
    assert all(0.0 <= row["box_coverage"] <= 1.0 for row in rows)


def test_tiny_epsilon_includes_everything(tmp_path, config_file):
    out = tmp_path / "out"
    run_pipeline(config_file(), out, ["simulate", "train", "calibrate"])
    assert run(["coverage", "--config", config_file(), "--out", str(out), "--epsilon", "0.02",
                "-q"]) == 0
    [row] = load_coverage(out / "coverage.json")["rows"]
    assert row["include_all"] and row["threshold"] is None
    assert row["coverage"] == 1.0


def test_grid_mode_refuses_large_label_space(tmp_path, config_file):
    config = config_file(data={"horizon": 2})
    out = tmp_path / "out"
    assert run_pipeline(config, out, ["simulate", "train", "calibrate"]) == [0, 0, 0]
    assert run(["region", "--config", config, "--out", str(out), "-q"]) == 2
    assert run(["region", "--config", config, "--out", str(out), "--mode", "mc", "-q"]) == 0


def test_config_errors_exit_with_code_2(tmp_path, config_file):
    out = str(tmp_path / "out")
    assert run(["simulate", "--config", config_file(), "--out", out, "--epsilon", "1.5"]) == 2
    assert run(["simulate", "--config", str(tmp_path / "missing.json"), "--out", out]) == 2
    assert run(["simulate", "--config", config_file(extra={"a": 1}), "--out", out]) == 2


def test_missing_artifact_exits_with_code_7(tmp_path, config_file):
    out = tmp_path / "out"
    run_pipeline(config_file(), out, ["simulate"])
    assert run(["calibrate", "--config", config_file(), "--out", str(out), "-q"]) == 7


def test_changed_configuration_is_refused(tmp_path, config_file):
    out = tmp_path / "out"
    run_pipeline(config_file(), out, ["simulate", "train", "calibrate"])
    assert run(["coverage", "--config", config_file(), "--out", str(out), "--epochs", "3",
                "-q"]) == 6

    doc = json.loads((out / "calibration.json").read_text())
    doc["model_hash"] = "0" * 64
    (out / "calibration.json").write_text(json.dumps(doc))
    assert run(["coverage", "--config", config_file(), "--out", str(out), "-q"]) == 6


def test_series_index_out_of_range(tmp_path, config_file):
    out = tmp_path / "out"
    run_pipeline(config_file(), out, ["simulate", "train", "calibrate"])
    assert run(["region", "--config", config_file(), "--out", str(out), "--series", "30",
                "-q"]) == 3


@pytest.mark.parametrize("flags, level", [({}, logging.INFO), ({"verbose": True}, logging.DEBUG),
                                          ({"quiet": True}, logging.WARNING)])
def test_logging_level_follows_flags(flags, level):
    setup_logging(**flags)
    assert logging.getLogger().level == level


def test_parser_accepts_pipeline_commands_only():
    assert build_parser().parse_args(["region", "--mode", "mc"]).mode == "mc"
    with pytest.raises(SystemExit):
        build_parser().parse_args(["plot"])


def test_output_directory_from_environment(tmp_path, config_file, monkeypatch):
    target = tmp_path / "from-env"
    monkeypatch.setenv(OUT_DIR_ENV, str(target))
    assert run(["simulate", "--config", config_file(), "-q"]) == 0
    assert (target / "data.csv").exists()


@pytest.mark.slow
def test_coverage_matches_significance_level(tmp_path, config_file):
    config = config_file(
        data={"n": 3600, "context_len": 8, "horizon": 2},
        model={"n_layers": 4, "hidden_dim": 8, "net_width": 16},
        train={"epochs": 10, "batch_size": 64},
        split={"train": 600, "calibration": 1000},
    )
    out = tmp_path / "out"
    assert run_pipeline(config, out, ["simulate", "train", "calibrate", "coverage"]) == [0] * 4
    rows = {row["epsilon"]: row for row in load_coverage(out / "coverage.json")["rows"]}
    assert rows[0.1]["total"] == 2000
    assert 0.86 <= rows[0.1]["coverage"] <= 0.94
    assert 0.75 <= rows[0.2]["coverage"] <= 0.85


@pytest.mark.slow
@pytest.mark.parametrize("name", ["particle.json", "particle1.json"])
def test_shipped_particle_configs_reach_nominal_coverage(tmp_path, name):
    out = tmp_path / "out"
    commands = ["simulate", "train", "calibrate", "coverage"]
    assert run_pipeline(str(CONFIGS / name), out, commands) == [0] * 4
    rows = {row["epsilon"]: row for row in load_coverage(out / "coverage.json")["rows"]}
    assert rows[0.1]["total"] == 1000
    assert 0.86 <= rows[0.1]["coverage"] <= 0.94
    assert 0.76 <= rows[0.2]["coverage"] <= 0.84


@pytest.mark.slow
def test_bimodal_config_gives_two_region_components(tmp_path):
    out = tmp_path / "out"
    commands = ["simulate", "train", "calibrate", "region"]
    assert run_pipeline(str(CONFIGS / "bimodal.json"), out, commands) == [0] * 4
    region = load_region(out / "region.json")
    assert region.epsilon == 0.1
    assert region.n_components == 2
