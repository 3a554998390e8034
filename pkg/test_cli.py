import json
from pathlib import Path

import numpy as np
import pytest

from dd_geometry import family_from_dict
from stddpc import main

EXAMPLE = Path(__file__).parent / "example_config.json"


def _write_config(tmp_path, name="config.json", **changes) -> str:
    data = json.loads(EXAMPLE.read_text())
    data["reach"] = {"n_star": 1, "N_i": 4, "seed": 5}
    data["verify"] = {"samples": 3, "seed": 1}
    for key, value in changes.items():
        data[key] = value
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return str(path)


@pytest.fixture
def workspace(tmp_path):
    cfg = _write_config(tmp_path)
    dataset = tmp_path / "dataset.csv"
    family = tmp_path / "family.json"
    assert main(["collect", "--config", cfg, "--out", str(dataset)]) == 0
    assert main(["build-sets", "--config", cfg, "--dataset", str(dataset),
                 "--out", str(family)]) == 0
    return tmp_path, cfg, dataset, family


def test_collect_is_reproducible(tmp_path):
    cfg = _write_config(tmp_path)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["collect", "--config", cfg, "--out", str(a)]) == 0
    assert main(["collect", "--config", cfg, "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert len(a.read_text().splitlines()) == 201


def test_collect_without_excitation_fails(tmp_path):
    cfg = _write_config(tmp_path, dataset={"length": 200, "seed": 7, "amplitude": 0.0})
    out = tmp_path / "dead.csv"
    assert main(["collect", "--config", cfg, "--out", str(out)]) == 1
    assert not out.exists()


def test_invalid_config_exits_with_one(tmp_path):
    cfg = _write_config(tmp_path, reach={"n_star": 0, "N_i": 4})
    assert main(["collect", "--config", cfg, "--out", str(tmp_path / "d.csv")]) == 1


def test_corrupted_dataset_exits_with_one(tmp_path):
    cfg = _write_config(tmp_path)
    dataset = tmp_path / "dataset.csv"
    assert main(["collect", "--config", cfg, "--out", str(dataset)]) == 0
    lines = dataset.read_text().splitlines()
    lines[10] = "9,0.1"
    dataset.write_text("\n".join(lines) + "\n")
    assert main(["build-sets", "--config", cfg, "--dataset", str(dataset),
                 "--out", str(tmp_path / "family.json")]) == 1


def test_built_family_is_valid(workspace):
    _, _, _, family = workspace
    fam = family_from_dict(json.loads(family.read_text()))
    assert fam.n_star == 1
    assert fam.N == 6


def test_stddpc_needs_a_family(workspace):
    tmp_path, cfg, dataset, _ = workspace
    assert main(["run", "--config", cfg, "--dataset", str(dataset),
                 "--controller", "stddpc", "--out", str(tmp_path / "run")]) == 1


def test_stddpc_from_rest_converges(workspace):
    tmp_path, _, dataset, family = workspace
    cfg = _write_config(tmp_path, name="rest.json", x0=[0.0, 0.0])
    out = tmp_path / "run"
    assert main(["run", "--config", cfg, "--dataset", str(dataset), "--family", str(family),
                 "--controller", "stddpc", "--out", str(out)]) == 0
    summary = json.loads((out / "stddpc_summary.json").read_text())
    assert summary["converged"]
    assert summary["steps"] == 0
    assert (out / "stddpc_log.csv").read_text().startswith("t,u,y,level,w,status")


def test_stddpc_outside_the_region_exits_with_two(workspace):
    tmp_path, _, dataset, family = workspace
    cfg = _write_config(tmp_path, name="far.json", x0=[100.0, 0.0])
    out = tmp_path / "run"
    assert main(["run", "--config", cfg, "--dataset", str(dataset), "--family", str(family),
                 "--controller", "stddpc", "--out", str(out)]) == 2
    summary = json.loads((out / "stddpc_summary.json").read_text())
    assert summary["reason"] == "outside region of attraction"


def test_ddpc_run_and_plot_data(workspace):
    tmp_path, cfg, dataset, family = workspace
    out = tmp_path / "run"
    assert main(["run", "--config", cfg, "--dataset", str(dataset),
                 "--controller", "ddpc", "--out", str(out)]) == 0
    log_path = out / "ddpc_log.csv"
    steps = len(log_path.read_text().splitlines()) - 1
    assert 1 <= steps <= 8

    plots = tmp_path / "plots"
    assert main(["plotdata", "--family", str(family), "--logs", str(log_path),
                 "--out", str(plots)]) == 0
    index = json.loads((plots / "index.json").read_text())
    assert index["dims"] == [3, 2]
    assert [e["level"] for e in index["levels"]] == [0, 1]
    assert (plots / "level_1_projection.csv").exists()
    series = np.loadtxt(plots / "ddpc_log_series.csv", delimiter=",", skiprows=1, ndmin=2)
    assert series.shape == (steps, 5)
    points = np.loadtxt(plots / "ddpc_log_points.csv", delimiter=",", skiprows=1, ndmin=2)
    assert points.shape == (steps - 1, 6)
    assert points[0, 0] == 2


def test_check_accepts_built_artifacts(workspace):
    tmp_path, cfg, dataset, family = workspace
    report = tmp_path / "report.json"
    assert main(["check", "--config", cfg, "--dataset", str(dataset), "--family", str(family),
                 "--out", str(report)]) == 0
    assert json.loads(report.read_text())["ok"]


def test_check_flags_a_tampered_family(workspace):
    tmp_path, cfg, dataset, family = workspace
    data = json.loads(family.read_text())
    data["levels"][1]["vertices"].append([0.0, 0.0, 6.0, 6.0])
    family.write_text(json.dumps(data))
    report = tmp_path / "report.json"
    assert main(["check", "--config", cfg, "--dataset", str(dataset), "--family", str(family),
                 "--out", str(report)]) == 2
    assert any("outside the constraint boxes" in p
               for p in json.loads(report.read_text())["problems"])
