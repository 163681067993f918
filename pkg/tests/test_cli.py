import filecmp
import json
import os

import pytest

from capflow import cli
from capflow.config import ConfigError, Scenario

SCEN_DIR = os.path.join(os.path.dirname(__file__), "..", "scenarios")


def _flat_raw():
    with open(os.path.join(SCEN_DIR, "flat_reference.json")) as fh:
        return json.load(fh)


def test_unknown_key_rejected_with_pointer():
    raw = _flat_raw()
    raw["params"]["taux"] = 1.0
    with pytest.raises(ConfigError) as exc:
        Scenario(raw)
    assert "/params/taux" in str(exc.value)


def test_unknown_top_level_key():
    raw = _flat_raw()
    raw["extra_block"] = {}
    with pytest.raises(ConfigError):
        Scenario(raw)


def test_unknown_stage_rejected():
    raw = _flat_raw()
    raw["stages"] = ["background", "teleport"]
    with pytest.raises(ConfigError):
        Scenario(raw)


def test_cli_exit_code_on_bad_config(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"params": {"nope": 1}}')
    assert cli.main(["--scenario", str(bad), "--out", str(tmp_path / "o")]) == 2


def test_run_artifacts_and_determinism(tmp_path):
    raw = _flat_raw()
    raw["stages"] = ["background", "capital", "dynamics", "transitions"]
    scen = Scenario(raw)
    out1 = tmp_path / "run1"
    out2 = tmp_path / "run2"
    cli.run_scenario(scen, str(out1), seed=5)
    cli.run_scenario(scen, str(out2), seed=5)
    expected = ["background.csv", "scalars.json", "branches.csv",
                "dynamics.csv", "transitions.csv", "manifest.json"]
    for name in expected:
        assert (out1 / name).exists(), name
        assert filecmp.cmp(out1 / name, out2 / name, shallow=False), name


def test_manifest_hash_tracks_inputs(tmp_path):
    raw = _flat_raw()
    raw["stages"] = ["background"]
    s1 = Scenario(raw)
    raw2 = json.loads(json.dumps(raw))
    raw2["params"]["tau"] = 1.0000001
    s2 = Scenario(raw2)
    cli.run_scenario(s1, str(tmp_path / "a"))
    cli.run_scenario(s2, str(tmp_path / "b"))
    m1 = json.loads((tmp_path / "a" / "manifest.json").read_text())
    m2 = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert m1["scenario_sha256"] != m2["scenario_sha256"]
    cli.run_scenario(s1, str(tmp_path / "c"))
    m3 = json.loads((tmp_path / "c" / "manifest.json").read_text())
    assert m1["scenario_sha256"] == m3["scenario_sha256"]


def test_background_csv_flat_uniform(tmp_path):
    raw = _flat_raw()
    raw["stages"] = ["background"]
    cli.run_scenario(Scenario(raw), str(tmp_path / "o"))
    lines = (tmp_path / "o" / "background.csv").read_text().strip().split("\n")
    assert lines[0] == "X,firm_density,K_X,A,p,f,g"
    dens = [float(l.split(",")[1]) for l in lines[1:]]
    assert len(dens) == 16
    assert max(dens) - min(dens) < 1e-6 * max(dens)


def test_sweep_consolidation(tmp_path):
    raw = _flat_raw()
    raw["stages"] = ["background", "capital"]
    raw["sweep"] = {"path": "params.tau", "values": [0.8, 1.0, 1.2]}
    scen = Scenario(raw)
    failures = cli.run_sweep(scen, str(tmp_path / "sw"))
    assert failures == 0
    table = (tmp_path / "sw" / "sweep_branches.csv").read_text().strip()
    rows = table.split("\n")[1:]
    swept = {r.split(",")[0] for r in rows}
    assert len(swept) == 3
    for i in range(3):
        assert (tmp_path / "sw" / f"sweep_{i:03d}" / "branches.csv").exists()


def test_single_value_sweep_matches_run(tmp_path):
    raw = _flat_raw()
    raw["stages"] = ["background", "capital"]
    scen = Scenario(raw)
    cli.run_scenario(scen, str(tmp_path / "direct"))
    raw["sweep"] = {"path": "params.tau", "values": [1.0]}
    cli.run_sweep(Scenario(raw), str(tmp_path / "sw"))
    assert filecmp.cmp(tmp_path / "direct" / "branches.csv",
                       tmp_path / "sw" / "sweep_000" / "branches.csv",
                       shallow=False)


def test_stage_subset_flag(tmp_path):
    scen_path = os.path.join(SCEN_DIR, "flat_reference.json")
    code = cli.main(["--scenario", scen_path, "--out",
                     str(tmp_path / "o"), "--stages", "background"])
    assert code == 0
    assert (tmp_path / "o" / "background.csv").exists()
    assert not (tmp_path / "o" / "branches.csv").exists()
