import json
import subprocess
import sys

import pytest

from mfsmp import __version__
from mfsmp.cli import main, run


def write_config(tmp_path, conf, name="conf.json"):
    path = tmp_path / name
    path.write_text(json.dumps(conf))
    return path


def invoke(tmp_path, command, conf, *extra):
    cfg = write_config(tmp_path, conf)
    return main([command, "--config", str(cfg), "--out", str(tmp_path / "out"), *extra])


def test_check_strict_oracle_exit_ok_and_outputs(tmp_path):
    code = invoke(tmp_path, "check-strict", {"problem": "lq", "N": 1000, "L": 64, "control": "oracle"})
    assert code == 0
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert report["config"]["seed"] == 0 and report["config"]["L"] == 64
    assert report["result"]["passed"] is True
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["version"] == __version__ and manifest["problem"] == "lq"
    assert len(manifest["spec_hash"]) > 8
    assert (tmp_path / "out" / "tables" / "hamiltonian.csv").exists()


def test_verdict_failure_exit_one(tmp_path):
    conf = {"problem": "lq", "N": 500, "L": 32, "control": {"constant": 2.0}}
    assert invoke(tmp_path, "check-strict", conf) == 1


@pytest.mark.parametrize("conf, code", [
    ({"problem": "lq", "L": 32}, 2),
    ({"problem": "lq", "N": 1, "L": 32}, 2),
    ({"problem": "nope", "N": 10}, 3),
    ({"N": 10}, 2),
    ({"problem": "lq", "N": 2, "L": 16}, 5),
])
def test_exit_codes(tmp_path, conf, code):
    assert invoke(tmp_path, "check-strict", conf) == code


def test_malformed_json_exit_four(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["cost", "--config", str(bad), "--out", str(tmp_path / "o")]) == 4


def test_missing_config_file_exit_two(tmp_path):
    assert main(["cost", "--config", str(tmp_path / "absent.json")]) == 2


def test_seed_override_recorded(tmp_path):
    invoke(tmp_path, "cost", {"problem": "lq", "N": 50, "L": 16, "seed": 3}, "--seed", "11")
    assert json.loads((tmp_path / "out" / "report.json").read_text())["config"]["seed"] == 11


def test_tables_deterministic_across_runs(tmp_path):
    conf = {"problem": "oscillating", "ns": [1, 2, 4]}
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("chattering-study", conf, a) == 0
    assert run("chattering-study", conf, b) == 0
    ta = (a / "tables" / "chattering.csv").read_bytes()
    assert ta == (b / "tables" / "chattering.csv").read_bytes()
    assert b"\r\n" not in ta
    assert ta.splitlines()[0] == b"n,J_chattered,J_relaxed,abs_gap,bound_1_over_n2,weak_distance"


def test_improve_writes_paths_that_load_back(tmp_path):
    conf = {"problem": "singular", "N": 300, "L": 16, "iterations": 10}
    assert run("improve", conf, tmp_path / "o") == 0
    eta_csv = (tmp_path / "o" / "eta.csv").read_text()
    conf2 = {"problem": "singular", "N": 300, "L": 16, "eta": {"csv": str(tmp_path / "o" / "eta.csv")}}
    assert run("cost", conf2, tmp_path / "o2") == 0
    cost = json.loads((tmp_path / "o2" / "report.json").read_text())["result"]["cost"]["total"]
    hist = (tmp_path / "o" / "tables" / "history.csv").read_text().splitlines()
    assert float(hist[-1].split(",")[1]) == pytest.approx(cost)
    assert eta_csv.splitlines()[1].startswith("0.0,0.0,")


def test_simulate_binary_and_relaxed(tmp_path):
    conf = {"problem": "lq", "N": 20, "L": 8, "write_binary": True, "relaxed": {"uniform": [-1, 1]}}
    assert run("simulate", conf, tmp_path / "o") == 0
    assert (tmp_path / "o" / "trajectories.bin").stat().st_size == 24 + 8 * 20 * 9


def test_duality_study_small(tmp_path):
    conf = {"problem": "lq", "N": 200, "Ls": [16, 32]}
    assert run("duality-study", conf, tmp_path / "o") == 0
    rows = (tmp_path / "o" / "tables" / "duality.csv").read_text().splitlines()
    assert len(rows) == 3
    gaps = [float(r.split(",")[3]) for r in rows[1:]]
    assert max(gaps) < 1e-10


def test_console_script_version():
    out = subprocess.run([sys.executable, "-m", "mfsmp.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and __version__ in out.stdout
