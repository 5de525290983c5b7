import hashlib
import json
import shutil
from pathlib import Path

import pytest

from agsense import cli, ground_deploy
from agsense.scenario import parse_config

DATA = Path(__file__).parent / "data"
ORACLE6_ENTROPY = 2.106062940612799  # frozen from the ground_deploy oracle instance

SMALL = """\
name: small
seed: 1
field:
  grid: {nx: 4, ny: 4, nz: 1, cell_size: 50.0, t_step: 60.0, n_steps: 240}
  dynamics: {diffusivity: 1.0, background: 30.0}
  sources:
    - {position: [50, 50, 0], emission_rate: 1000.0, active_window: [0, 14400]}
sensor: {sigma_rel: 0.02}
link: {latency_s: 1.0, jitter_s: 0.5}
simulation: {duration_min: 240}
devices:
  - {id: d0, position: [0, 0, 0], sensing_interval_min: 5, uploading_interval_min: 10}
  - {id: d1, position: [150, 0, 0], sensing_interval_min: 5, uploading_interval_min: 10}
  - {id: d2, position: [0, 150, 0], sensing_interval_min: 5, uploading_interval_min: 10}
  - {id: d3, position: [150, 150, 0], sensing_interval_min: 5, uploading_interval_min: 10}
commands:
  - {device_id: d0, sensing_interval_min: 2, uploading_interval_min: 4, issue_time: 3630}
"""


def run(*argv):
    return cli.main([str(a) for a in argv])


def files(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture
def small(tmp_path):
    p = tmp_path / "small.yaml"
    p.write_text(SMALL)
    return p


@pytest.fixture
def oracle(tmp_path):
    for name in ("oracle6.yaml", "oracle6.csv"):
        shutil.copy(DATA / name, tmp_path / name)
    return tmp_path / "oracle6.yaml"


def test_simulate_smoke(small, tmp_path):
    assert run("simulate", small, "--out", tmp_path / "o", "--reproducible") == cli.EXIT_OK
    out = tmp_path / "o" / "simulate"
    assert sorted(p.name for p in out.iterdir()) == ["ledger.json", "manifest.json", "samples.csv", "summary.json"]
    man = json.loads((out / "manifest.json").read_text())
    assert man["config_sha256"] == hashlib.sha256(small.read_bytes()).hexdigest()
    assert man["status"] == "ok" and "wall_clock" not in man
    listed = {a["path"]: a for a in man["artifacts"]}
    assert set(listed) == {"ledger.json", "samples.csv", "summary.json"}
    for name, a in listed.items():
        data = (out / name).read_bytes()
        assert a["bytes"] == len(data) and a["sha256"] == hashlib.sha256(data).hexdigest()
    assert man["sim_time_s"] == {"start": 0.0, "end": 14400.0}


def test_reproducible_runs_are_byte_identical(small, tmp_path):
    for k in ("a", "b"):
        assert run("simulate", small, "--out", tmp_path / k, "--reproducible") == 0
    assert files(tmp_path / "a") == files(tmp_path / "b")


def test_wall_clock_only_in_normal_mode(small, tmp_path):
    run("simulate", small, "--out", tmp_path / "r", "--reproducible")
    run("simulate", small, "--out", tmp_path / "n")
    r, n = files(tmp_path / "r"), files(tmp_path / "n")
    man = json.loads(n.pop("simulate/manifest.json"))
    assert "wall_clock" in man
    r.pop("simulate/manifest.json")
    assert r == n


def test_rerun_after_delete_reproduces(small, tmp_path):
    run("simulate", small, "--out", tmp_path / "o", "--reproducible")
    first = files(tmp_path / "o")
    shutil.rmtree(tmp_path / "o")
    run("simulate", small, "--out", tmp_path / "o", "--reproducible")
    assert files(tmp_path / "o") == first


def test_ledger_matches_charge_delta(small, tmp_path):
    run("simulate", small, "--out", tmp_path / "o", "--reproducible")
    ledgers = json.loads((tmp_path / "o" / "simulate" / "ledger.json").read_text())
    for led in ledgers.values():
        assert sum(led["entries_units"].values()) == led["initial_units"] - led["final_units"]


def test_validate_prints_canonical_form(small, capsys):
    assert run("validate", small) == 0
    echo = capsys.readouterr().out
    assert parse_config(echo).cfg == parse_config(small.read_text()).cfg


def test_validation_failure_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text(SMALL.replace("sensing_interval_min: 5, uploading", "sensing_interval_min: 0, uploading", 1))
    assert run("simulate", bad, "--out", tmp_path / "o") == cli.EXIT_CONFIG
    assert "devices[0].sensing_interval_min" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()
    assert run("validate", tmp_path / "missing.yaml") == cli.EXIT_CONFIG


def test_missing_section_fails_before_work(small, tmp_path, capsys):
    assert run("plan-uav", small, "--out", tmp_path / "o") == cli.EXIT_CONFIG
    assert "uav" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()
    for args in (["fit-eval"], ["predict-eval"], ["deploy"], ["sweep", "hover"]):
        assert run(*args, small, "--out", tmp_path / "o") == cli.EXIT_CONFIG


def test_deploy_on_oracle_instance(oracle, tmp_path):
    assert run("deploy", oracle, "--out", tmp_path / "o", "--reproducible") == 0
    plan = json.loads((tmp_path / "o" / "deploy" / "plan.json").read_text())
    assert plan["mean_entropy"] == pytest.approx(ORACLE6_ENTROPY, abs=1e-12)
    assert plan["selected"] == ["C0", "C2", "C4"]
    man = json.loads((tmp_path / "o" / "deploy" / "manifest.json").read_text())
    assert sorted(a["path"] for a in man["artifacts"]) == ["plan.json", "survey.csv", "weights.json"]


def test_runtime_failure_exit_code(oracle, tmp_path, capsys):
    oracle.write_text(oracle.read_text().replace("n: 3", "n: 6"))
    assert run("deploy", oracle, "--out", tmp_path / "o") == cli.EXIT_RUNTIME
    man = json.loads((tmp_path / "o" / "deploy" / "manifest.json").read_text())
    assert man["status"] == "failed"


def test_non_convergence_exit_code(oracle, tmp_path, monkeypatch):
    real = ground_deploy.learn_weights

    def capped(*a, **k):
        w = real(*a, **k)
        w.converged = False
        return w

    monkeypatch.setattr(ground_deploy, "learn_weights", capped)
    assert run("deploy", oracle, "--out", tmp_path / "o") == cli.EXIT_NONCONVERGED


def test_export_field(small, tmp_path):
    assert run("export-field", small, "--out", tmp_path / "o", "--every", 60) == 0
    lines = (tmp_path / "o" / "export-field" / "field.csv").read_text().splitlines()
    header = [ln for ln in lines if not ln.startswith("#")][0]
    assert header == "x,y,z,t,value"
    # 16 nodes at t = 0, 3600, ..., 14400
    assert len([ln for ln in lines if not ln.startswith("#")]) == 1 + 16 * 5


def test_lists_bundled_scenarios(capsys):
    assert run("scenarios") == 0
    assert capsys.readouterr().out.split() == ["campus-like", "plume-dynamic", "static-field"]


def test_short_message_lands_on_next_tick(small, tmp_path):
    run("simulate", small, "--out", tmp_path / "o", "--reproducible")
    summary = json.loads((tmp_path / "o" / "simulate" / "summary.json").read_text())
    applied = [e for e in summary["command_log"] if e["event"] == "command_applied"]
    assert [e["time"] for e in applied] == [3660.0]
