import json
import subprocess
import sys

import pytest

from stochkam import cli


def write(tmp_path, cfg, name="cfg.json"):
    f = tmp_path / name
    f.write_text(json.dumps(cfg) if not isinstance(cfg, str) else cfg)
    return str(f)


def invoke(tmp_path, cfg, out="out"):
    out_dir = tmp_path / out
    code = cli.main(["run", write(tmp_path, cfg), "--out", str(out_dir)])
    return code, out_dir


BASE = {"system": "harmonic", "field": "identity", "grid": {"T": 1.0, "N": 50}}

CONFIGS = {
    "simulate": {**BASE, "command": "simulate", "noise": {"gamma": 0.3, "M": 3, "seed": 1},
                 "options": {"x0": [1.0, 0.0]}},
    "om-eval": {**BASE, "command": "om-eval", "options": {"path": {"constant": [1.0, 0.0]}}},
    "mpp": {**BASE, "command": "mpp", "options": {"x0": [1.0, 0.0], "xT_from_flow": True}},
    "tube": {**BASE, "command": "tube", "noise": {"gamma": 0.5, "M": 500, "seed": 2},
             "options": {"epsilon": 0.5, "reference": {"flow": [1.0, 0.0]}}},
    "ldp": {**BASE, "command": "ldp", "noise": {"M": 500, "seed": 2},
            "options": {"epsilon": 0.5, "gammas": [0.5, 0.3], "reference": {"flow": [1.0, 0.0]}}},
    "kam-scan": {"command": "kam-scan", "system": "twist2d", "field": "identity", "grid": {"T": 100.0, "N": 2000},
                 "options": {"etas": [0.0, 0.01], "golden_scales": [0.3, 0.4],
                             "params": {"l": 10, "nu": 3, "alpha": 1e-3}}},
    "check-conditions": {"command": "check-conditions", "system": "harmonic", "field": "diag_poly"},
}

OUTPUTS = {
    "simulate": ["simulate.json"],
    "om-eval": ["om_eval.json"],
    "mpp": ["mpp.csv", "mpp.json"],
    "tube": ["tube.json"],
    "ldp": ["ldp.csv", "ldp.json"],
    "kam-scan": ["persistence.csv", "persistence.txt"],
    "check-conditions": ["conditions.json"],
}


@pytest.mark.parametrize("cmd", sorted(CONFIGS))
def test_command_runs_and_writes_manifest(cmd, tmp_path):
    code, out = invoke(tmp_path, CONFIGS[cmd])
    assert code == 0
    for f in OUTPUTS[cmd]:
        assert (out / f).exists()
    man = json.loads((out / "manifest.json").read_text())
    assert man["command"] == cmd and man["status"] == "ok"
    assert man["config"] == CONFIGS[cmd]
    for key in ("seed", "versions", "backend", "jit", "wall_time_s", "files"):
        assert key in man
    assert "numpy" in man["versions"] and "stochkam" in man["versions"]


@pytest.mark.parametrize("cmd", ["simulate", "mpp", "tube", "ldp", "kam-scan"])
def test_outputs_are_deterministic(cmd, tmp_path):
    _, a = invoke(tmp_path, CONFIGS[cmd], "a")
    _, b = invoke(tmp_path, CONFIGS[cmd], "b")
    for f in OUTPUTS[cmd]:
        assert (a / f).read_bytes() == (b / f).read_bytes()


def test_check_conditions_verdicts(tmp_path):
    code, out = invoke(tmp_path, CONFIGS["check-conditions"])
    res = json.loads((out / "manifest.json").read_text())["result"]
    assert code == 0
    assert res["C2"] == "pass" and res["C3-frobenius"] == "fail" and res["C4"] == "pass"


def test_mpp_on_orbit_has_zero_action(tmp_path):
    code, out = invoke(tmp_path, CONFIGS["mpp"])
    res = json.loads((out / "mpp.json").read_text())
    assert code == 0 and res["converged"]
    assert res["action"]["total"] <= 1e-6
    lines = (out / "mpp.csv").read_text().splitlines()
    assert lines[0] == "t,x1,x2" and len(lines) == 52


def test_ldp_csv_columns(tmp_path):
    _, out = invoke(tmp_path, CONFIGS["ldp"])
    lines = (out / "ldp.csv").read_text().splitlines()
    assert lines[0] == "gamma,p_hat,se,g2logp,lo,hi,hits,usable" and len(lines) == 3


def test_command_argument_overrides_config(tmp_path):
    cfg = dict(CONFIGS["om-eval"], command="tube")
    code = cli.main(["om-eval", write(tmp_path, cfg), "--out", str(tmp_path / "o")])
    assert code == 0 and (tmp_path / "o" / "om_eval.json").exists()


@pytest.mark.parametrize("text", ["", "   \n", "[1, 2]", "{not json"])
def test_bad_files_are_validation_errors(text, tmp_path, capsys):
    assert cli.main(["run", write(tmp_path, text), "--out", str(tmp_path / "o")]) == 2
    assert "invalid config" in capsys.readouterr().err


def test_missing_file(tmp_path):
    assert cli.main(["run", str(tmp_path / "nope.json")]) == 2


@pytest.mark.parametrize("patch, field", [
    ({"command": "fly"}, "command"),
    ({"system": "nope"}, "system.name"),
    ({"field": {"name": "nope"}}, "field.name"),
    ({"noise": {"gamma": 0.5, "M": 50}}, "noise.M"),
    ({"options": {"reference": {"flow": [1.0, 0.0]}}}, "options.epsilon"),
    ({"options": {"epsilon": -1, "reference": {"flow": [1.0, 0.0]}}}, "options.epsilon"),
    ({"options": {"epsilon": 0.5, "reference": {"flow": [1.0]}}}, "options.reference.flow"),
    ({"grid": {"T": 1.0, "N": 2.5}}, "grid.N"),
])
def test_field_level_messages(patch, field, tmp_path, capsys):
    cfg = {**CONFIGS["tube"], **patch}
    code, out = invoke(tmp_path, cfg)
    assert code == 2
    assert field in capsys.readouterr().err
    assert not (out / "manifest.json").exists()


def test_module_error_exit_code(tmp_path, capsys):
    cfg = {"command": "om-eval", "system": "free", "field": {"name": "diag_linear", "params": {"lam": 0.1}},
           "grid": {"T": 1.0, "N": 10}, "options": {"path": {"constant": [0.0, 0.0]}}}
    code, out = invoke(tmp_path, cfg)
    assert code == 3
    assert "NearSingularError" in capsys.readouterr().err
    assert json.loads((out / "manifest.json").read_text())["status"].startswith("error")


def test_underflow_escalation(tmp_path):
    cfg = {**BASE, "command": "tube", "noise": {"gamma": 0.0, "M": 100},
           "options": {"epsilon": 0.01, "reference": {"constant": [1.0, 0.0]}}}
    code, _ = invoke(tmp_path, cfg, "soft")
    assert code == 0
    cfg["options"]["fail_on_underflow"] = True
    code, out = invoke(tmp_path, cfg, "hard")
    assert code == 4
    assert json.loads((out / "manifest.json").read_text())["status"].startswith("underflow")


def test_reference_from_csv(tmp_path):
    _, out = invoke(tmp_path, CONFIGS["mpp"], "m")
    cfg = {**BASE, "command": "om-eval", "options": {"path": {"csv": str(out / "mpp.csv")}}}
    code, o2 = invoke(tmp_path, cfg, "o")
    assert code == 0
    assert json.loads((o2 / "om_eval.json").read_text())["rate"]["value"] <= 1e-6


def test_module_entry_point(tmp_path):
    f = write(tmp_path, CONFIGS["om-eval"])
    r = subprocess.run([sys.executable, "-m", "stochkam", "run", f, "--out", str(tmp_path / "x")],
                       capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
