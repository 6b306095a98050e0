import json

import numpy as np
import pytest

from mflq import cli, example_model, model_to_dict
from mflq.instances import random_model


@pytest.fixture
def example_file(tmp_path):
    p = tmp_path / "example.json"
    p.write_text(json.dumps(model_to_dict(example_model())))
    return p


@pytest.fixture
def forced_file(tmp_path):
    model = random_model(np.random.default_rng(7), 2, 1, 2, forcing=True)
    p = tmp_path / "forced.json"
    p.write_text(json.dumps(model_to_dict(model)))
    return p


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_validate(capsys, example_file):
    code, out, _ = run(capsys, "validate", example_file)
    assert code == 0
    assert json.loads(out) == {"valid": True, "n": 1, "m": 1, "m0": 1, "homogeneous": True,
                               "has_stabilizer": False}


def test_validate_rejects_bad_generator(capsys, tmp_path):
    doc = model_to_dict(example_model())
    doc["lambda"] = [[0.5]]
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(doc))
    code, out, err = run(capsys, "validate", p)
    assert code == 2 and out == ""
    first = json.loads(err.splitlines()[0])
    assert first["level"] == "error" and first["kind"] == "validation"


def test_missing_file(capsys, tmp_path):
    code, _, err = run(capsys, "validate", tmp_path / "nope.json")
    assert code == 2 and "input" in err


def test_decompose(capsys, example_file):
    code, out, _ = run(capsys, "decompose", example_file)
    doc = json.loads(out)
    assert code == 0
    assert doc["A1"] == [[[-1.0]]] and doc["B2"] == [[[1.0]]] and doc["Q2"] == [[[1.0]]]


def test_check_stabilizer(capsys, example_file):
    code, out, _ = run(capsys, "check-stabilizer", example_file)
    doc = json.loads(out)
    assert code == 0 and doc["is_stable"] and doc["abscissa"] == pytest.approx(-2.0)


def test_solve_riccati_regularized(capsys, example_file):
    code, out, _ = run(capsys, "solve-riccati", example_file, "--delta", 0.25)
    doc = json.loads(out)
    assert code == 0
    assert doc["P2"][0][0][0] == pytest.approx(np.sqrt(0.3125) - 0.25, abs=1e-12)


def test_solve_riccati_limit_fails_on_example(capsys, example_file):
    code, out, err = run(capsys, "solve-riccati", example_file)
    assert code == 3 and out == ""
    assert json.loads(err.splitlines()[-1])["kind"] == "LimitFailure"


def test_shift_needs_stabilizer(capsys, example_file):
    code, _, _ = run(capsys, "solve-riccati", example_file, "--delta", 0.5, "--shift")
    assert code == 3


def test_unstable_zero_feedback_exit_3(capsys, tmp_path):
    doc = model_to_dict(example_model())
    doc["A"] = [[[1.0]]]
    p = tmp_path / "unstable.json"
    p.write_text(json.dumps(doc))
    code, _, err = run(capsys, "solve-riccati", p, "--delta", 0.5)
    assert code == 3 and "stabilizer" in err


def test_stabilizer_from_file(capsys, tmp_path):
    doc = model_to_dict(example_model())
    doc["A"] = [[[1.0]]]
    doc["Abar"] = [[[-1.0]]]
    doc["stabilizer"] = {"Theta1": [[[0.0]]], "Theta2": [[[-1.0]]]}
    p = tmp_path / "stab.json"
    p.write_text(json.dumps(doc))
    code, out, _ = run(capsys, "check-stabilizer", p)
    assert code == 0 and json.loads(out)["is_stable"] is False  # channel 1 keeps A = 1
    doc["B"] = [[[1.0]]]
    doc["Bbar"] = [[[0.0]]]
    doc["R"] = [[[1.0]]]
    doc["stabilizer"] = {"Theta1": [[[-2.0]]], "Theta2": [[[-2.0]]]}
    p.write_text(json.dumps(doc))
    code, out, _ = run(capsys, "check-stabilizer", p)
    assert code == 0 and json.loads(out)["is_stable"] is True
    code, a, _ = run(capsys, "solve-riccati", p, "--shift")
    code2, b, _ = run(capsys, "solve-riccati", p)
    assert code == code2 == 0
    a, b = json.loads(a), json.loads(b)
    for key in ("Theta1", "Theta2"):
        assert np.allclose(a[key], b[key], rtol=0, atol=1e-8)


def test_sweep_writes_csv(capsys, example_file, tmp_path):
    out_dir = tmp_path / "out"
    code, out, _ = run(capsys, "sweep-delta", example_file, "--out-dir", out_dir)
    assert code == 0 and json.loads(out)["blowup"] is True
    lines = (out_dir / "sweep.csv").read_text().splitlines()
    assert lines[0] == "delta,normP,normTheta,margin,V_probe" and len(lines) == 12


def test_check_solvability(capsys, example_file, forced_file):
    code, out, _ = run(capsys, "check-solvability", example_file)
    assert code == 0 and json.loads(out)["verdict"] == "finite_not_solvable"
    code, out, _ = run(capsys, "check-solvability", forced_file)
    assert code == 0 and json.loads(out)["verdict"] == "closed_loop_solvable"


def test_solve_adjoint(capsys, forced_file):
    code, out, _ = run(capsys, "solve-adjoint", forced_file, "--regime", 1, "--x2", 0.5, -1.0)
    doc = json.loads(out)
    assert code == 0 and doc["eta_zero"] and doc["residual"] <= 1e-10
    assert np.isfinite(doc["value"])


def test_simulate_outputs_and_determinism(capsys, forced_file, tmp_path):
    argv = ["simulate", forced_file, "--dt", 0.01, "--T", 2.0, "--n-paths", 50, "--seed", 3,
            "--record-every", 10, "--chain-csv"]
    code, out, _ = run(capsys, *argv, "--out-dir", tmp_path / "a")
    code2, out2, _ = run(capsys, *argv, "--threads", 2, "--out-dir", tmp_path / "b")
    assert code == code2 == 0 and out == out2
    for name in ("result.json", "trajectories.csv", "chain.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert man["command"][:2] == ["mflq", "simulate"]
    assert man["seeds"] == {"seed": 3, "n_paths": 50}
    assert man["tolerances"]["dt"] == 0.01
    assert man["outputs"] == ["chain.csv", "result.json", "trajectories.csv"]
    assert len(man["model_sha256"]) == 64 and man["version"]


def test_simulate_zero_law(capsys, example_file):
    code, out, _ = run(capsys, "simulate", example_file, "--law", "zero", "--dt", 0.01, "--T", 30,
                       "--n-paths", 3)
    assert code == 0 and json.loads(out)["mean"] == pytest.approx(0.5, abs=1e-4)


def test_simulate_bad_step(capsys, example_file):
    code, _, err = run(capsys, "simulate", example_file, "--law", "zero", "--dt", 0.5, "--n-paths", 2)
    assert code == 2 and "step size" in err


def test_probe_convexity(capsys, forced_file):
    code, out, _ = run(capsys, "probe-convexity", forced_file, "--n-directions", 2, "--n-paths", 50,
                       "--dt", 0.01, "--T", 3.0, "--delta", 0.1)
    rows = json.loads(out)["directions"]
    assert code == 0 and len(rows) == 2 and all(r["eps"] == 0.5 for r in rows)


def test_oracle_fh(capsys, example_file):
    code, out, _ = run(capsys, "oracle-fh", example_file, "--delta", 1.0)
    doc = json.loads(out)
    assert code == 0 and doc["P2"][0][0][0] == pytest.approx(np.sqrt(2) - 1, abs=1e-6)
    assert doc["algebraic_gap"] <= 1e-6


def test_reproduce_example(capsys, tmp_path):
    code, out, _ = run(capsys, "reproduce-example", "--out-dir", tmp_path)
    doc = json.loads(out)
    assert code == 0 and doc["checks_passed"] and doc["verdict"] == "finite_not_solvable"
    assert {"example_model.json", "sweep.csv", "result.json", "manifest.json"} <= {p.name for p in tmp_path.iterdir()}
    again = json.loads((tmp_path / "example_model.json").read_text())
    assert again == model_to_dict(example_model())


def test_check_failure_exit_4(capsys, monkeypatch):
    real = cli.reproduce_example

    def broken(tol=1e-12):
        result, rep = real(tol)
        return {**result, "checks_passed": False, "failed": ["forced"]}, rep

    monkeypatch.setattr(cli, "reproduce_example", broken)
    code, _, err = run(capsys, "reproduce-example")
    assert code == 4 and json.loads(err.splitlines()[-1])["kind"] == "check"


def test_module_entry_point():
    import subprocess
    import sys
    res = subprocess.run([sys.executable, "-m", "mflq", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.strip()
