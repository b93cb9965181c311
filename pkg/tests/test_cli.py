from __future__ import annotations

import json
import subprocess
import sys

import numpy as np
import pytest

from fbflow import analyze, cli, persist


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_default_config_round_trips(capsys, tmp_path):
    code, out, _ = run(capsys, "--emit-default-config")
    assert code == 0
    cfg = json.loads(out)
    assert cfg == cli.DEFAULT_CONFIG
    p = tmp_path / "c.json"
    p.write_text(out)
    assert cli.load_config(str(p)) == cli.validate(json.loads(out))


@pytest.mark.parametrize("doc, path", [
    ({"grid": {"h": -0.01}}, "grid.h"),
    ({"grid": {"spacing": 0.1}}, "grid.spacing"),
    ({"flow": {"dt_factor": "fast"}}, "flow.dt_factor"),
    ({"pair": {"name": "torus"}}, "pair.name"),
    ({"initial": {"preset": "nope"}}, "initial.preset"),
    ({"flow": {"snapshot_times": [-1]}}, "flow.snapshot_times"),
])
def test_config_errors_name_the_field(capsys, tmp_path, doc, path):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(doc))
    code, _, err = run(capsys, "flow", "run", "--config", p, "--out", tmp_path / "o")
    assert code == 2
    assert f"{path}:" in err


def test_missing_files_are_io_errors(capsys, tmp_path):
    code, _, err = run(capsys, "flow", "run", "--config", tmp_path / "missing.json")
    assert code == 3 and "IoError" in err
    code, _, _ = run(capsys, "analyze", "bubbles", "--input", tmp_path / "none.csv", "--report", tmp_path / "r.json")
    assert code == 3


def test_cfl_violation_is_a_config_error(capsys, tmp_path):
    code, _, err = run(capsys, "flow", "run", "--preset", "flat", "--h", 1 / 16, "--dt-factor", 0.4,
                       "--t-end", 0.01, "--out", tmp_path)
    assert code == 2 and "CflViolation" in err


def test_flow_run_writes_outputs(capsys, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"flow": {"snapshot_times": [0.0, 0.02]}}))
    code, _, _ = run(capsys, "flow", "run", "--config", cfg, "--preset", "flat", "--h", 1 / 16,
                     "--t-end", 0.05, "--out", tmp_path / "o")
    assert code == 0
    rep = persist.read_report(tmp_path / "o" / "report.json")
    assert rep["status"] == 0 and all(c["passed"] for c in rep["checks"])
    assert rep["E_final"] <= rep["E0"]
    header = (tmp_path / "o" / "energy.csv").read_text().splitlines()[0]
    assert header == "t,E,tension_l2,kinetic_accum"
    snaps = sorted((tmp_path / "o").glob("snapshot_*.csv"))
    assert len(snaps) == 2
    # snapshots land on the first step at or after the requested time
    assert 0.02 <= persist.read_snapshot(snaps[-1]).t < 0.02 + 0.2 / 16**2


def test_flow_from_snapshot_reports_concentration_event(capsys, tmp_path):
    snap = tmp_path / "b.csv"
    code, _, _ = run(capsys, "synth", "make", "--kind", "interior_sphere", "--lambda", 1 / 16, "--center", 0, 0.5,
                     "--h", 1 / 64, "--out", snap)
    assert code == 0
    code, _, _ = run(capsys, "flow", "run", "--snapshot", snap, "--t-end", 0.01, "--out", tmp_path / "o")
    assert code == 0
    rep = persist.read_report(tmp_path / "o" / "report.json")
    assert rep["event"] is not None and rep["event"]["energy"] > 1.0


def test_synth_then_analyze(capsys, tmp_path):
    # one lattice resolves the selection radius only for bubbles much wider than h
    snap, base = tmp_path / "b.csv", tmp_path / "base.csv"
    h = 1 / 256
    assert run(capsys, "synth", "make", "--kind", "boundary_disk", "--lambda", 0.5, "--center", 0.1, 0,
               "--tilt", 0.5, "--h", h, "--out", snap)[0] == 0
    assert run(capsys, "synth", "make", "--kind", "tilted", "--tilt", 0.5, "--h", h, "--out", base)[0] == 0
    code, _, _ = run(capsys, "analyze", "bubbles", "--input", snap, "--base", base, "--report", tmp_path / "r.json",
                     "--r-det", 0.25, "--csv-dir", tmp_path / "csv")
    assert code == 0
    rep = persist.read_report(tmp_path / "r.json")
    (c,) = rep["concentrations"]
    assert np.hypot(c["hint"][0] - 0.1, c["hint"][1]) <= 2 * h
    assert c["point"]["regime"] == analyze.BOUNDARY_FINITE
    assert c["point"]["energy"] == pytest.approx(1 / 32, rel=0.01)
    assert "ledger" in rep
    assert (tmp_path / "csv" / "pohozaev.csv").exists()


def test_unresolved_scale_is_reported(capsys, tmp_path):
    snap = tmp_path / "b.csv"
    assert run(capsys, "synth", "make", "--kind", "boundary_disk", "--lambda", 1 / 16, "--center", 0.1, 0,
               "--tilt", 0.5, "--h", 1 / 128, "--out", snap)[0] == 0
    code, _, _ = run(capsys, "analyze", "bubbles", "--input", snap, "--report", tmp_path / "r.json", "--r-det", 0.25)
    assert code == 0
    (c,) = persist.read_report(tmp_path / "r.json")["concentrations"]
    assert "refine the lattice" in c["scale_error"]


def test_synth_rejects_unresolved_bubble(capsys, tmp_path):
    code, _, err = run(capsys, "synth", "make", "--kind", "boundary_disk", "--lambda", 1 / 1024, "--h", 1 / 64,
                       "--out", tmp_path / "x.csv")
    assert code == 2 and "initial.synth.lambda" in err


def test_verify_reflection(capsys, tmp_path):
    code, _, _ = run(capsys, "verify", "reflection", "--report", tmp_path / "r.json")
    assert code == 0
    rep = persist.read_report(tmp_path / "r.json")
    assert rep["order_estimate"] >= 1.0 and rep["flat_residual"] <= 1e-12


def test_flat_preset_and_plot_data(capsys, tmp_path):
    code, out, _ = run(capsys, "verify", "all", "--only", "flat", "--report", tmp_path / "r.json")
    assert code == 0
    lines = out.splitlines()
    assert lines and all(l.startswith("PASS") for l in lines)
    code, _, _ = run(capsys, "report", "plot-data", "--report", tmp_path / "r.json", "--out", tmp_path / "csv")
    assert code == 0
    assert (tmp_path / "csv" / "sections_flat_energy.csv").read_text().startswith("t,E,tension_l2,kinetic_accum")


def test_reports_are_deterministic(capsys, tmp_path):
    for name in ("a.json", "b.json"):
        assert run(capsys, "verify", "all", "--only", "flat", "pohozaev-refine", "--report", tmp_path / name)[0] == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_doubled_time_step_fails_monotonicity(capsys, tmp_path):
    code, out, _ = run(capsys, "verify", "all", "--only", "gap-test", "--h", 1 / 32, "--dt-factor", 0.4,
                       "--no-check-cfl", "--report", tmp_path / "r.json")
    assert code == 4
    assert "FAIL  gap-test.energy_monotone" in out
    rep = persist.read_report(tmp_path / "r.json")
    (mono,) = [c for c in rep["checks"] if c["name"] == "gap-test.energy_monotone"]
    assert mono["value"] > 1e-8 and "step" in mono["detail"]


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "fbflow", "--emit-default-config"], capture_output=True, text=True)
    assert res.returncode == 0 and json.loads(res.stdout)["seed"] == 0
    res = subprocess.run([sys.executable, "-m", "fbflow"], capture_output=True, text=True)
    assert res.returncode == 2
