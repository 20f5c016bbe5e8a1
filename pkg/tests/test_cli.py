import json
import os
import subprocess
import sys
from importlib.resources import files

import jsonschema
import pytest

from stagsynth import DonorRule, WeightMatrix, att_by_event_time
from stagsynth.cli import build_parser, main
from stagsynth.panel import load_panel, sample_panel

SAMPLE = str(files("stagsynth").joinpath("data/sample_panel.csv"))


def schema(name):
    return json.loads(files("stagsynth").joinpath(f"schemas/{name}.json").read_text())


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_golden_estimate(capsys):
    code, out, _ = run(capsys, "estimate", "--panel", SAMPLE)
    assert code == 0
    rep = json.loads(out)
    jsonschema.validate(rep, schema("estimate"))
    assert f"{rep['att']['att_k']['0']:.6f}" == "5.000000"
    assert all(abs(x) < 1e-9 for g in rep["placebo"]["gaps"].values() for x in g)


def test_empty_donor_pool_exit_2(tmp_path, capsys):
    f = tmp_path / "p.csv"
    f.write_text("unit,time,outcome,adopt_time\na,1,1,3\na,2,1,3\na,3,1,3\nb,1,1,3\nb,2,1,3\nb,3,1,3\n")
    code, out, err = run(capsys, "estimate", "--panel", str(f))
    assert code == 2 and out == ""
    assert err.count("\n") == 1 and err.startswith("error EmptyDonorPool:")


def test_missing_file_exit_2(capsys):
    code, _, err = run(capsys, "estimate", "--panel", "/nonexistent.csv")
    assert code == 2 and err.startswith("error ValidationError:")


def test_weights_file_bypasses_solver(tmp_path, capsys):
    p = sample_panel()
    rows = {"t1": {"d1": 0.2, "d2": 0.8}, "t2": {"d3": 1.0}, "t3": {"d4": 0.5, "d5": 0.5}}
    wf = tmp_path / "w.json"
    wf.write_text(json.dumps({"weights": rows}))
    code, out, _ = run(capsys, "estimate", "--panel", SAMPLE, "--weights", str(wf), "--horizon", "2")
    assert code == 0
    rep = json.loads(out)
    lib = att_by_event_time(p, WeightMatrix.from_rows(p, rows, DonorRule("max_horizon", 2)), 2).to_dict(p)
    assert rep["att"] == lib
    assert rep["solution"]["source"] == "provided"


def test_nonconvergence_exit_3(tmp_path, capsys):
    out = tmp_path / "r.json"
    code, _, err = run(capsys, "estimate", "--panel", SAMPLE, "--lambda", "0.001", "--max-iters", "1",
                       "--rel-tol", "1e-300", "--out", str(out))
    assert code == 3 and err.startswith("error DidNotConverge:")
    assert json.loads(out.read_text())["solution"]["converged"] is False


def test_certify_worked_example(capsys):
    code, out, _ = run(capsys, "certify", "--q-pool", "0.1", "--q-sep", "0.2", "--l-min", "100", "--j", "100",
                       "--c", "0.5", "--kappa", "1")
    assert code == 0
    rep = json.loads(out)
    jsonschema.validate(rep, schema("certify"))
    cert = rep["certificate"]
    assert cert["noise_term"] == pytest.approx(1.05130, abs=1e-5)
    assert cert["total"] == pytest.approx(1.17130, abs=1e-5)
    assert cert["failure_prob"] == 2e-4


def test_certify_on_sample_weights(tmp_path, capsys):
    wf = tmp_path / "w.json"
    wf.write_text(json.dumps({"t1": {"d1": 0.5, "d2": 0.5}, "t2": {"d3": 0.5, "d4": 0.5}, "t3": {"d5": 0.5, "d1": 0.5}}))
    code, out, _ = run(capsys, "certify", "--panel", SAMPLE, "--weights", str(wf), "--kappa", "1")
    rep = json.loads(out)
    jsonschema.validate(rep, schema("certify"))
    cert = rep["certificate"]
    assert cert["c_used"] == 0.5 and cert["kappa_source"] == "user"
    assert cert["failure_prob"] == pytest.approx(2 / 9)


def test_certify_heuristic_kappa_on_noiseless_panel(capsys):
    code, _, err = run(capsys, "certify", "--panel", SAMPLE)
    assert code == 2 and err.startswith("error InvalidScale:")


def test_diagnose_flags_two_donor_row(tmp_path, capsys):
    wf = tmp_path / "w.json"
    wf.write_text(json.dumps({"t1": {"d1": 0.5, "d2": 0.5}, "t2": {"d1": 0.2, "d2": 0.2, "d3": 0.2, "d4": 0.2, "d5": 0.2},
                              "t3": {"d1": 0.2, "d2": 0.2, "d3": 0.2, "d4": 0.2, "d5": 0.2}}))
    code, out, _ = run(capsys, "diagnose", "--panel", SAMPLE, "--weights", str(wf), "--windows", "3,4")
    assert code == 0
    rep = json.loads(out)
    jsonschema.validate(rep, schema("diagnose"))
    assert rep["m"]["values"]["t1"] == pytest.approx(2.0)
    assert rep["m"]["flagged"] == ["t1"]


def test_summarize(capsys):
    code, out, _ = run(capsys, "summarize", "--panel", SAMPLE)
    rep = json.loads(out)
    jsonschema.validate(rep, schema("summary"))
    assert (rep["J"], rep["L_min"], rep["L_max"]) == (3, 5, 7)


SIM = {
    "task": "monte_carlo",
    "reps": 1,
    "dgp": {"n_treated": 3, "n_donors": 5, "T": 20, "horizon": 1, "adoption": {"kind": "simultaneous", "t0": 18}},
    "estimator": {"weights": "auto"},
}


def test_simulate_deterministic(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(SIM))
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert run(capsys, "simulate", "--config", str(cfg), "--seed", "3", "--out", str(a))[0] == 0
    assert run(capsys, "simulate", "--config", str(cfg), "--seed", "3", "--out", str(b))[0] == 0
    assert a.read_bytes() == b.read_bytes()
    jsonschema.validate(json.loads(a.read_text()), schema("simulate"))
    assert sorted(os.listdir(tmp_path)) == ["a.json", "b.json", "c.json"]


def test_simulate_requires_seed(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(SIM))
    with pytest.raises(SystemExit) as exc:
        main(["simulate", "--config", str(cfg)])
    assert exc.value.code == 2


def test_simulate_table_and_other_tasks(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({**SIM, "reps": 3}))
    table = tmp_path / "t.tsv"
    run(capsys, "simulate", "--config", str(cfg), "--seed", "1", "--out", str(tmp_path / "o.json"), "--table", str(table))
    assert len(table.read_text().splitlines()) == 4
    cov = tmp_path / "cov.json"
    cov.write_text(json.dumps({"task": "bound_coverage", "reps": 5, "dgp": SIM["dgp"]}))
    code, out, _ = run(capsys, "simulate", "--config", str(cov), "--seed", "1")
    assert code == 0 and "violation_rate" in json.loads(out)["report"]
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"task": "nope"}))
    assert run(capsys, "simulate", "--config", str(bad), "--seed", "1")[0] == 2


def test_help_lists_flags_with_defaults():
    parser = build_parser()
    sub = parser._subparsers._group_actions[0].choices
    text = " ".join(sub["estimate"].format_help().split())
    for flag in ("--panel", "--out", "--nu", "--lambda", "--donor-rule", "--horizon", "--weights"):
        assert flag in text
    assert "default: 0.5" in text and "default: auto" in text and "default: max_horizon" in text
    assert "--kappa" in sub["certify"].format_help() and "--c " in sub["certify"].format_help()
    assert "--placebo-mode" in sub["diagnose"].format_help()
    sim = sub["simulate"].format_help()
    assert all(f in sim for f in ("--config", "--seed", "--jobs"))
    assert "--seed" not in text


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "stagsynth.cli", "summarize", "--panel", SAMPLE],
                         capture_output=True, text=True)
    assert res.returncode == 0 and json.loads(res.stdout)["J"] == 3


def test_bundled_panel_matches_loader():
    with open(SAMPLE, "rb") as fh:
        assert load_panel(fh).equals(sample_panel())
