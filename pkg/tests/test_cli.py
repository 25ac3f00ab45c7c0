import csv
import io
import json
import os
import subprocess
import sys

import pytest

from shadowlab.cli import ConfigError, config_hash, main, report, run, validate_config


def _json_out(capsys, argv, code=0):
    assert main(argv) == code
    return json.loads(capsys.readouterr().out)


def test_shadow_cat_example(capsys):
    rec = _json_out(capsys, ["shadow", "--model", "cat", "--d", "1e-4", "--eps", "0.01", "--steps", "1000",
                             "--seed", "7"])
    trial = rec["result"]["trials"][0]
    assert rec["ok"] and trial["verified"] and trial["max_deviation"] < 0.01
    assert trial["membership_ok"] and trial["segmentation"]["labels"] == [1]
    assert rec["config_hash"] == config_hash(rec["config"])


def test_negative_d_is_config_error(capsys):
    assert main(["shadow", "--model", "cat", "--d", "-1"]) == 3
    assert "config error" in capsys.readouterr().err


def test_unknown_model_and_bad_params(capsys):
    assert main(["shadow", "--model", "nope"]) == 3
    assert main(["shadow", "--model", "cat", "--params", "{not json"]) == 3


def test_validate_config_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        validate_config({"command": "shadow", "colour": "red"})
    validate_config({"command": "shadow", "model": "cat", "d": 1e-4})


def test_unverified_exit_code(capsys):
    # eps far below the noise: the run cannot certify a shadow
    code = main(["shadow", "--model", "cat", "--d", "1e-4", "--eps", "1e-5", "--steps", "50"])
    rec = json.loads(capsys.readouterr().out)
    assert code == 2 and not rec["ok"] and not rec["result"]["trials"][0]["verified"]


def test_generate_then_classify(tmp_path, capsys):
    path = tmp_path / "xi.csv"
    assert main(["generate", "--model", "north_south_circle", "--d", "1e-3", "--chain", "1,2",
                 "--dwell", "20", "--format", "csv", "--out", str(path)]) == 0
    rec = _json_out(capsys, ["classify", "--input", str(path), "--L", "10", "--N", "15", "--s0", "3"])
    assert rec["result"]["segmentation"]["labels"] == [1, 2]
    rec = _json_out(capsys, ["classify", "--input", str(path), "--L", "2", "--N", "15", "--s0", "3"])
    assert rec["result"]["segmentation"] == "none"


def test_classify_missing_file(tmp_path, capsys):
    assert main(["classify", "--input", str(tmp_path / "missing.csv")]) == 3


def test_deterministic_records():
    cfg = {"command": "shadow", "model": "cat", "d": 1e-4, "steps": 200, "seed": 3, "trials": 2}
    a, _ = run(dict(cfg))
    b, _ = run(dict(cfg))
    a.pop("timing"), b.pop("timing")
    assert json.dumps(a, sort_keys=True, default=str) == json.dumps(b, sort_keys=True, default=str)


def test_atomic_out(tmp_path, capsys):
    out = tmp_path / "rec.json"
    assert main(["models", "--out", str(out)]) == 0
    assert capsys.readouterr().out == ""
    assert os.listdir(tmp_path) == ["rec.json"]
    names = [m["model"] for m in json.loads(out.read_text())["result"]["models"]]
    assert names == sorted(["cat", "north_south_circle", "gradient_torus"])


def test_report_empty():
    text = report([])
    assert text.strip().split(",") == ["model", "d", "trials", "pass_rate", "mean_deviation",
                                       "deviation_over_d", "ratio", "alpha_max", "beta_max"]


@pytest.fixture(scope="module")
def decade_records():
    recs = []
    for d in (1e-4, 1e-5, 1e-6):
        rec, ok = run({"command": "shadow", "model": "cat", "d": d, "steps": 300, "seed": 1, "trials": 2})
        assert ok
        recs.append(rec)
    return recs


def test_report_three_decades(decade_records, tmp_path, capsys):
    paths = []
    for i, rec in enumerate(decade_records):
        p = tmp_path / f"r{i}.json"
        p.write_text(json.dumps(rec, default=str))
        paths.append(str(p))
    assert main(["report", "--input", *paths]) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert [float(r["d"]) for r in rows] == [1e-6, 1e-5, 1e-4]
    assert float(rows[0]["ratio"]) == 1.0
    for r in rows:
        assert r["model"] == "cat" and r["trials"] == "2" and float(r["pass_rate"]) == 1.0
        assert 0.5 < float(r["ratio"]) < 2.0
        # mean deviation over d, recomputed from the row
        assert float(r["deviation_over_d"]) == pytest.approx(float(r["mean_deviation"]) / float(r["d"]))


def test_report_mixed_models(decade_records):
    nsc, _ = run({"command": "shadow", "model": "north_south_circle", "d": 1e-4, "seed": 0})
    rows = list(csv.DictReader(io.StringIO(report(decade_records[:1] + [nsc]))))
    assert [r["model"] for r in rows] == ["cat", "north_south_circle"]
    assert all(float(r["ratio"]) == 1.0 for r in rows)


def test_shadow_csv_ledger(capsys):
    assert main(["shadow", "--model", "cat", "--d", "1e-4", "--steps", "20", "--format", "csv"]) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert len(rows) == 21 and rows[0]["ell"] == "0"


def test_digraph_and_transversality(capsys):
    rec = _json_out(capsys, ["digraph", "--model", "gradient_torus"])
    assert rec["result"]["acyclic"] and rec["result"]["order"] == [1, 2, 3, 4]
    rec = _json_out(capsys, ["transversality", "--model", "gradient_torus"])
    kinds = {(c["source"], c["target"]): c["kind"] for c in rec["result"]["connections"]}
    assert kinds[(1, 2)] == kinds[(1, 3)] == "nontrivial"


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "shadowlab", "models"], capture_output=True, text=True,
                         check=True)
    assert json.loads(out.stdout)["ok"] is True
