import csv
import io
import json

import jsonschema
import pytest

from breakdown.cli import load_schema, run
from breakdown.data import write_csv
from breakdown.harness import draw

UNIFORM_NULL = '{"box": [[0, 1]], "null": [{"a": [1], "c": 0.4}]}'


def invoke(*argv):
    buf = io.StringIO()
    code = run(list(argv), stdout=buf)
    return code, buf.getvalue()


def invoke_json(*argv):
    code, text = invoke(*argv)
    return code, json.loads(text)


@pytest.fixture(scope="module")
def uniform_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("fx") / "uniform.csv"
    write_csv(draw("uniform-mean", 20_000, 2024), path)
    return str(path)


@pytest.fixture(scope="module")
def linear_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("fx") / "linear.csv"
    write_csv(draw("linear", 20_000, 2024), path)
    return str(path)


def validate(report):
    schema = load_schema("error" if "error" in report else report["command"])
    jsonschema.validate(report, schema)


def test_estimate_uniform_fixture(uniform_csv):
    code, rep = invoke_json("estimate", "--data", uniform_csv, "--model", "mean", "--hypothesis", UNIFORM_NULL)
    assert code == 0
    validate(rep)
    r = rep["result"]
    assert r["delta_hat"] == pytest.approx(0.2, abs=0.04)
    assert r["ci_lower"] < r["delta_hat"]
    assert rep["config"]["alpha"] == 0.05 and r["alpha"] == 0.05
    assert rep["hellinger_x"] is None and rep["mode"] == "x-empty"


def test_estimate_writes_file_and_table(uniform_csv, tmp_path):
    out = tmp_path / "r.json"
    code, text = invoke("estimate", "--data", uniform_csv, "--model", "mean", "--hypothesis", UNIFORM_NULL,
                        "--out", str(out), "--alpha", "0.1")
    assert code == 0
    assert "breakdown point" in text and "lower CI (90%)" in text
    rep = json.loads(out.read_text())
    validate(rep)
    assert rep["result"]["alpha"] == 0.1
    assert "out" not in rep["config"] and "threads" not in rep["config"]


def test_hypothesis_from_file_and_default_box(uniform_csv, tmp_path):
    hyp = tmp_path / "h.json"
    hyp.write_text('{"null": [{"a": [1], "c": 0.4}]}')
    code, rep = invoke_json("estimate", "--data", uniform_csv, "--model", "mean", "--hypothesis", f"@{hyp}",
                            "--box-halfwidth", "0.3")
    assert code == 0
    b = rep["b_mcar"][0]
    assert rep["hypothesis"]["box"] == [[pytest.approx(b - 0.3), pytest.approx(b + 0.3)]]


def test_empty_null_region_exits_one(uniform_csv):
    code, rep = invoke_json("estimate", "--data", uniform_csv, "--model", "mean",
                            "--hypothesis", '{"box": [[0, 1]], "null": [{"a": [1], "c": -1}]}')
    assert code == 1
    assert rep["error"] == "empty-null-region"
    validate(rep)


@pytest.mark.parametrize("argv, err", [
    (["estimate", "--design", "logit", "--model", "mean"], "config-error"),
    (["estimate", "--design", "logit", "--divergence", "chi2"], "config-error"),
    (["estimate", "--n", "100"], "config-error"),
    (["estimate", "--data", "/nonexistent.csv", "--model", "mean", "--hypothesis", UNIFORM_NULL], "config-error"),
    (["estimate", "--design", "uniform-mean", "--hypothesis", "{not json"], "config-error"),
    (["estimate", "--design", "uniform-mean", "--hypothesis", '{"box": [[0, 1], [0, 1]], "null": []}'], "config-error"),
    (["bound", "--design", "uniform-mean"], "config-error"),
    (["simulate", "--design", "linear", "--reps", "1"], "config-error"),
])
def test_config_errors_exit_one(argv, err):
    code, rep = invoke_json(*argv)
    assert code == 1 and rep["error"] == err
    validate(rep)


def test_data_error_exits_one(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("d,y1\n1,0.5\n0,0.1\n")
    code, rep = invoke_json("estimate", "--data", str(path), "--model", "mean", "--hypothesis", UNIFORM_NULL)
    assert code == 1 and rep["error"] == "data-error"


def test_numerical_failure_exits_two():
    code, rep = invoke_json("estimate", "--design", "logit", "--n", "2000", "--dual-max-iter", "1", "--n-audit", "3")
    assert code == 2 and rep["error"] == "numerical-failure"
    validate(rep)


def test_usage_error_exits_one():
    assert invoke("estimate", "--no-such-flag")[0] == 1
    assert invoke("frobnicate")[0] == 1


def test_config_file_merged_under_flags(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"design": "uniform-mean", "n": 3000, "alpha": 0.2, "n-audit": 5}))
    code, rep = invoke_json("estimate", "--config", str(cfg), "--alpha", "0.1")
    assert code == 0
    assert rep["config"]["alpha"] == 0.1
    assert rep["config"]["n"] == 3000 and rep["config"]["n_audit"] == 5
    cfg.write_text(json.dumps({"bogus": 1}))
    code, rep = invoke_json("estimate", "--config", str(cfg))
    assert code == 1 and "bogus" in rep["message"]


def test_bound_linear_fixture(linear_csv):
    code, rep = invoke_json("bound", "--data", linear_csv)
    assert code == 0
    validate(rep)
    assert rep["hellinger_x"] == pytest.approx(0.08, abs=0.01)
    assert len(rep["cells"]) == 6


def test_convexity_linear_fixture(linear_csv):
    code, rep = invoke_json(
        "convexity", "--data", linear_csv, "--model", "linear", "--outcome", "y1",
        "--regressors", "1", "x1", "y2", "x2", "--hypothesis", '{"null": [{"a": [0, 1, 0, 0], "c": 0}]}',
        "--pairs", "2", "--grid", "15",
    )
    assert code == 0
    validate(rep)
    assert rep["report"]["max_violation"] <= 1e-6


def test_oracle_check_all_pass():
    code, rep = invoke_json("oracle-check", "--instances", "10")
    assert code == 0 and rep["all_passed"]
    validate(rep)
    code, text = invoke("oracle-check", "--instances", "5", "--out", "/dev/null")
    assert text.count("PASS") == len(rep["checks"]) and "FAIL" not in text


def test_simulate_with_rows(tmp_path):
    rows = tmp_path / "rows.csv"
    code, rep = invoke_json("simulate", "--design", "uniform-mean", "--n", "500", "--reps", "3",
                            "--n-audit", "5", "--rows", str(rows))
    assert code == 0
    validate(rep)
    assert rep["summary"]["completed"] == 3
    with open(rows, newline="") as fh:
        got = list(csv.DictReader(fh))
    assert [int(r["replication"]) for r in got] == [0, 1, 2]
    mean = sum(float(r["delta_hat"]) for r in got) / 3
    assert rep["summary"]["mean_delta_hat"] == pytest.approx(mean, rel=1e-12)


def test_reports_are_byte_identical_across_runs_and_threads(tmp_path):
    outs = []
    for threads in ("1", "1", "4"):
        out = tmp_path / f"r{len(outs)}.json"
        invoke("estimate", "--design", "logit", "--n", "1500", "--seed", "9", "--threads", threads, "--out", str(out))
        outs.append(out.read_bytes())
    assert outs[0] == outs[1] == outs[2]
