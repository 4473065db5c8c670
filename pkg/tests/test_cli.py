import json
import os

import pytest

from conftest import (
    B1_1_SQL,
    B16_SQL,
    LINEITEM_COLS,
    LINEITEM_SCHEMA,
    TPCH_MINI_SCHEMA,
    lineitem_row,
    write_table,
)
from dersens.cli import main


def _write(path, text):
    with open(path, "w") as fh:
        fh.write(text)
    return str(path)


@pytest.fixture()
def b1_1_inputs(tmp_path):
    rows = [
        lineitem_row(qty=17, sd=100.0),
        lineitem_row(qty=36, sd=195.0),
        lineitem_row(qty=8, sd=260.0),
    ]
    write_table(str(tmp_path), "lineitem", LINEITEM_COLS, rows)
    schema = _write(tmp_path / "schema.txt", LINEITEM_SCHEMA)
    query = _write(tmp_path / "q.sql", B1_1_SQL)
    return query, schema, str(tmp_path)


def test_analyze_prints_sql_and_beta(b1_1_inputs, capsys):
    query, schema, _ = b1_1_inputs
    code = main(["analyze", "--query", query, "--schema", schema, "--alpha", "0.1"])
    out = capsys.readouterr().out
    assert code == 0
    assert "SELECT sum((lineitem.l_quantity" in out
    assert "GROUP BY lineitem_sensRows.ID" in out
    assert "achieved beta: 0.1" in out
    assert "lineitem.l_shipdateG=30" in out


def test_analyze_writes_sql_files(b1_1_inputs, tmp_path, capsys):
    query, schema, _ = b1_1_inputs
    out_dir = str(tmp_path / "out")
    code = main(["analyze", "--query", query, "--schema", schema,
                 "--alpha", "0.1", "--emit-sql", out_dir])
    assert code == 0
    assert os.path.exists(os.path.join(out_dir, "modified.sql"))
    assert os.path.exists(os.path.join(out_dir, "sensitivity.sql"))


def test_analyze_infeasible_beta_exits_2(tmp_path, capsys):
    schema = _write(tmp_path / "schema.txt", TPCH_MINI_SCHEMA)
    query = _write(tmp_path / "q.sql", B16_SQL)
    code = main(["analyze", "--query", query, "--schema", schema,
                 "--alpha", "0.1", "--epsilon", "1.0"])
    err = capsys.readouterr().err
    assert code == 2
    assert "epsilon must exceed" in err
    assert "beta=0.8" in err
    # raising epsilon to the reported minimum makes it feasible
    code = main(["analyze", "--query", query, "--schema", schema,
                 "--alpha", "0.1", "--epsilon", "4.5"])
    assert code == 0


def test_missing_input_exits_1(tmp_path, capsys):
    code = main(["analyze", "--query", str(tmp_path / "nope.sql"),
                 "--schema", str(tmp_path / "nope.txt")])
    assert code == 1
    assert "nope.txt" in capsys.readouterr().err  # first unreadable path is named


def test_missing_norm_file_exits_1(tmp_path, capsys):
    schema = _write(tmp_path / "schema.txt", LINEITEM_SCHEMA)
    query = _write(tmp_path / "q.sql", B1_1_SQL)
    code = main(["analyze", "--query", query, "--schema", schema,
                 "--norm", str(tmp_path / "missing_norm.txt")])
    assert code == 1
    assert "missing_norm.txt" in capsys.readouterr().err


def test_parse_error_exits_1(tmp_path, capsys):
    schema = _write(tmp_path / "schema.txt", LINEITEM_SCHEMA)
    query = _write(tmp_path / "q.sql", "SELECT avg(x) FROM lineitem")
    code = main(["analyze", "--query", query, "--schema", schema])
    assert code == 1
    assert "avg" in capsys.readouterr().err


def test_run_report_fields(b1_1_inputs, capsys):
    query, schema, data = b1_1_inputs
    code = main(["run", "--query", query, "--schema", schema, "--data", data,
                 "--alpha", "0.1", "--json"])
    assert code == 0
    report = json.loads(capsys.readouterr().out)
    assert report["report_version"] == 1
    assert report["initial"] == 53.0
    assert 0.0 < report["modified"] < report["initial"]
    assert report["sensitivity"] == pytest.approx(1.0, abs=1e-3)
    expected = abs(report["modified"] + 10.0 * report["sensitivity"] - 53.0) / 53.0 * 100.0
    assert report["rel_error"] == pytest.approx(expected)


def test_run_exact_integer_fixture_zero_error(tmp_path, capsys):
    write_table(str(tmp_path), "t", [
        "a", "s"], [[1, "x"], [4, "x"], [9, "y"]])
    schema = _write(tmp_path / "schema.txt", "table t\ncol a int\ncol s text\n")
    query = _write(tmp_path / "q.sql", "SELECT sum(t.a) FROM t WHERE t.s = 'x'")
    code = main(["run", "--query", query, "--schema", schema,
                 "--data", str(tmp_path), "--precise", "--json"])
    assert code == 0
    report = json.loads(capsys.readouterr().out)
    assert report["sensitivity"] == 0.0
    assert report["rel_error"] == 0.0
    assert any("no sensitive tables" in w for w in report["warnings"])


def test_run_empty_sensitive_set_warns(tmp_path, capsys):
    rows = [lineitem_row(), lineitem_row(qty=20.0)]
    write_table(str(tmp_path), "lineitem", LINEITEM_COLS, rows, [False, False])
    schema = _write(tmp_path / "schema.txt", LINEITEM_SCHEMA)
    query = _write(tmp_path / "q.sql", B1_1_SQL)
    code = main(["run", "--query", query, "--schema", schema,
                 "--data", str(tmp_path), "--alpha", "0.1", "--json"])
    assert code == 0
    report = json.loads(capsys.readouterr().out)
    assert report["sensitivity"] == 0.0


def test_privatize_deterministic_and_prints_params(b1_1_inputs, capsys):
    query, schema, data = b1_1_inputs
    args = ["privatize", "--query", query, "--schema", schema, "--data", data,
            "--alpha", "0.1", "--seed", "42", "--json"]
    assert main(args) == 0
    first = json.loads(capsys.readouterr().out)
    assert main(args) == 0
    second = json.loads(capsys.readouterr().out)
    assert first == second
    assert first["b"] == pytest.approx(0.1)
    assert (first["epsilon"], first["beta"], first["gamma"]) == (1.0, 0.1, 4.0)
    assert first["noised"] != first["modified"]


def test_privatize_seed_from_environment(b1_1_inputs, capsys, monkeypatch):
    query, schema, data = b1_1_inputs
    args = ["privatize", "--query", query, "--schema", schema, "--data", data,
            "--alpha", "0.1", "--json"]
    monkeypatch.setenv("DERSENS_SEED", "42")
    assert main(args) == 0
    via_env = json.loads(capsys.readouterr().out)
    monkeypatch.delenv("DERSENS_SEED")
    assert main(args + ["--seed", "42"]) == 0
    via_flag = json.loads(capsys.readouterr().out)
    assert via_env["noised"] == via_flag["noised"]


def test_bench_small(capsys, tmp_path):
    code = main(["bench", "--rows", "300", "--alpha", "0.1", "--json",
                 "--data", str(tmp_path / "bench")])
    assert code == 0
    report = json.loads(capsys.readouterr().out)
    assert report["rows"] == 300
    assert report["sensitivity"] == pytest.approx(1.0, abs=1e-3)
    assert report["rel_error"] is not None


def test_privatize_zero_sensitivity_is_exact(tmp_path, capsys):
    write_table(str(tmp_path), "t", ["a", "s"], [[1, "x"], [4, "x"]])
    schema = _write(tmp_path / "schema.txt", "table t\ncol a int\ncol s text\n")
    query = _write(tmp_path / "q.sql", "SELECT sum(t.a) FROM t")
    code = main(["privatize", "--query", query, "--schema", schema,
                 "--data", str(tmp_path), "--seed", "9", "--json"])
    assert code == 0
    report = json.loads(capsys.readouterr().out)
    assert report["sensitivity"] == 0.0
    assert report["noised"] == report["modified"]


def test_analyze_stdout_matches_golden(tmp_path, capsys):
    import os

    from conftest import B1_5_SQL, GOLDEN_DIR, assert_sql_equivalent

    schema = _write(tmp_path / "schema.txt", LINEITEM_SCHEMA)
    query = _write(tmp_path / "q.sql", B1_5_SQL)
    assert main(["analyze", "--query", query, "--schema", schema, "--alpha", "0.1"]) == 0
    out = capsys.readouterr().out.splitlines()
    sens_line = out[out.index("-- sensitivity query") + 1]
    with open(os.path.join(GOLDEN_DIR, "b1_5_sensitivity.sql")) as fh:
        assert_sql_equivalent(sens_line, fh.read())
