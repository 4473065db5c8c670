import math
import random

import pytest

from conftest import LINEITEM_SCHEMA, LINEITEM_COLS, lineitem_row, write_table
from dersens import sqlfront as sf
from dersens.norms import Combine, Scale, Var
from dersens.sqlfront import (
    BinOp,
    BoolOp,
    Cmp,
    ColRef,
    FuncCall,
    LikePred,
    NotPred,
    Number,
    ParseError,
    QuerySpec,
    SchemaError,
    TruePred,
    date_to_months,
    load_database,
    parse_query,
    parse_schema,
    print_query,
    validate,
)

B1_5_TEXT = """
select
    count(*)
from
    lineitem
where
    lineitem.l_shipdateG <= 230.3 - 30
and
    lineitem.l_returnflag = 'R'
and
    lineitem.l_linestatus = 'F'
;
"""


# ---------------------------------------------------------------------------
# query parsing
# ---------------------------------------------------------------------------


def test_parse_count_query_shape():
    q = parse_query(B1_5_TEXT)
    assert q.aggregator == "COUNT"
    assert q.select is None
    assert q.tables == (("lineitem", "lineitem"),)
    assert isinstance(q.where, BoolOp) and q.where.op == "and"
    assert len(q.where.args) == 3


def test_parse_simple_sum():
    q = parse_query("SELECT sum(t.x) FROM t")
    assert q.aggregator == "SUM"
    assert q.select == ColRef("t", "x")
    assert q.where == TruePred()


def test_parse_unsupported_aggregator():
    with pytest.raises(ParseError, match="avg"):
        parse_query("SELECT avg(x) FROM t")


@pytest.mark.parametrize(
    "sql,what",
    [
        ("SELECT DISTINCT sum(x) FROM t", "DISTINCT"),
        ("SELECT sum(x) FROM t GROUP BY y", "GROUP"),
        ("SELECT sum(x) FROM t WHERE x IN (SELECT y FROM u)", "subquer"),
        ("SELECT sum(x) FROM t ORDER BY x", "ORDER"),
    ],
)
def test_parse_unsupported_constructs(sql, what):
    with pytest.raises(ParseError, match=what):
        parse_query(sql)


def test_parse_error_reports_position():
    with pytest.raises(ParseError, match="line 2"):
        parse_query("SELECT sum(t.x)\nFROMM t")


def test_between_desugars_to_conjunction():
    q = parse_query("SELECT sum(x) FROM t WHERE x BETWEEN 1 AND 5")
    w = q.where
    assert isinstance(w, BoolOp) and w.op == "and"
    assert w.args == (Cmp(">=", ColRef("", "x"), Number(1.0)),
                      Cmp("<=", ColRef("", "x"), Number(5.0)))


def test_in_list_desugars_to_exclusive_or():
    q = parse_query("SELECT sum(x) FROM t WHERE x IN (1, 2, 3)")
    w = q.where
    assert isinstance(w, BoolOp) and w.op == "or" and w.exclusive
    assert all(isinstance(a, Cmp) and a.op == "=" for a in w.args)


def test_in_list_with_repeats_not_exclusive():
    q = parse_query("SELECT sum(x) FROM t WHERE x IN (1, 1)")
    assert not q.where.exclusive


def test_count_column_counts_rows():
    q = parse_query("SELECT count(t.c) FROM t")
    assert q.aggregator == "COUNT" and q.select is None


# ---------------------------------------------------------------------------
# print / parse round trip
# ---------------------------------------------------------------------------


def _rand_expr(rng, depth):
    if depth == 0 or rng.random() < 0.35:
        return rng.choice([
            Number(round(rng.uniform(-50, 50), 2)),
            ColRef("t", rng.choice(["a", "b"])),
            ColRef("", "c"),
        ])
    if rng.random() < 0.25:
        name = rng.choice(["abs", "exp", "sqrt"])
        return FuncCall(name, (_rand_expr(rng, depth - 1),))
    op = rng.choice(["+", "-", "*", "/", "^"])
    return BinOp(op, _rand_expr(rng, depth - 1), _rand_expr(rng, depth - 1))


def _rand_pred(rng, depth):
    if depth == 0 or rng.random() < 0.4:
        kind = rng.random()
        if kind < 0.7:
            return Cmp(rng.choice(["<", "<=", ">", ">=", "=", "<>"]),
                       _rand_expr(rng, 1), _rand_expr(rng, 1))
        if kind < 0.85:
            return LikePred(ColRef("t", "s"), "%x_y%", rng.random() < 0.5)
        return NotPred(Cmp("=", ColRef("t", "a"), Number(1.0)))
    op = rng.choice(["and", "or", "xor"])
    n = rng.randint(2, 3)
    return BoolOp(op, tuple(_rand_pred(rng, depth - 1) for _ in range(n)))


def test_query_print_parse_round_trip():
    rng = random.Random(11)
    for _ in range(300):
        agg = rng.choice(["SUM", "COUNT", "PRODUCT", "MIN", "MAX"])
        q = QuerySpec(
            aggregator=agg,
            select=None if agg == "COUNT" else _rand_expr(rng, rng.randint(0, 3)),
            tables=(("t", "t"), ("u", "v"))[: rng.randint(1, 2)],
            where=_rand_pred(rng, rng.randint(0, 2)) if rng.random() < 0.8 else TruePred(),
        )
        assert parse_query(print_query(q)) == q


# ---------------------------------------------------------------------------
# schema files
# ---------------------------------------------------------------------------


def test_parse_schema_lineitem_norm():
    schema = parse_schema(LINEITEM_SCHEMA)
    ts = schema.tables["lineitem"]
    assert ts.rows_p == 1.0
    assert ts.norm == Combine(1.0, (
        Var("l_quantity"),
        Scale(0.0001, Var("l_extendedprice")),
        Scale(50.0, Var("l_discount")),
        Scale(30.0, Combine(math.inf, (
            Var("l_shipdateG"), Var("l_commitdateG"), Var("l_receiptdateG")))),
    ))
    assert ts.sensitive_columns == {
        "l_quantity", "l_extendedprice", "l_discount",
        "l_shipdateG", "l_commitdateG", "l_receiptdateG",
    }


def test_parse_schema_table_without_norm_is_insensitive():
    schema = parse_schema("table region\ncol r_name text\ncol r_key int\n")
    ts = schema.tables["region"]
    assert ts.norm is None
    assert ts.sensitive_columns == frozenset()


def test_parse_schema_rejects_text_column_in_norm():
    with pytest.raises(SchemaError, match="text"):
        parse_schema("table r\ncol r_name text\nnorm lp 1.0 r_name\n")


def test_parse_schema_rejects_unknown_norm_column():
    with pytest.raises(SchemaError, match="unknown column"):
        parse_schema("table r\ncol a real\nnorm lp 1.0 b\n")


def test_parse_schema_norm_override():
    from dersens.norms import normalize

    schema = parse_schema(LINEITEM_SCHEMA)
    override = "table lineitem\nnorm lp 1.0 l_quantity\nrows linf\n"
    schema = parse_schema(override, base=schema)
    assert normalize(schema.tables["lineitem"].norm) == Var("l_quantity")
    assert schema.tables["lineitem"].rows_p == math.inf


# ---------------------------------------------------------------------------
# dates
# ---------------------------------------------------------------------------


def test_date_epoch_boundary():
    assert date_to_months("1980-02-01") == 1.0
    assert date_to_months("1980-01-01") == 0.0


def test_date_monotone_and_month_exact():
    prev = -1.0
    for year in range(1980, 2021):
        for month in range(1, 13):
            m = date_to_months(f"{year:04d}-{month:02d}-01")
            assert m > prev
            prev = m
            # exact inverse at month precision
            assert m == (year - 1980) * 12 + (month - 1)
            back_year = 1980 + int(m) // 12
            back_month = int(m) % 12 + 1
            assert (back_year, back_month) == (year, month)


def test_date_day_fraction():
    m = date_to_months("1980-01-16")
    assert m == pytest.approx(15 / 30.4375)


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------


def test_load_mask_alignment(tmp_path):
    write_table(str(tmp_path), "lineitem", LINEITEM_COLS,
                [lineitem_row(), lineitem_row(), lineitem_row()],
                [False, True, False])
    schema = parse_schema(LINEITEM_SCHEMA)
    db = load_database(str(tmp_path), schema)
    assert db.tables["lineitem"].sensitive == [False, True, False]


def test_load_dangling_sens_id(tmp_path):
    write_table(str(tmp_path), "lineitem", LINEITEM_COLS, [lineitem_row()])
    with open(tmp_path / "lineitem_sensRows.csv", "w") as fh:
        fh.write("ID,sensitive\n99,1\n")
    with pytest.raises(SchemaError, match="99"):
        load_database(str(tmp_path), parse_schema(LINEITEM_SCHEMA))


def test_load_missing_file(tmp_path):
    with pytest.raises(SchemaError, match="missing data file"):
        load_database(str(tmp_path), parse_schema(LINEITEM_SCHEMA))


def test_load_type_mismatch(tmp_path):
    rows = [lineitem_row()]
    rows[0][0] = "notanumber"
    write_table(str(tmp_path), "lineitem", LINEITEM_COLS, rows)
    with pytest.raises(SchemaError, match="l_quantity"):
        load_database(str(tmp_path), parse_schema(LINEITEM_SCHEMA))


def test_load_converts_iso_dates(tmp_path):
    rows = [lineitem_row()]
    rows[0][6] = "1980-02-01"
    write_table(str(tmp_path), "lineitem", LINEITEM_COLS, rows)
    db = load_database(str(tmp_path), parse_schema(LINEITEM_SCHEMA))
    assert db.tables["lineitem"].rows[0]["l_shipdateG"] == 1.0


# ---------------------------------------------------------------------------
# validation and atom classification
# ---------------------------------------------------------------------------


def _b1_1_ctx():
    schema = parse_schema(LINEITEM_SCHEMA)
    q = parse_query(
        "SELECT sum(l_quantity) FROM lineitem WHERE l_shipdateG <= 200.3 "
        "AND l_returnflag = 'R' AND l_linestatus = 'F'"
    )
    return validate(q, schema)


def test_validate_splits_public_and_sensitive():
    ctx = _b1_1_ctx()
    pub = sf.print_pred(ctx.public_pred)
    assert "l_returnflag" in pub and "l_linestatus" in pub
    res = sf.print_pred(ctx.residual_pred)
    assert "l_shipdateG" in res and "returnflag" not in res


def test_validate_constant_predicate_is_public():
    schema = parse_schema(LINEITEM_SCHEMA)
    q = parse_query("SELECT sum(l_quantity) FROM lineitem WHERE 1 < 2")
    ctx = validate(q, schema)
    assert isinstance(ctx.residual_pred, TruePred)


def test_validate_like_on_numeric_column_fails():
    schema = parse_schema(LINEITEM_SCHEMA)
    q = parse_query("SELECT sum(l_quantity) FROM lineitem WHERE l_quantity LIKE 'x%'")
    with pytest.raises(SchemaError, match="text column"):
        validate(q, schema)


def test_validate_classification_stable_under_reassociation():
    schema = parse_schema(LINEITEM_SCHEMA)
    a = "l_shipdateG <= 200.3"
    b = "l_returnflag = 'R'"
    c = "l_linestatus = 'F'"
    forms = [
        f"({a} AND {b}) AND {c}",
        f"{a} AND ({b} AND {c})",
        f"({a}) AND ({b}) AND ({c})",
    ]
    outs = set()
    for w in forms:
        ctx = validate(parse_query(f"SELECT sum(l_quantity) FROM lineitem WHERE {w}"), schema)
        outs.add((sf.print_pred(ctx.public_pred), sf.print_pred(ctx.residual_pred)))
    assert len(outs) == 1


def test_validate_rejects_sensitive_self_join():
    schema = parse_schema(LINEITEM_SCHEMA)
    q = parse_query("SELECT sum(a.l_quantity) FROM lineitem AS a, lineitem AS b")
    with pytest.raises(SchemaError, match="self-join"):
        validate(q, schema)


def test_validate_allows_insensitive_self_join():
    schema = parse_schema(LINEITEM_SCHEMA + "\ntable nation\ncol n_key int\ncol n_name text\n")
    q = parse_query(
        "SELECT sum(l_quantity) FROM lineitem, nation AS n1, nation AS n2 "
        "WHERE n1.n_name = 'A' AND n2.n_name = 'B'"
    )
    ctx = validate(q, schema)
    assert set(ctx.aliases) == {"lineitem", "n1", "n2"}


def test_validate_ambiguous_column():
    schema = parse_schema("table t\ncol a real\ntable u\ncol a real\n")
    q = parse_query("SELECT sum(a) FROM t, u")
    with pytest.raises(SchemaError, match="ambiguous"):
        validate(q, schema)


def test_validate_text_in_select_fails():
    schema = parse_schema(LINEITEM_SCHEMA)
    q = parse_query("SELECT sum(l_returnflag) FROM lineitem")
    with pytest.raises(SchemaError, match="text column"):
        validate(q, schema)


def test_is_integer_expr():
    schema = parse_schema("table t\ncol i int\ncol r real\n")
    ctx = validate(parse_query("SELECT sum(i) FROM t"), schema)
    al = ctx.aliases
    assert sf.is_integer_expr(ColRef("t", "i"), al, schema)
    assert sf.is_integer_expr(BinOp("+", ColRef("t", "i"), Number(3.0)), al, schema)
    assert not sf.is_integer_expr(ColRef("t", "r"), al, schema)
    assert not sf.is_integer_expr(BinOp("/", ColRef("t", "i"), Number(2.0)), al, schema)


def test_load_rejects_duplicate_ids(tmp_path):
    with open(tmp_path / "t.csv", "w") as fh:
        fh.write("ID,a\n1,2.0\n1,3.0\n")
    with open(tmp_path / "t_sensRows.csv", "w") as fh:
        fh.write("ID,sensitive\n1,1\n")
    with pytest.raises(SchemaError, match="duplicate"):
        load_database(str(tmp_path), parse_schema("table t\ncol a real\n"))


def test_declared_precision_parses():
    schema = parse_schema("table t\ncol price real 100\ncol q int\nnorm lp 1.0 price q\n")
    ts = schema.tables["t"]
    assert ts.column_precision("price") == 100.0
    assert ts.column_precision("q") == 1.0
    with pytest.raises(SchemaError, match="real"):
        parse_schema("table t\ncol name text 10\n")


def test_expr_precision_rules():
    schema = parse_schema("table t\ncol i int\ncol p real 100\ncol r real\n")
    ctx = validate(parse_query("SELECT sum(i) FROM t"), schema)
    al = ctx.aliases
    assert sf.expr_precision(ColRef("t", "i"), al, schema) == 1.0
    assert sf.expr_precision(ColRef("t", "p"), al, schema) == 100.0
    assert sf.expr_precision(ColRef("t", "r"), al, schema) is None
    assert sf.expr_precision(Number(2.5), al, schema) == 10.0
    assert sf.expr_precision(
        BinOp("+", ColRef("t", "i"), ColRef("t", "p")), al, schema) == 100.0
    assert sf.expr_precision(
        BinOp("*", ColRef("t", "p"), ColRef("t", "p")), al, schema) == 10000.0
