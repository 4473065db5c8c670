"""SQL subset parser, schema and norm files, CSV loading with sensitive-row masks.

Queries have the shape SELECT aggr(expr) FROM t1 [AS a1], ... WHERE cond,
with aggr in {SUM, COUNT, PRODUCT, MIN, MAX} and cond a boolean tree of
comparisons.  A tolerant mode additionally accepts the constructs the
analyzer emits (CASE WHEN, greatest, exp, ^, FROM-subqueries, GROUP BY) so
emitted sensitivity queries can be re-read and re-evaluated independently.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Union

from dersens.norms import NormExpr, NormError, norm_vars, parse_norm

__all__ = [
    "BoolOp",
    "Cmp",
    "ColRef",
    "Database",
    "FuncCall",
    "LikePred",
    "Number",
    "ParseError",
    "QuerySpec",
    "Schema",
    "SchemaError",
    "StrLit",
    "TableData",
    "TableSchema",
    "TruePred",
    "date_to_months",
    "load_database",
    "parse_emitted",
    "parse_query",
    "parse_schema",
    "print_query",
    "validate",
]

AGGREGATORS = ("SUM", "COUNT", "PRODUCT", "MIN", "MAX")
NUMERIC_TYPES = ("int", "real", "date-months")
COLUMN_TYPES = NUMERIC_TYPES + ("text",)


class ParseError(ValueError):
    def __init__(self, message: str, pos: tuple[int, int] | None = None, token: str = ""):
        loc = f" at line {pos[0]}, column {pos[1]}" if pos else ""
        tok = f" near '{token}'" if token else ""
        super().__init__(f"{message}{loc}{tok}")


class SchemaError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Surface AST
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Number:
    value: float


@dataclass(frozen=True)
class StrLit:
    value: str


@dataclass(frozen=True)
class ColRef:
    table: str  # alias; empty until resolution when written unqualified
    column: str

    @property
    def name(self) -> str:
        return f"{self.table}.{self.column}" if self.table else self.column


@dataclass(frozen=True)
class BinOp:
    op: str  # + - * / ^
    lhs: "SqlExpr"
    rhs: "SqlExpr"


@dataclass(frozen=True)
class FuncCall:
    name: str
    args: tuple["SqlExpr", ...]


@dataclass(frozen=True)
class CaseWhen:
    cond: "Pred"
    then: "SqlExpr"
    other: "SqlExpr"


@dataclass(frozen=True)
class SubQuery:
    query: "EmittedSelect"


SqlExpr = Union[Number, StrLit, ColRef, BinOp, FuncCall, CaseWhen, SubQuery]


@dataclass(frozen=True)
class Cmp:
    op: str  # < <= > >= = <>
    lhs: SqlExpr
    rhs: SqlExpr


@dataclass(frozen=True)
class LikePred:
    col: ColRef
    pattern: str
    negated: bool = False


@dataclass(frozen=True)
class BoolCol:
    """Bare boolean column (the sensRows.sensitive flag) used as a conjunct."""

    col: ColRef


@dataclass(frozen=True)
class BoolOp:
    op: str  # and / or / xor
    args: tuple["Pred", ...]
    exclusive: bool = False  # or-args provably mutually exclusive (IN lists)


@dataclass(frozen=True)
class NotPred:
    arg: "Pred"


@dataclass(frozen=True)
class TruePred:
    pass


Pred = Union[Cmp, LikePred, BoolCol, BoolOp, NotPred, TruePred]


@dataclass(frozen=True)
class QuerySpec:
    aggregator: str
    select: SqlExpr | None  # None for COUNT(*)
    tables: tuple[tuple[str, str], ...]  # (table, alias)
    where: Pred


@dataclass(frozen=True)
class EmittedSelect:
    """Loose shape for re-reading emitted SQL: a select expression that may
    contain aggregate calls, over base tables or one subquery, with optional
    grouping.  count(*) parses as FuncCall('count', ())."""

    select: SqlExpr
    out_name: str
    tables: tuple[tuple[str, str], ...]
    sub: "EmittedSelect | None"
    sub_alias: str
    where: Pred
    group_by: ColRef | None


# ---------------------------------------------------------------------------
# Lexer
# ---------------------------------------------------------------------------

_KEYWORDS = {
    "select", "from", "where", "as", "and", "or", "xor", "not", "in", "between",
    "like", "group", "by", "distinct", "case", "when", "then", "else", "end",
    "is", "null", "having", "order", "limit", "union", "join",
}

_TWO_CHAR = ("<=", ">=", "<>", "!=")


@dataclass(frozen=True)
class _Tok:
    kind: str  # kw, ident, num, str, op
    text: str
    pos: tuple[int, int]


def _lex(sql: str) -> list[_Tok]:
    toks: list[_Tok] = []
    i, line, col = 0, 1, 1
    n = len(sql)

    def advance(k: int):
        nonlocal i, line, col
        for _ in range(k):
            if sql[i] == "\n":
                line += 1
                col = 1
            else:
                col += 1
            i += 1

    while i < n:
        ch = sql[i]
        if ch.isspace():
            advance(1)
            continue
        if sql.startswith("--", i):
            while i < n and sql[i] != "\n":
                advance(1)
            continue
        pos = (line, col)
        if ch == "'":
            j = i + 1
            while j < n and sql[j] != "'":
                j += 1
            if j >= n:
                raise ParseError("unterminated string literal", pos)
            toks.append(_Tok("str", sql[i + 1 : j], pos))
            advance(j + 1 - i)
            continue
        if ch.isdigit() or (ch == "." and i + 1 < n and sql[i + 1].isdigit()):
            j = i
            while j < n and (sql[j].isdigit() or sql[j] in ".eE" or (sql[j] in "+-" and sql[j - 1] in "eE")):
                j += 1
            toks.append(_Tok("num", sql[i:j], pos))
            advance(j - i)
            continue
        if ch.isalpha() or ch == "_":
            j = i
            while j < n and (sql[j].isalnum() or sql[j] == "_"):
                j += 1
            word = sql[i:j]
            kind = "kw" if word.lower() in _KEYWORDS else "ident"
            toks.append(_Tok(kind, word, pos))
            advance(j - i)
            continue
        two = sql[i : i + 2]
        if two in _TWO_CHAR:
            toks.append(_Tok("op", "<>" if two == "!=" else two, pos))
            advance(2)
            continue
        if ch in "()+-*/^,.;<>=":
            toks.append(_Tok("op", ch, pos))
            advance(1)
            continue
        raise ParseError("unexpected character", pos, ch)
    return toks


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


class _Parser:
    def __init__(self, sql: str, tolerant: bool = False):
        self.toks = _lex(sql)
        self.pos = 0
        self.tolerant = tolerant

    # -- token helpers ------------------------------------------------------

    def _peek(self, ahead: int = 0) -> _Tok | None:
        k = self.pos + ahead
        return self.toks[k] if k < len(self.toks) else None

    def _next(self) -> _Tok:
        t = self._peek()
        if t is None:
            raise ParseError("unexpected end of query")
        self.pos += 1
        return t

    def _at(self, text: str) -> bool:
        t = self._peek()
        return t is not None and t.text.lower() == text

    def _eat(self, text: str) -> bool:
        if self._at(text):
            self.pos += 1
            return True
        return False

    def _expect(self, text: str) -> _Tok:
        t = self._next()
        if t.text.lower() != text:
            raise ParseError(f"expected '{text}'", t.pos, t.text)
        return t

    # -- entry points --------------------------------------------------------

    def parse_query(self) -> QuerySpec:
        self._expect("select")
        if self._at("distinct"):
            t = self._peek()
            raise ParseError("DISTINCT is not supported", t.pos, t.text)
        agg, arg = self._aggregate()
        self._expect("from")
        tables = self._tables()
        where: Pred = TruePred()
        if self._eat("where"):
            where = self._pred()
        self._eat(";")
        t = self._peek()
        if t is not None:
            if t.text.lower() in ("group", "having", "order", "limit", "union"):
                raise ParseError(f"{t.text.upper()} is not supported", t.pos, t.text)
            raise ParseError("trailing input after query", t.pos, t.text)
        return QuerySpec(agg, arg, tables, where)

    def parse_emitted(self, *, toplevel: bool = True) -> EmittedSelect:
        self._expect("select")
        select = self._expr()
        out_name = ""
        if self._eat("as"):
            out_name = self._next().text
        sub: EmittedSelect | None = None
        sub_alias = ""
        tables: tuple[tuple[str, str], ...] = ()
        where: Pred = TruePred()
        group_by: ColRef | None = None
        if self._eat("from"):
            if self._at("("):
                save = self.pos
                self._next()
                if self._at("select"):
                    sub = self.parse_emitted(toplevel=False)
                    self._expect(")")
                    self._eat("as")
                    sub_alias = self._next().text
                else:
                    self.pos = save
                    tables = self._tables()
            else:
                tables = self._tables()
            if self._eat("where"):
                where = self._pred()
            if self._eat("group"):
                self._expect("by")
                group_by = self._colref()
        if toplevel:
            self._eat(";")
            t = self._peek()
            if t is not None:
                raise ParseError("trailing input after query", t.pos, t.text)
        return EmittedSelect(select, out_name, tables, sub, sub_alias, where, group_by)

    # -- pieces ---------------------------------------------------------------

    def _aggregate(self) -> tuple[str, SqlExpr | None]:
        t = self._next()
        name = t.text.upper()
        if name not in AGGREGATORS:
            raise ParseError(
                f"unsupported aggregator '{t.text}' (supported: {', '.join(AGGREGATORS)})",
                t.pos,
                t.text,
            )
        self._expect("(")
        if name == "COUNT" and self._at("*"):
            self._next()
            self._expect(")")
            return name, None
        arg = self._expr()
        self._expect(")")
        if name == "COUNT" and not self.tolerant:
            # COUNT(col) counts rows; NULLs are out of scope
            if not isinstance(arg, ColRef):
                t = self._peek() or _Tok("op", "", (0, 0))
                raise ParseError("COUNT takes * or a single column", t.pos, t.text)
            return name, None
        return name, arg

    def _tables(self) -> tuple[tuple[str, str], ...]:
        out = []
        while True:
            t = self._next()
            if t.kind not in ("ident", "kw"):
                raise ParseError("expected a table name", t.pos, t.text)
            name = t.text
            alias = name
            if self._eat("as"):
                alias = self._next().text
            elif (nt := self._peek()) is not None and nt.kind == "ident":
                alias = self._next().text
            out.append((name, alias))
            if not self._eat(","):
                break
        return tuple(out)

    def _colref(self) -> ColRef:
        t = self._next()
        if t.kind not in ("ident", "kw"):
            raise ParseError("expected a column reference", t.pos, t.text)
        if self._eat("."):
            c = self._next()
            return ColRef(t.text, c.text)
        return ColRef("", t.text)

    # boolean grammar

    def _pred(self) -> Pred:
        return self._or()

    def _or(self) -> Pred:
        left = self._and()
        args = [left]
        op = None
        while self._at("or") or self._at("xor"):
            word = self._next().text.lower()
            if op is None:
                op = word
            elif op != word:
                raise ParseError("mixed OR/XOR chains need parentheses")
            args.append(self._and())
        if op is None:
            return left
        return BoolOp(op, tuple(args))

    def _and(self) -> Pred:
        left = self._not()
        args = [left]
        while self._eat("and"):
            args.append(self._not())
        if len(args) == 1:
            return left
        return BoolOp("and", tuple(args))

    def _not(self) -> Pred:
        if self._eat("not"):
            inner = self._not()
            if isinstance(inner, LikePred):
                return LikePred(inner.col, inner.pattern, not inner.negated)
            return NotPred(inner)
        return self._atom_pred()

    def _atom_pred(self) -> Pred:
        if self._at("("):
            save = self.pos
            self._next()
            try:
                inner = self._pred()
                self._expect(")")
                return inner
            except ParseError:
                self.pos = save
        if self._at("select"):
            t = self._peek()
            raise ParseError("subqueries are not supported", t.pos, t.text)
        lhs = self._expr()
        t = self._peek()
        if t is None:
            return self._bare_bool(lhs)
        word = t.text.lower()
        if t.kind == "op" and t.text in ("<", "<=", ">", ">=", "=", "<>"):
            self._next()
            rhs = self._expr()
            return Cmp(t.text, lhs, rhs)
        if word == "between":
            self._next()
            lo = self._expr()
            self._expect("and")
            hi = self._expr()
            return BoolOp("and", (Cmp(">=", lhs, lo), Cmp("<=", lhs, hi)))
        if word == "in":
            self._next()
            self._expect("(")
            if self._at("select"):
                tt = self._peek()
                raise ParseError("subqueries are not supported", tt.pos, tt.text)
            items = [self._expr()]
            while self._eat(","):
                items.append(self._expr())
            self._expect(")")
            # one expression against distinct literals: the disjuncts exclude
            # each other, so the analyzer may lower this OR as a plain sum
            lits = {(type(x), getattr(x, "value", None)) for x in items}
            excl = all(isinstance(x, (Number, StrLit)) for x in items) and len(lits) == len(items)
            return BoolOp("or", tuple(Cmp("=", lhs, x) for x in items), exclusive=excl)
        if word == "like":
            self._next()
            pat = self._next()
            if pat.kind != "str":
                raise ParseError("LIKE needs a string pattern", pat.pos, pat.text)
            if not isinstance(lhs, ColRef):
                raise ParseError("LIKE applies to a column", pat.pos, pat.text)
            return LikePred(lhs, pat.text)
        return self._bare_bool(lhs)

    def _bare_bool(self, lhs: SqlExpr) -> Pred:
        if isinstance(lhs, ColRef):
            return BoolCol(lhs)
        raise ParseError("expected a comparison")

    # arithmetic grammar

    def _expr(self) -> SqlExpr:
        left = self._term()
        while (t := self._peek()) is not None and t.kind == "op" and t.text in "+-":
            self._next()
            left = BinOp(t.text, left, self._term())
        return left

    def _term(self) -> SqlExpr:
        left = self._factor()
        while (t := self._peek()) is not None and t.kind == "op" and t.text in "*/":
            self._next()
            left = BinOp(t.text, left, self._factor())
        return left

    def _factor(self) -> SqlExpr:
        t = self._peek()
        if t is not None and t.kind == "op" and t.text == "-":
            self._next()
            inner = self._factor()
            if isinstance(inner, Number):
                return Number(-inner.value)
            return BinOp("*", Number(-1.0), inner)
        return self._power()

    def _power(self) -> SqlExpr:
        base = self._atom()
        if (t := self._peek()) is not None and t.kind == "op" and t.text == "^":
            self._next()
            return BinOp("^", base, self._factor())
        return base

    def _atom(self) -> SqlExpr:
        t = self._next()
        if t.kind == "num":
            try:
                return Number(float(t.text))
            except ValueError:
                raise ParseError("bad numeric literal", t.pos, t.text) from None
        if t.kind == "str":
            return StrLit(t.text)
        if t.text == "(":
            if self._at("select"):
                if not self.tolerant:
                    tt = self._peek()
                    raise ParseError("subqueries are not supported", tt.pos, tt.text)
                sub = self.parse_emitted(toplevel=False)
                self._expect(")")
                return SubQuery(sub)
            e = self._expr()
            self._expect(")")
            return e
        if t.text.lower() == "case":
            self._expect("when")
            cond = self._pred()
            self._expect("then")
            then = self._expr()
            self._expect("else")
            other = self._expr()
            self._expect("end")
            return CaseWhen(cond, then, other)
        if t.kind in ("ident", "kw"):
            if self._at("("):
                self._next()
                args = []
                if self.tolerant and self._at("*"):
                    self._next()
                elif not self._at(")"):
                    args.append(self._expr())
                    while self._eat(","):
                        args.append(self._expr())
                self._expect(")")
                return FuncCall(t.text.lower(), tuple(args))
            if self._eat("."):
                c = self._next()
                return ColRef(t.text, c.text)
            return ColRef("", t.text)
        raise ParseError("unexpected token", t.pos, t.text)


def parse_query(sql: str) -> QuerySpec:
    """Parse the supported SQL subset into a QuerySpec."""
    return _Parser(sql).parse_query()


def parse_emitted(sql: str) -> EmittedSelect:
    """Parse-tolerant reader for emitted modified/sensitivity queries."""
    return _Parser(sql, tolerant=True).parse_emitted()


# ---------------------------------------------------------------------------
# Printer (round-trips through parse_query)
# ---------------------------------------------------------------------------


def print_expr(e: SqlExpr) -> str:
    if isinstance(e, Number):
        v = e.value
        if v < 0:
            return f"(-{_fmt_num(-v)})"
        return _fmt_num(v)
    if isinstance(e, StrLit):
        return f"'{e.value}'"
    if isinstance(e, ColRef):
        return e.name
    if isinstance(e, BinOp):
        return f"({print_expr(e.lhs)} {e.op} {print_expr(e.rhs)})"
    if isinstance(e, FuncCall):
        return f"{e.name}({', '.join(print_expr(a) for a in e.args)})"
    if isinstance(e, CaseWhen):
        return (
            f"case when {print_pred(e.cond)} then {print_expr(e.then)}"
            f" else {print_expr(e.other)} end"
        )
    if isinstance(e, SubQuery):
        return f"({_print_emitted(e.query)})"
    raise TypeError(type(e).__name__)


def _fmt_num(v: float) -> str:
    if v == int(v) and abs(v) < 1e15:
        return f"{v:.1f}"
    return repr(v)


def print_pred(p: Pred) -> str:
    if isinstance(p, TruePred):
        return "1.0 = 1.0"
    if isinstance(p, Cmp):
        return f"({print_expr(p.lhs)} {p.op} {print_expr(p.rhs)})"
    if isinstance(p, LikePred):
        body = f"({p.col.name} LIKE '{p.pattern}')"
        return f"not({body})" if p.negated else body
    if isinstance(p, BoolCol):
        return p.col.name
    if isinstance(p, NotPred):
        return f"not({print_pred(p.arg)})"
    if isinstance(p, BoolOp):
        sep = f" {p.op.upper()} "
        return "(" + sep.join(print_pred(a) for a in p.args) + ")"
    raise TypeError(type(p).__name__)


def print_query(q: QuerySpec) -> str:
    agg = q.aggregator.lower()
    arg = "*" if q.select is None else print_expr(q.select)
    tables = ", ".join(t if t == a else f"{t} AS {a}" for t, a in q.tables)
    out = f"SELECT {agg}({arg}) FROM {tables}"
    if not isinstance(q.where, TruePred):
        out += f" WHERE {print_pred(q.where)}"
    return out + ";"


def _print_emitted(q: EmittedSelect) -> str:
    out = f"SELECT {print_expr(q.select)}"
    if q.out_name:
        out += f" AS {q.out_name}"
    if q.sub is not None:
        out += f" FROM ({_print_emitted(q.sub)}) AS {q.sub_alias or 'sub'}"
    elif q.tables:
        out += " FROM " + ", ".join(t if t == a else f"{t} AS {a}" for t, a in q.tables)
    if not isinstance(q.where, TruePred):
        out += f" WHERE {print_pred(q.where)}"
    if q.group_by is not None:
        out += f" GROUP BY {q.group_by.name}"
    return out


# ---------------------------------------------------------------------------
# Schema files
# ---------------------------------------------------------------------------


@dataclass
class TableSchema:
    name: str
    columns: list[tuple[str, str]] = field(default_factory=list)
    rows_p: float = 1.0
    norm: NormExpr | None = None
    precisions: dict[str, float] = field(default_factory=dict)

    def column_type(self, col: str) -> str | None:
        for c, ty in self.columns:
            if c == col:
                return ty
        return None

    def column_precision(self, col: str) -> float | None:
        """Grid density k with distinct values at least 1/k apart: 1 for int
        columns, the declared precision for real columns, None otherwise."""
        ty = self.column_type(col)
        if ty == "int":
            return 1.0
        return self.precisions.get(col)

    @property
    def sensitive_columns(self) -> frozenset[str]:
        return norm_vars(self.norm) if self.norm is not None else frozenset()


@dataclass
class Schema:
    tables: dict[str, TableSchema] = field(default_factory=dict)
    database_p: float = math.inf

    def table(self, name: str) -> TableSchema:
        try:
            return self.tables[name]
        except KeyError:
            raise SchemaError(f"unknown table '{name}'") from None


def parse_schema(text: str, base: Schema | None = None) -> Schema:
    """Parse schema/norm description lines.

    Lines: "table <name>", "col <name> <type>", "rows lp <p>" or "rows linf",
    "norm <norm-expr>", "database lp <p>" or "database linf"; '#' comments.
    When `base` is given, norm/rows lines amend the existing tables (used for
    a separate norm file overriding the schema's defaults).
    """
    schema = base if base is not None else Schema()
    current: TableSchema | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split(None, 1)
        word, rest = parts[0], parts[1] if len(parts) > 1 else ""
        try:
            if word == "table":
                name = rest.strip()
                if not name:
                    raise SchemaError("table line needs a name")
                current = schema.tables.setdefault(name, TableSchema(name))
            elif word == "col":
                if current is None:
                    raise SchemaError("col line before any table")
                bits = rest.split()
                if len(bits) not in (2, 3) or bits[1] not in COLUMN_TYPES:
                    raise SchemaError(
                        f"col line needs '<name> <{'/'.join(COLUMN_TYPES)}> [precision]'"
                    )
                current.columns.append((bits[0], bits[1]))
                if len(bits) == 3:
                    if bits[1] != "real":
                        raise SchemaError("a precision only applies to real columns")
                    k = float(bits[2])
                    if not k > 0:
                        raise SchemaError(f"precision must be positive, got {k}")
                    current.precisions[bits[0]] = k
            elif word == "rows":
                if current is None:
                    raise SchemaError("rows line before any table")
                current.rows_p = _parse_combiner(rest)
            elif word == "norm":
                if current is None:
                    raise SchemaError("norm line before any table")
                current.norm = parse_norm(rest)
            elif word == "database":
                schema.database_p = _parse_combiner(rest)
            else:
                raise SchemaError(f"unknown schema directive '{word}'")
        except (SchemaError, NormError) as exc:
            raise SchemaError(f"line {lineno}: {exc}") from None
    _check_schema(schema)
    return schema


def _parse_combiner(rest: str) -> float:
    bits = rest.split()
    if bits == ["linf"]:
        return math.inf
    if len(bits) == 2 and bits[0] == "lp":
        p = float(bits[1])
        if p < 1.0:
            raise SchemaError(f"combiner exponent must be >= 1, got {p}")
        return p
    raise SchemaError("combiner must be 'lp <p>' or 'linf'")


def _check_schema(schema: Schema) -> None:
    for t in schema.tables.values():
        if t.norm is None:
            continue
        cols = dict(t.columns)
        for v in norm_vars(t.norm):
            ty = cols.get(v)
            if ty is None:
                raise SchemaError(f"norm of table '{t.name}' uses unknown column '{v}'")
            if ty == "text":
                raise SchemaError(
                    f"norm of table '{t.name}' uses text column '{v}'; text is never sensitive"
                )


# ---------------------------------------------------------------------------
# Data loading
# ---------------------------------------------------------------------------


def date_to_months(value: str) -> float:
    """Months since 1980-01-01; day fractions use 30.4375-day months."""
    parts = value.strip().split("-")
    if len(parts) != 3:
        raise SchemaError(f"bad date '{value}' (expected YYYY-MM-DD)")
    y, m, d = (int(p) for p in parts)
    if not (1 <= m <= 12 and 1 <= d <= 31):
        raise SchemaError(f"bad date '{value}'")
    return (y - 1980) * 12 + (m - 1) + (d - 1) / 30.4375


@dataclass
class TableData:
    name: str
    columns: list[str]
    rows: list[dict[str, float | str]]
    ids: list[str]
    sensitive: list[bool]


@dataclass
class Database:
    tables: dict[str, TableData]

    def table(self, name: str) -> TableData:
        try:
            return self.tables[name]
        except KeyError:
            raise SchemaError(f"no data loaded for table '{name}'") from None


def _convert(value: str, ty: str, table: str, col: str) -> float | str:
    if ty == "text":
        return value
    try:
        if ty == "int":
            return float(int(value))
        if ty == "real":
            return float(value)
        # date-months: ISO dates converted, plain numbers passed through
        try:
            return float(value)
        except ValueError:
            return date_to_months(value)
    except (ValueError, SchemaError) as exc:
        raise SchemaError(f"{table}.{col}: cannot read '{value}' as {ty}: {exc}") from None


def load_database(data_dir: str, schema: Schema) -> Database:
    """Load <table>.csv plus <table>_sensRows.csv for every schema table."""
    tables: dict[str, TableData] = {}
    for tname, ts in schema.tables.items():
        path = os.path.join(data_dir, f"{tname}.csv")
        if not os.path.exists(path):
            raise SchemaError(f"missing data file {path}")
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if not header or header[0] != "ID":
                raise SchemaError(f"{path}: first column must be ID")
            declared = [c for c, _ in ts.columns]
            if header[1:] != declared:
                raise SchemaError(
                    f"{path}: columns {header[1:]} do not match schema {declared}"
                )
            types = dict(ts.columns)
            rows, ids = [], []
            for rec in reader:
                if not rec:
                    continue
                if len(rec) != len(header):
                    raise SchemaError(f"{path}: row width mismatch: {rec}")
                ids.append(rec[0])
                rows.append(
                    {c: _convert(v, types[c], tname, c) for c, v in zip(header[1:], rec[1:])}
                )
        if len(set(ids)) != len(ids):
            raise SchemaError(f"{path}: duplicate row IDs")
        mask = _load_mask(data_dir, tname, ids)
        tables[tname] = TableData(tname, [c for c, _ in ts.columns], rows, ids, mask)
    return Database(tables)


def _load_mask(data_dir: str, tname: str, ids: list[str]) -> list[bool]:
    path = os.path.join(data_dir, f"{tname}_sensRows.csv")
    if not os.path.exists(path):
        raise SchemaError(f"missing sensitive-rows file {path}")
    flags: dict[str, bool] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["ID", "sensitive"]:
            raise SchemaError(f"{path}: header must be ID,sensitive")
        for rec in reader:
            if not rec:
                continue
            if rec[0] not in set(ids):
                raise SchemaError(f"{path}: sensRows ID '{rec[0]}' not present in {tname}.csv")
            if rec[1] not in ("0", "1"):
                raise SchemaError(f"{path}: sensitive flag must be 0 or 1, got '{rec[1]}'")
            flags[rec[0]] = rec[1] == "1"
    return [flags.get(i, False) for i in ids]


# ---------------------------------------------------------------------------
# Validation: alias resolution and public/sensitive classification
# ---------------------------------------------------------------------------


@dataclass
class ResolvedRef:
    alias: str
    table: str
    column: str
    type: str
    sensitive: bool

    @property
    def name(self) -> str:
        return f"{self.alias}.{self.column}"


@dataclass
class AnalysisContext:
    query: QuerySpec
    schema: Schema
    aliases: dict[str, str]  # alias -> table
    public_pred: Pred
    residual_pred: Pred  # contains at least one sensitive atom, or TruePred
    sensitive_aliases: list[str]  # aliases of tables with declared norms


def _resolve_colref(ref: ColRef, aliases: dict[str, str], schema: Schema) -> ResolvedRef:
    if ref.table:
        if ref.table not in aliases:
            raise SchemaError(f"unknown table alias '{ref.table}' in {ref.name}")
        table = aliases[ref.table]
        ts = schema.table(table)
        ty = ts.column_type(ref.column)
        if ty is None:
            raise SchemaError(f"table '{table}' has no column '{ref.column}'")
        return ResolvedRef(ref.table, table, ref.column, ty, ref.column in ts.sensitive_columns)
    hits = []
    for alias, table in aliases.items():
        ts = schema.table(table)
        ty = ts.column_type(ref.column)
        if ty is not None:
            hits.append(ResolvedRef(alias, table, ref.column, ty, ref.column in ts.sensitive_columns))
    if not hits:
        raise SchemaError(f"column '{ref.column}' not found in any queried table")
    if len(hits) > 1:
        raise SchemaError(f"column '{ref.column}' is ambiguous; qualify it")
    return hits[0]


def _walk_refs(e: SqlExpr | Pred) -> Iterable[ColRef]:
    if isinstance(e, ColRef):
        yield e
    elif isinstance(e, BinOp):
        yield from _walk_refs(e.lhs)
        yield from _walk_refs(e.rhs)
    elif isinstance(e, FuncCall):
        for a in e.args:
            yield from _walk_refs(a)
    elif isinstance(e, Cmp):
        yield from _walk_refs(e.lhs)
        yield from _walk_refs(e.rhs)
    elif isinstance(e, LikePred):
        yield e.col
    elif isinstance(e, BoolCol):
        yield e.col
    elif isinstance(e, BoolOp):
        for a in e.args:
            yield from _walk_refs(a)
    elif isinstance(e, NotPred):
        yield from _walk_refs(e.arg)


def qualify(node, aliases: dict[str, str], schema: Schema):
    """Rewrite unqualified column references with their unique alias."""
    if isinstance(node, ColRef):
        r = _resolve_colref(node, aliases, schema)
        return ColRef(r.alias, r.column)
    if isinstance(node, BinOp):
        return BinOp(node.op, qualify(node.lhs, aliases, schema), qualify(node.rhs, aliases, schema))
    if isinstance(node, FuncCall):
        return FuncCall(node.name, tuple(qualify(a, aliases, schema) for a in node.args))
    if isinstance(node, Cmp):
        return Cmp(node.op, qualify(node.lhs, aliases, schema), qualify(node.rhs, aliases, schema))
    if isinstance(node, LikePred):
        return LikePred(qualify(node.col, aliases, schema), node.pattern, node.negated)
    if isinstance(node, BoolCol):
        return BoolCol(qualify(node.col, aliases, schema))
    if isinstance(node, BoolOp):
        return BoolOp(node.op, tuple(qualify(a, aliases, schema) for a in node.args), node.exclusive)
    if isinstance(node, NotPred):
        return NotPred(qualify(node.arg, aliases, schema))
    return node


def _atom_sensitive(p: Pred, aliases, schema) -> bool:
    return any(
        _resolve_colref(r, aliases, schema).sensitive for r in _walk_refs(p)
    )


def _pred_sensitive(p: Pred, aliases, schema) -> bool:
    if isinstance(p, (Cmp, LikePred, BoolCol)):
        return _atom_sensitive(p, aliases, schema)
    if isinstance(p, BoolOp):
        return any(_pred_sensitive(a, aliases, schema) for a in p.args)
    if isinstance(p, NotPred):
        return _pred_sensitive(p.arg, aliases, schema)
    return False


def validate(query: QuerySpec, schema: Schema) -> AnalysisContext:
    """Resolve aliases, type-check, and split the WHERE clause into the
    public part (stays a filter) and the residual sensitive part (lowered
    into the query by the analyzer)."""
    aliases: dict[str, str] = {}
    seen_tables: dict[str, int] = {}
    for table, alias in query.tables:
        schema.table(table)
        if alias in aliases:
            raise SchemaError(f"duplicate table alias '{alias}'")
        aliases[alias] = table
        seen_tables[table] = seen_tables.get(table, 0) + 1
    for table, count in seen_tables.items():
        if count > 1 and schema.table(table).norm is not None:
            raise SchemaError(
                f"table '{table}' is sensitive and joined with itself; "
                "self-joins are only supported for tables without a norm"
            )

    query = QuerySpec(
        query.aggregator,
        qualify(query.select, aliases, schema) if query.select is not None else None,
        query.tables,
        qualify(query.where, aliases, schema),
    )

    if query.select is not None:
        for r in _walk_refs(query.select):
            rr = _resolve_colref(r, aliases, schema)
            if rr.type == "text":
                raise SchemaError(f"text column '{rr.name}' cannot appear in the select expression")

    for r in _walk_refs(query.where):
        _resolve_colref(r, aliases, schema)
    _check_atoms(query.where, aliases, schema)

    conjuncts = _flatten_and(query.where)
    public = [c for c in conjuncts if not _pred_sensitive(c, aliases, schema)]
    residual = [c for c in conjuncts if _pred_sensitive(c, aliases, schema)]

    sensitive_aliases = sorted(
        alias for alias, table in aliases.items() if schema.table(table).norm is not None
    )
    return AnalysisContext(
        query=query,
        schema=schema,
        aliases=aliases,
        public_pred=_make_and(public),
        residual_pred=_make_and(residual),
        sensitive_aliases=sensitive_aliases,
    )


def _check_atoms(p: Pred, aliases, schema) -> None:
    if isinstance(p, LikePred):
        r = _resolve_colref(p.col, aliases, schema)
        if r.type != "text":
            raise SchemaError(f"LIKE needs a text column, got {r.name} ({r.type})")
        if r.sensitive:
            raise SchemaError(f"LIKE on sensitive column '{r.name}' is not supported")
    elif isinstance(p, Cmp):
        text_side = [
            r for r in _walk_refs(p) if _resolve_colref(r, aliases, schema).type == "text"
        ]
        if text_side and p.op not in ("=", "<>"):
            raise SchemaError("text columns only support = and <> comparisons")
    elif isinstance(p, BoolOp):
        for a in p.args:
            _check_atoms(a, aliases, schema)
    elif isinstance(p, NotPred):
        _check_atoms(p.arg, aliases, schema)


def _flatten_and(p: Pred) -> list[Pred]:
    if isinstance(p, TruePred):
        return []
    if isinstance(p, BoolOp) and p.op == "and":
        out = []
        for a in p.args:
            out.extend(_flatten_and(a))
        return out
    return [p]


def _make_and(conjuncts: list[Pred]) -> Pred:
    if not conjuncts:
        return TruePred()
    if len(conjuncts) == 1:
        return conjuncts[0]
    return BoolOp("and", tuple(conjuncts))


def is_integer_expr(e: SqlExpr, aliases, schema) -> bool:
    """True when the expression provably takes integer values (int columns,
    integer literals, +/-/* combinations): comparisons over these admit the
    exact clamped lowering."""
    return expr_precision(e, aliases, schema) == 1.0


_PRECISION_CAP = 1e6


def expr_precision(e: SqlExpr, aliases, schema) -> float | None:
    """Grid density k such that the expression provably takes values on the
    1/k grid (so distinct values differ by at least 1/k), or None.  Integer
    columns and literals have k = 1; declared-precision reals carry their k;
    sums and products of gridded values land on the product grid."""
    if isinstance(e, Number):
        v = float(e.value)
        for k in (1.0, 10.0, 100.0, 1000.0, 1e4, 1e5, 1e6):
            if abs(v * k - round(v * k)) <= 1e-9 * max(1.0, abs(v * k)):
                return k
        return None
    if isinstance(e, ColRef):
        r = _resolve_colref(e, aliases, schema)
        return schema.table(r.table).column_precision(r.column)
    if isinstance(e, BinOp) and e.op in "+-*":
        k1 = expr_precision(e.lhs, aliases, schema)
        k2 = expr_precision(e.rhs, aliases, schema)
        if k1 is None or k2 is None:
            return None
        if e.op == "*":
            k = k1 * k2
        else:
            big, small = max(k1, k2), min(k1, k2)
            k = big if (big / small).is_integer() else k1 * k2
        return k if k <= _PRECISION_CAP else None
    return None
