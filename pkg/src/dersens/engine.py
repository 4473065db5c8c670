"""In-process evaluator for initial queries, modified queries and sensitivity
plans; replaces a live database for hermetic runs.

Joins are plain nested loops over the public-filtered cross product (this is
a correctness oracle, not a DBMS); accumulation uses exact summation so
repeated runs are bit-identical.  A separate interpreter re-evaluates
emitted SQL text read back through the tolerant parser, which gives an
independent route for checking `run_sensitivity` against `emit_sql`.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from itertools import product as iproduct
from typing import Mapping

from dersens import sqlfront as sf
from dersens.analyzer import SensitivityPlan
from dersens.exprs import eval_scalar
from dersens.norms import INF
from dersens.sqlfront import (
    AnalysisContext,
    BinOp,
    BoolCol,
    BoolOp,
    CaseWhen,
    Cmp,
    ColRef,
    Database,
    EmittedSelect,
    FuncCall,
    LikePred,
    NotPred,
    Number,
    Pred,
    SqlExpr,
    StrLit,
    SubQuery,
    TruePred,
)

__all__ = [
    "EngineError",
    "evaluate_emitted",
    "public_rows",
    "run_initial",
    "run_modified",
    "run_sensitivity",
]


class EngineError(RuntimeError):
    pass


Env = dict[str, object]


def _like_regex(pattern: str) -> re.Pattern:
    out = []
    for ch in pattern:
        if ch == "%":
            out.append(".*")
        elif ch == "_":
            out.append(".")
        else:
            out.append(re.escape(ch))
    return re.compile("^" + "".join(out) + "$", re.DOTALL)


def _lookup(env: Env, ref: ColRef):
    if ref.table:
        key = ref.name
        if key in env:
            return env[key]
        raise EngineError(f"no column '{key}' in row")
    if ref.column in env:
        return env[ref.column]
    hits = [k for k in env if k.endswith("." + ref.column)]
    if len(hits) == 1:
        return env[hits[0]]
    if not hits:
        raise EngineError(f"no column '{ref.column}' in row")
    raise EngineError(f"ambiguous column '{ref.column}' in row")


def _eval_side(e: SqlExpr, env: Env, subcache: dict | None = None, db=None):
    if isinstance(e, Number):
        return e.value
    if isinstance(e, StrLit):
        return e.value
    if isinstance(e, ColRef):
        return _lookup(env, e)
    if isinstance(e, BinOp):
        a = _eval_side(e.lhs, env, subcache, db)
        b = _eval_side(e.rhs, env, subcache, db)
        if e.op == "+":
            return a + b
        if e.op == "-":
            return a - b
        if e.op == "*":
            return a * b
        if e.op == "/":
            if b == 0:
                raise EngineError("division by zero")
            return a / b
        if e.op == "^":
            try:
                return a**b
            except (ValueError, OverflowError) as exc:
                raise EngineError(f"power failed: {exc}") from None
    if isinstance(e, FuncCall):
        args = [_eval_side(a, env, subcache, db) for a in e.args]
        if e.name == "abs":
            return abs(args[0])
        if e.name == "exp":
            return math.exp(args[0])
        if e.name == "ln":
            return math.log(args[0])
        if e.name == "sqrt":
            return math.sqrt(args[0])
        if e.name == "greatest":
            return max(args)
        if e.name == "least":
            return min(args)
        raise EngineError(f"unknown function '{e.name}' in row context")
    if isinstance(e, CaseWhen):
        if eval_pred_bool(e.cond, env, subcache, db):
            return _eval_side(e.then, env, subcache, db)
        return _eval_side(e.other, env, subcache, db)
    if isinstance(e, SubQuery):
        if db is None:
            raise EngineError("subquery outside emitted-query evaluation")
        if subcache is None:
            subcache = {}
        key = id(e.query)
        if key not in subcache:
            subcache[key] = evaluate_emitted(e.query, db, _subcache=subcache)
        return subcache[key]
    raise EngineError(f"cannot evaluate {type(e).__name__}")


def eval_pred_bool(p: Pred, env: Env, subcache: dict | None = None, db=None) -> bool:
    """Exact boolean semantics of the predicate subset."""
    if isinstance(p, TruePred):
        return True
    if isinstance(p, Cmp):
        a = _eval_side(p.lhs, env, subcache, db)
        b = _eval_side(p.rhs, env, subcache, db)
        if isinstance(a, str) or isinstance(b, str):
            if p.op == "=":
                return a == b
            if p.op == "<>":
                return a != b
            raise EngineError("text values only compare with = and <>")
        if p.op == "<":
            return a < b
        if p.op == "<=":
            return a <= b
        if p.op == ">":
            return a > b
        if p.op == ">=":
            return a >= b
        if p.op == "=":
            return a == b
        if p.op == "<>":
            return a != b
    if isinstance(p, LikePred):
        val = _lookup(env, p.col)
        hit = bool(_like_regex(p.pattern).match(str(val)))
        return not hit if p.negated else hit
    if isinstance(p, BoolCol):
        return bool(_lookup(env, p.col))
    if isinstance(p, NotPred):
        return not eval_pred_bool(p.arg, env, subcache, db)
    if isinstance(p, BoolOp):
        vals = [eval_pred_bool(a, env, subcache, db) for a in p.args]
        if p.op == "and":
            return all(vals)
        if p.op == "or":
            return any(vals)
        return sum(vals) % 2 == 1
    raise EngineError(f"cannot evaluate predicate {type(p).__name__}")


# ---------------------------------------------------------------------------
# Join enumeration
# ---------------------------------------------------------------------------


def _table_envs(db: Database, table: str, alias: str) -> list[Env]:
    td = db.table(table)
    out = []
    for i, row in enumerate(td.rows):
        env: Env = {f"{alias}.{c}": v for c, v in row.items()}
        env[f"{alias}.ID"] = td.ids[i]
        env[f"{alias}.__sens__"] = td.sensitive[i]
        out.append(env)
    return out


def _refs_within(p: Pred, alias: str) -> bool:
    refs = list(sf._walk_refs(p))
    return bool(refs) and all(r.table == alias for r in refs)


def public_rows(ctx: AnalysisContext, db: Database) -> list[Env]:
    """Cross product of the queried tables with the public filter applied.

    Single-table conjuncts are pushed down before the product is formed; the
    result is identical to filtering the full cross product.
    """
    conjuncts = sf._flatten_and(ctx.public_pred)
    per_alias: dict[str, list[Pred]] = {}
    residual: list[Pred] = []
    for c in conjuncts:
        owner = None
        for alias in ctx.aliases:
            if _refs_within(c, alias):
                owner = alias
                break
        if owner is None:
            residual.append(c)
        else:
            per_alias.setdefault(owner, []).append(c)

    streams = []
    for table, alias in ctx.query.tables:
        envs = _table_envs(db, table, alias)
        for c in per_alias.get(alias, ()):
            envs = [e for e in envs if eval_pred_bool(c, e)]
        streams.append(envs)

    joined: list[Env] = []
    for combo in iproduct(*streams):
        env: Env = {}
        for part in combo:
            env.update(part)
        if all(eval_pred_bool(c, env) for c in residual):
            joined.append(env)
    return joined


def _full_rows(ctx: AnalysisContext, db: Database) -> list[Env]:
    streams = [
        _table_envs(db, table, alias) for table, alias in ctx.query.tables
    ]
    out = []
    for combo in iproduct(*streams):
        env: Env = {}
        for part in combo:
            env.update(part)
        out.append(env)
    return out


def _check_finite(value: float, what: str) -> float:
    if not math.isfinite(value):
        raise EngineError(f"{what} overflowed to {value}")
    return value


# ---------------------------------------------------------------------------
# Initial query (exact SQL semantics)
# ---------------------------------------------------------------------------


def run_initial(ctx: AnalysisContext, db: Database) -> float:
    """Exact value of the original query: boolean filters, no approximation."""
    q = ctx.query
    rows = [e for e in _full_rows(ctx, db) if eval_pred_bool(q.where, e)]
    agg = q.aggregator.upper()
    if agg == "COUNT":
        return float(len(rows))
    vals = [float(_eval_side(q.select, e)) for e in rows]
    if agg == "SUM":
        return _check_finite(math.fsum(vals), "SUM")
    if agg == "PRODUCT":
        out = 1.0
        for v in vals:
            out *= v
        return _check_finite(out, "PRODUCT")
    if not vals:
        raise EngineError(f"{agg} over an empty row set has no value")
    return _check_finite(min(vals) if agg == "MIN" else max(vals), "aggregate")


# ---------------------------------------------------------------------------
# Modified query and sensitivity
# ---------------------------------------------------------------------------


def _bind_rows(plan: SensitivityPlan, db: Database) -> list[Env]:
    rows = public_rows(plan.ctx, db)
    for key, spec in plan.opaques.items():
        if spec.kind == "indicator":
            for env in rows:
                env[key] = 1.0 if eval_pred_bool(spec.pred, env) else 0.0
    for key, spec in plan.opaques.items():
        if spec.kind == "span":
            vals = [eval_scalar(spec.expr, env) for env in rows]
            span = (max(vals) - min(vals)) if vals else 0.0
            for env in rows:
                env[key] = span
        elif spec.kind == "prodbound":
            acc = 1.0
            for env in rows:
                acc *= max(eval_scalar(spec.expr, env), 1.0)
            for env in rows:
                env[key] = acc
    return rows


def run_modified(plan: SensitivityPlan, db: Database) -> float:
    """Evaluate the continuous rewrite over the public-filtered cross product."""
    rows = _bind_rows(plan, db)
    vals = [eval_scalar(plan.row_expr, env) for env in rows]
    agg = plan.aggregator
    if agg in ("SUM", "COUNT"):
        return _check_finite(math.fsum(vals), agg)
    if agg == "PRODUCT":
        out = 1.0
        for v in vals:
            out *= v
        return _check_finite(out, "PRODUCT")
    if not vals:
        raise EngineError(f"{agg} over an empty row set has no value")
    return _check_finite(min(vals) if agg == "MIN" else max(vals), agg)


@dataclass
class GroupBreakdown:
    alias: str
    table: str
    groups: dict[str, float]
    argmax: str | None
    value: float


def run_sensitivity(plan: SensitivityPlan, db: Database) -> tuple[float, list[GroupBreakdown]]:
    """Max over sensitive-row groups of the per-row smooth sensitivity bound,
    dualized across groups by the declared row combiner and summed across
    sensitive tables.  The breakdown exposes each table's worst group."""
    rows = _bind_rows(plan, db)
    values: list[float] = []
    breakdown: list[GroupBreakdown] = []
    for tp in plan.table_plans:
        groups: dict[str, float] = {}
        for env in rows:
            if not env.get(f"{tp.alias}.__sens__", False):
                continue
            gid = str(env[f"{tp.alias}.ID"])
            val = abs(eval_scalar(tp.combined, env))
            if tp.group_agg == "sum":
                groups[gid] = groups.get(gid, 0.0) + val
            else:
                groups[gid] = max(groups.get(gid, 0.0), val)
        value = _dual_over_groups(groups, tp.rows_p)
        argmax = max(sorted(groups), key=lambda g: groups[g]) if groups else None
        breakdown.append(GroupBreakdown(tp.alias, tp.table, groups, argmax, value))
        values.append(value)
    total = _dual_across_tables(values, plan.ctx.schema.database_p)
    return _check_finite(total, "sensitivity"), breakdown


def _dual_across_tables(values: list[float], database_p: float) -> float:
    if not values:
        return 0.0
    if database_p == INF:
        return math.fsum(values)
    if database_p == 1.0:
        return max(values)
    q = database_p / (database_p - 1.0)
    return math.fsum(v**q for v in values) ** (1.0 / q)


def _dual_over_groups(groups: Mapping[str, float], rows_p: float) -> float:
    vals = [groups[g] for g in sorted(groups)]
    if not vals:
        return 0.0
    if rows_p == 1.0:
        return max(vals)
    if rows_p == INF:
        return math.fsum(vals)
    q = rows_p / (rows_p - 1.0)
    return math.fsum(v**q for v in vals) ** (1.0 / q)


# ---------------------------------------------------------------------------
# Independent interpreter for emitted SQL
# ---------------------------------------------------------------------------

_AGG_FUNCS = ("sum", "count", "min", "max", "avg")


def _emitted_source_rows(es: EmittedSelect, db: Database, subcache: dict) -> list[Env]:
    if es.sub is not None:
        sub_rows = _emitted_result_rows(es.sub, db, subcache)
        alias = es.sub_alias or "sub"
        return [{f"{alias}.{k}": v for k, v in r.items()} | dict(r) for r in sub_rows]
    streams = []
    for table, alias in es.tables:
        if table.endswith("_sensRows"):
            base = table[: -len("_sensRows")]
            td = db.table(base)
            envs = [
                {f"{alias}.ID": td.ids[i], f"{alias}.sensitive": td.sensitive[i]}
                for i in range(len(td.ids))
            ]
        else:
            envs = _table_envs(db, table, alias)
        streams.append(envs)
    out = []
    for combo in iproduct(*streams):
        env: Env = {}
        for part in combo:
            env.update(part)
        out.append(env)
    return out


def _contains_agg(e: SqlExpr) -> bool:
    if isinstance(e, FuncCall):
        if e.name in _AGG_FUNCS:
            return True
        return any(_contains_agg(a) for a in e.args)
    if isinstance(e, BinOp):
        return _contains_agg(e.lhs) or _contains_agg(e.rhs)
    return False


def _eval_agg(e: SqlExpr, rows: list[Env], db: Database, subcache: dict) -> float:
    if isinstance(e, FuncCall) and e.name in _AGG_FUNCS:
        if e.name == "count":
            return float(len(rows))
        vals = [float(_eval_side(e.args[0], env, subcache, db)) for env in rows]
        if e.name == "sum":
            return math.fsum(vals)
        if e.name == "avg":
            return math.fsum(vals) / len(vals) if vals else 0.0
        if not vals:
            raise EngineError(f"{e.name} over an empty group")
        return min(vals) if e.name == "min" else max(vals)
    if isinstance(e, BinOp):
        a = _eval_agg(e.lhs, rows, db, subcache)
        b = _eval_agg(e.rhs, rows, db, subcache)
        return _eval_side(BinOp(e.op, Number(a), Number(b)), {}, subcache, db)
    if isinstance(e, FuncCall):
        args = [Number(_eval_agg(a, rows, db, subcache)) for a in e.args]
        return float(_eval_side(FuncCall(e.name, tuple(args)), {}, subcache, db))
    if _contains_agg(e):
        raise EngineError("aggregate nested in an unsupported position")
    if isinstance(e, (Number, SubQuery)):
        return float(_eval_side(e, {}, subcache, db))
    if rows:
        return float(_eval_side(e, rows[0], subcache, db))
    raise EngineError("non-aggregate select over an empty row set")


def _emitted_result_rows(es: EmittedSelect, db: Database, subcache: dict) -> list[dict[str, float]]:
    rows = _emitted_source_rows(es, db, subcache)
    rows = [r for r in rows if eval_pred_bool(es.where, r, subcache, db)]
    name = es.out_name or "value"
    if es.group_by is None:
        return [{name: _eval_agg(es.select, rows, db, subcache)}]
    grouped: dict[object, list[Env]] = {}
    for r in rows:
        grouped.setdefault(_lookup(r, es.group_by), []).append(r)
    out = []
    for key in sorted(grouped, key=str):
        out.append({name: _eval_agg(es.select, grouped[key], db, subcache)})
    return out


def evaluate_emitted(es: EmittedSelect, db: Database, _subcache: dict | None = None) -> float:
    """Scalar result of an emitted query, interpreted from its parsed text."""
    subcache = _subcache if _subcache is not None else {}
    if es.sub is None and not es.tables:
        return float(_eval_agg(es.select, [], db, subcache))
    rows = _emitted_result_rows(es, db, subcache)
    if len(rows) != 1:
        raise EngineError("top-level query must produce one row")
    return float(next(iter(rows[0].values())))
