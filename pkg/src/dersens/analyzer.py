"""Query rewriting: continuous lowering of filters, norm alignment, and
per-sensitive-row sensitivity plans.

A validated query becomes (a) a modified query whose filters over sensitive
data are replaced by sigmoids/tauoids (or exact clamps on integer data) and
(b) one sensitivity query per sensitive table: the per-row smooth bound on
the derivative of the modified query, summed within the rows affected by
each sensitive source row, maximized over rows (for the usual l1 row
combiner), and summed across sensitive tables.

Smoothness accounting treats neighboring databases as differing in the rows
of one table, which is exact for l1-combined rows (the combiner used
throughout the test fixtures) and for the unit changes differential privacy
quantifies over.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from dersens import exprs as ex
from dersens.exprs import (
    AnalysisError,
    Col,
    Const,
    Div,
    Exp,
    IfGE,
    IfNonzero,
    Ln,
    LpNorm,
    Max,
    Min,
    Opaque,
    Power,
    Prod,
    ScalarExpr,
    ScaleNorm,
    Sigmoid,
    SigmoidDeriv,
    Sum,
    Tauoid,
    TauoidDeriv,
    abs_expr,
    add,
    mul,
    sub,
)
from dersens.norms import (
    INF,
    Combine,
    NormExpr,
    Scale,
    ScalingWitness,
    Var,
    normalize,
    scale_elaborate,
)
from dersens import sqlfront as sf
from dersens.sqlfront import (
    AnalysisContext,
    BinOp,
    BoolCol,
    BoolOp,
    Cmp,
    ColRef,
    FuncCall,
    LikePred,
    NotPred,
    Number,
    Pred,
    SchemaError,
    SqlExpr,
    StrLit,
    TruePred,
)

__all__ = [
    "OpaqueSpec",
    "PlanParams",
    "SensitivityPlan",
    "TableSensPlan",
    "align_norms",
    "build_plan",
    "emit_sql",
    "lower_aggregation",
    "lower_predicate",
    "render",
]

DELTA_KEY = "__span__"
PRODBOUND_KEY = "__prodbound__"


@dataclass(frozen=True)
class PlanParams:
    """Analysis knobs: requested smoothness, filter precision, exact integer
    comparisons, and whether plain OR may be lowered as XOR."""

    beta: float = 0.1
    alpha: float = 5.0
    precise_ints: bool = False
    or_as_xor: bool = False


@dataclass
class OpaqueSpec:
    kind: str  # indicator | span | prodbound
    pred: Pred | None = None
    expr: ScalarExpr | None = None


@dataclass
class TableSensPlan:
    alias: str
    table: str
    combined: ScalarExpr  # per joined row, for this table's groups
    group_agg: str  # 'sum' or 'max' within a sensitive-row group
    rows_p: float  # declared row combiner; dual applied across groups
    witness: ScalingWitness


@dataclass
class SensitivityPlan:
    ctx: AnalysisContext
    aggregator: str
    row_expr: ScalarExpr  # modified per-row value, pre-aggregation
    sigma: ScalarExpr | None
    table_plans: list[TableSensPlan]
    opaques: dict[str, OpaqueSpec]
    params: PlanParams
    beta_achieved: float
    feasible: bool
    warnings: list[str] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Surface expression -> ScalarExpr
# ---------------------------------------------------------------------------


class _Lowerer:
    def __init__(self, ctx: AnalysisContext, params: PlanParams):
        self.ctx = ctx
        self.params = params
        self.opaques: dict[str, OpaqueSpec] = {}
        self._n_ind = 0

    def _resolve(self, ref: ColRef) -> sf.ResolvedRef:
        return sf._resolve_colref(ref, self.ctx.aliases, self.ctx.schema)

    def scalar(self, e: SqlExpr) -> ScalarExpr:
        if isinstance(e, Number):
            return Const(e.value)
        if isinstance(e, StrLit):
            raise SchemaError("string literal in numeric context")
        if isinstance(e, ColRef):
            r = self._resolve(e)
            if r.type == "text":
                raise SchemaError(f"text column '{r.name}' in numeric context")
            if r.sensitive:
                return Col(r.name)
            return Opaque(key=r.name, sql=r.name)
        if isinstance(e, BinOp):
            lhs = self.scalar(e.lhs)
            if e.op == "^":
                if not isinstance(e.rhs, Number):
                    raise SchemaError("exponent must be a numeric literal")
                return Power(lhs, e.rhs.value)
            rhs = self.scalar(e.rhs)
            if e.op == "+":
                return add(lhs, rhs)
            if e.op == "-":
                return sub(lhs, rhs)
            if e.op == "*":
                return mul(lhs, rhs)
            if e.op == "/":
                if ex.expr_vars(rhs):
                    raise AnalysisError(
                        "division by sensitive data is outside the smooth fragment; "
                        "declare a logarithmic metric for the denominator instead"
                    )
                return Div(lhs, rhs)
        if isinstance(e, FuncCall):
            if e.name == "abs" and len(e.args) == 1:
                return abs_expr(self.scalar(e.args[0]))
            if e.name == "exp" and len(e.args) == 1:
                return Exp(1.0, self.scalar(e.args[0]))
            if e.name == "ln" and len(e.args) == 1:
                return Ln(self.scalar(e.args[0]))
            if e.name == "sqrt" and len(e.args) == 1:
                return Power(self.scalar(e.args[0]), 0.5)
            if e.name == "least" and e.args:
                return Min(tuple(self.scalar(a) for a in e.args))
            if e.name == "greatest" and e.args:
                return Max(tuple(self.scalar(a) for a in e.args))
            raise SchemaError(f"unsupported function '{e.name}'")
        raise SchemaError(f"unsupported expression {type(e).__name__}")

    # -- predicate lowering --------------------------------------------------

    def indicator(self, p: Pred) -> ScalarExpr:
        key = f"__pub{self._n_ind}__"
        self._n_ind += 1
        self.opaques[key] = OpaqueSpec("indicator", pred=p)
        sql = f"case when {sf.print_pred(p)} then 1.0 else 0.0 end"
        return Opaque(key=key, sql=sql, nonneg=True)

    def lower_pred(self, p: Pred) -> ScalarExpr:
        if isinstance(p, TruePred):
            return ex.ONE
        if isinstance(p, (LikePred, BoolCol)):
            return self.indicator(p)
        if isinstance(p, Cmp):
            if not sf._atom_sensitive(p, self.ctx.aliases, self.ctx.schema):
                return self.indicator(p)
            return self._lower_cmp(p)
        if isinstance(p, NotPred):
            return sub(ex.ONE, self.lower_pred(p.arg))
        if isinstance(p, BoolOp):
            parts = [self.lower_pred(a) for a in p.args]
            if p.op == "and":
                out = parts[0]
                for x in parts[1:]:
                    out = mul(out, x)
                return out
            if p.op == "xor" or (p.op == "or" and (p.exclusive or self.params.or_as_xor)):
                out = parts[0]
                for x in parts[1:]:
                    out = add(out, x)
                return out
            out = parts[0]
            for x in parts[1:]:
                out = sub(add(out, x), mul(out, x))
            return out
        raise SchemaError(f"cannot lower predicate {type(p).__name__}")

    def _atom_grid(self, p: Cmp) -> float | None:
        """Grid density of the compared difference when the exact clamped
        lowering applies: 1 for integers, the declared k for gridded reals."""
        if not self.params.precise_ints:
            return None
        k1 = sf.expr_precision(p.lhs, self.ctx.aliases, self.ctx.schema)
        k2 = sf.expr_precision(p.rhs, self.ctx.aliases, self.ctx.schema)
        if k1 is None or k2 is None:
            return None
        big, small = max(k1, k2), min(k1, k2)
        k = big if (big / small).is_integer() else k1 * k2
        return k if k <= sf._PRECISION_CAP else None

    def _lower_cmp(self, p: Cmp) -> ScalarExpr:
        alpha = self.params.alpha
        grid = self._atom_grid(p)
        lhs, rhs = self.scalar(p.lhs), self.scalar(p.rhs)
        if p.op in ("<", "<="):
            a, b = lhs, rhs
        elif p.op in (">", ">="):
            a, b = rhs, lhs
        else:
            diff = sub(lhs, rhs)
            if grid is not None:
                eq = sub(ex.ONE, _clamp01(mul(Const(grid), abs_expr(diff))))
            else:
                eq = Tauoid(alpha, diff)
            return eq if p.op == "=" else sub(ex.ONE, eq)
        margin = sub(b, a)  # want a <(=) b, i.e. margin >(=) 0
        if grid is not None:
            margin = mul(Const(grid), margin)
            if p.op in ("<=", ">="):
                margin = add(margin, ex.ONE)
            return _clamp01(margin)
        return Sigmoid(alpha, margin)


def _clamp01(e: ScalarExpr) -> ScalarExpr:
    return Min((ex.ONE, Max((ex.ZERO, e))))


def lower_predicate(
    pred: Pred, ctx: AnalysisContext, alpha: float, precise_ints: bool = False,
    or_as_xor: bool = False,
) -> ScalarExpr:
    """Continuous [0,1] lowering of a predicate tree (module-level wrapper)."""
    low = _Lowerer(ctx, PlanParams(alpha=alpha, precise_ints=precise_ints, or_as_xor=or_as_xor))
    return low.lower_pred(pred)


# ---------------------------------------------------------------------------
# Aggregation lowering
# ---------------------------------------------------------------------------


def lower_aggregation(
    aggregator: str, f: ScalarExpr | None, sigma: ScalarExpr | None,
    span: ScalarExpr | None = None,
) -> ScalarExpr:
    """Per-row expression whose aggregation reproduces the filtered query:
    dropped rows contribute the aggregator's neutral element.  MIN/MAX shift
    dropped rows out of range by the span of all values (wrong by design
    when nothing passes the filter; an N/A answer would itself leak)."""
    agg = aggregator.upper()
    if agg == "COUNT":
        return sigma if sigma is not None else ex.ONE
    if f is None:
        raise SchemaError(f"{agg} needs a select expression")
    if sigma is None:
        return f
    if agg == "SUM":
        return mul(f, sigma)
    if agg == "PRODUCT":
        return add(mul(sigma, f), sub(ex.ONE, sigma))
    if agg in ("MIN", "MAX"):
        if span is None:
            raise SchemaError("MIN/MAX lowering needs the value span")
        shift = mul(sub(ex.ONE, sigma), span)
        return add(f, shift) if agg == "MIN" else sub(f, shift)
    raise SchemaError(f"unknown aggregator '{aggregator}'")


# ---------------------------------------------------------------------------
# Norm alignment
# ---------------------------------------------------------------------------


def _qualify_norm(n: NormExpr, alias: str) -> NormExpr:
    if isinstance(n, Var):
        return Var(f"{alias}.{n.name}")
    if isinstance(n, Scale):
        return Scale(n.factor, _qualify_norm(n.child, alias))
    return Combine(n.p, tuple(_qualify_norm(c, alias) for c in n.children))


def _count_occurrences(e: ScalarExpr, counts: dict[str, int]) -> None:
    if isinstance(e, Col):
        counts[e.name] = counts.get(e.name, 0) + 1
        return
    for c in ex._subexprs(e):
        _count_occurrences(c, counts)


def align_norms(
    row_expr: ScalarExpr, alias: str, db_norm: NormExpr
) -> tuple[ScalingWitness, NormExpr]:
    """Fit the query's occurrence norm for one table under its declared norm.

    The query norm takes one l1 slot per occurrence of each sensitive column
    in the row expression (the most conservative combination, so the fit is
    always sound); the scaling witness then carries the per-variable factors
    the sensitivity expressions divide by.  Scaling is applied even when the
    unscaled query norm is already dominated, because any slack directly
    shrinks the noise.
    """
    counts: dict[str, int] = {}
    _count_occurrences(row_expr, counts)
    prefix = alias + "."
    mine = {v: k for v, k in counts.items() if v.startswith(prefix)}
    if not mine:
        return ScalingWitness(var_scale={}, global_scale=1.0), normalize(db_norm)
    slots: list[NormExpr] = []
    for v in sorted(mine):
        slots.extend([Var(v)] * mine[v])
    nq = slots[0] if len(slots) == 1 else Combine(1.0, tuple(slots))
    ndb = normalize(db_norm)
    return scale_elaborate(nq, ndb), ndb


# ---------------------------------------------------------------------------
# Plan construction
# ---------------------------------------------------------------------------


def build_plan(ctx: AnalysisContext, params=None) -> SensitivityPlan:
    """Build the modified-query expression and the per-table sensitivity plans.

    `params` may be a PlanParams, a NoiseParams (only its beta matters here),
    or None for the defaults.
    """
    if params is None:
        params = PlanParams()
    elif not isinstance(params, PlanParams):
        params = PlanParams(beta=params.beta)
    low = _Lowerer(ctx, params)
    q = ctx.query
    agg = q.aggregator.upper()

    sigma = None
    if not isinstance(ctx.residual_pred, TruePred):
        sigma = low.lower_pred(ctx.residual_pred)
    f = low.scalar(q.select) if q.select is not None else None

    span = None
    if agg in ("MIN", "MAX") and sigma is not None:
        if f is None:
            raise SchemaError(f"{agg} needs a select expression")
        span = Opaque(key=DELTA_KEY, sql=_span_sql(ctx, f), nonneg=True)
        low.opaques[DELTA_KEY] = OpaqueSpec("span", expr=f)
    row_expr = lower_aggregation(agg, f, sigma, span)

    # one witness per sensitive table, one smooth analysis for the whole row
    witnesses: dict[str, tuple[ScalingWitness, NormExpr]] = {}
    targets: dict[str, float] = {}
    seeds: dict[str, float] = {}
    for alias in ctx.sensitive_aliases:
        table = ctx.aliases[alias]
        norm = _qualify_norm(ctx.schema.table(table).norm, alias)
        witness, ndb = align_norms(row_expr, alias, norm)
        witnesses[alias] = (witness, ndb)
        for v in witness.var_scale:
            s = witness.effective(v)
            targets[v] = params.beta * s
            seeds[v] = 1.0 / s

    leftover = ex.expr_vars(row_expr) - set(targets)
    if leftover:
        raise SchemaError(
            "sensitive columns without a norm declaration: " + ", ".join(sorted(leftover))
        )

    bound = ex.analyze(row_expr, ex._Env(targets=targets, seeds=seeds))

    warnings: list[str] = []
    table_plans: list[TableSensPlan] = []
    rate_total: dict[str, float] = {}
    for alias in ctx.sensitive_aliases:
        witness, _ = witnesses[alias]
        table = ctx.aliases[alias]
        ts = ctx.schema.table(table)
        terms = [bound.ds[v] for v in sorted(witness.var_scale) if v in bound.ds]
        for v in witness.var_scale:
            if v in bound.ds_rates:
                for w, r in bound.ds_rates[v].items():
                    rate_total[w] = max(rate_total.get(w, 0.0), r)
        if not terms:
            combined: ScalarExpr = ex.ZERO
            warnings.append(f"table '{table}' is sensitive but the query does not touch it")
        elif len(terms) == 1:
            combined = terms[0]
        else:
            combined = Max(tuple(abs_expr(t) for t in terms))
        if agg == "PRODUCT" and terms:
            pb = Opaque(key=PRODBOUND_KEY, sql=_prodbound_sql(ctx, bound.ubf), nonneg=True)
            low.opaques[PRODBOUND_KEY] = OpaqueSpec("prodbound", expr=bound.ubf)
            combined = mul(abs_expr(combined), pb)
        group_agg = "max" if agg in ("MIN", "MAX") else "sum"
        table_plans.append(
            TableSensPlan(alias, table, combined, group_agg, ts.rows_p, witness)
        )

    achieved = 0.0
    for v, s in ((v, 1.0 / seeds[v]) for v in seeds):
        achieved = max(achieved, rate_total.get(v, 0.0) / s)
    feasible = achieved <= params.beta * (1.0 + 1e-9)
    if not table_plans:
        warnings.append("no sensitive tables in this query; sensitivity is 0")

    return SensitivityPlan(
        ctx=ctx,
        aggregator=agg,
        row_expr=row_expr,
        sigma=sigma,
        table_plans=table_plans,
        opaques=low.opaques,
        params=params,
        beta_achieved=achieved,
        feasible=feasible,
        warnings=warnings,
    )


# ---------------------------------------------------------------------------
# SQL rendering
# ---------------------------------------------------------------------------


def _fmt(v: float) -> str:
    if v == int(v) and abs(v) < 1e15:
        body = f"{v:.1f}"
    else:
        body = repr(v)
    return f"({body})" if v < 0 else body


def render(e: ScalarExpr) -> str:
    """PostgreSQL-compatible rendering (exp, abs, greatest, ^, case-when)."""
    if isinstance(e, Const):
        return _fmt(e.value)
    if isinstance(e, Col):
        return e.name
    if isinstance(e, Opaque):
        return e.sql
    if isinstance(e, Sum):
        out = render(e.children[0])
        for c in e.children[1:]:
            if isinstance(c, Const) and c.value < 0:
                out = f"({out} - {_fmt(-c.value)})"
            else:
                out = f"({out} + {render(c)})"
        return out
    if isinstance(e, Prod):
        out = render(e.children[0])
        for c in e.children[1:]:
            out = f"({out} * {render(c)})"
        return out
    if isinstance(e, Div):
        return f"({render(e.num)} / {render(e.den)})"
    if isinstance(e, Power):
        return f"({render(e.child)} ^ {_fmt(e.r)})"
    if isinstance(e, Exp):
        return f"exp({render(mul(Const(e.rate), e.child))})"
    if isinstance(e, Ln):
        return f"ln({render(e.child)})"
    if isinstance(e, Sigmoid):
        u = render(mul(Const(e.alpha), e.child))
        return f"(exp({u}) / (exp({u}) + 1.0))"
    if isinstance(e, SigmoidDeriv):
        u = render(mul(Const(e.alpha), e.child))
        return f"(({_fmt(e.alpha)} * exp({u})) / ((exp({u}) + 1.0) ^ 2.0))"
    if isinstance(e, Tauoid):
        u = render(mul(Const(e.alpha), e.child))
        un = render(mul(Const(-e.alpha), e.child))
        return f"(2.0 / (exp({un}) + exp({u})))"
    if isinstance(e, TauoidDeriv):
        u = render(mul(Const(e.alpha), e.child))
        un = render(mul(Const(-e.alpha), e.child))
        return f"(({_fmt(2.0 * e.alpha)} * (exp({un}) - exp({u}))) / ((exp({un}) + exp({u})) ^ 2.0))"
    if isinstance(e, Min):
        return "least(" + ", ".join(render(c) for c in e.children) + ")"
    if isinstance(e, Max):
        return "greatest(" + ", ".join(render(c) for c in e.children) + ")"
    if isinstance(e, LpNorm):
        if len(e.children) == 1:
            inner = f"abs({render(e.children[0])})"
            return inner if e.p != INF else inner
        if e.p == INF:
            return "greatest(" + ", ".join(f"abs({render(c)})" for c in e.children) + ")"
        if e.p == 1.0:
            out = f"abs({render(e.children[0])})"
            for c in e.children[1:]:
                out = f"({out} + abs({render(c)}))"
            return out
        terms = [f"(abs({render(c)}) ^ {_fmt(e.p)})" for c in e.children]
        out = terms[0]
        for t in terms[1:]:
            out = f"({out} + {t})"
        return f"({out} ^ {_fmt(1.0 / e.p)})"
    if isinstance(e, ScaleNorm):
        return render(e.child)
    if isinstance(e, IfGE):
        return (
            f"case when ({render(e.test)} >= {render(e.threshold)}) "
            f"then {render(e.if_true)} else {render(e.if_false)} end"
        )
    if isinstance(e, IfNonzero):
        g = render(e.guard)
        return f"case when ({g} = 0.0) then 0.0 else ({g} * {render(e.factor)}) end"
    raise TypeError(f"cannot render {type(e).__name__}")


def _from_clause(ctx: AnalysisContext) -> str:
    return ", ".join(
        t if t == a else f"{t} AS {a}" for t, a in ctx.query.tables
    )


def _public_conjuncts(ctx: AnalysisContext) -> list[str]:
    return [sf.print_pred(c) for c in sf._flatten_and(ctx.public_pred)]


def _span_sql(ctx: AnalysisContext, f: ScalarExpr) -> str:
    body = render(f)
    where = " AND ".join(_public_conjuncts(ctx))
    tail = f" WHERE {where}" if where else ""
    return f"(SELECT max({body}) - min({body}) FROM {_from_clause(ctx)}{tail})"


def _prodbound_sql(ctx: AnalysisContext, ubf: ScalarExpr) -> str:
    body = render(Max((ubf, ex.ONE)))
    where = " AND ".join(_public_conjuncts(ctx))
    tail = f" WHERE {where}" if where else ""
    return f"(SELECT exp(sum(ln({body}))) FROM {_from_clause(ctx)}{tail})"


def emit_sql(plan: SensitivityPlan) -> tuple[str, str]:
    """Render the modified query and the sensitivity query as SQL text."""
    ctx = plan.ctx
    froms = _from_clause(ctx)
    pubs = _public_conjuncts(ctx)
    where = f" WHERE {' AND '.join(pubs)}" if pubs else ""

    agg = plan.aggregator
    body = render(plan.row_expr)
    if agg == "COUNT" and plan.sigma is None:
        modified = f"SELECT count(*) FROM {froms}{where};"
    elif agg == "COUNT":
        modified = f"SELECT sum({body}) FROM {froms}{where};"
    elif agg == "SUM":
        modified = f"SELECT sum({body}) FROM {froms}{where};"
    elif agg == "PRODUCT":
        modified = f"SELECT exp(sum(ln({body}))) FROM {froms}{where};"
    else:
        modified = f"SELECT {agg.lower()}({body}) FROM {froms}{where};"

    live = [tp for tp in plan.table_plans if tp.combined != ex.ZERO]
    if not live and plan.table_plans:
        # keep the group structure with a constant zero per row
        live = plan.table_plans[:1]
    parts = [_emit_table_sensitivity(plan, tp) for tp in live]
    db_p = ctx.schema.database_p
    if not parts:
        sensitivity = "SELECT 0.0;"
    elif len(parts) == 1:
        sensitivity = parts[0] + ";"
    elif db_p == INF:
        sensitivity = "SELECT " + " + ".join(f"({p})" for p in parts) + ";"
    elif db_p == 1.0:
        sensitivity = "SELECT greatest(" + ", ".join(f"({p})" for p in parts) + ");"
    else:
        raise NotImplementedError(
            "SQL emission supports database combiners lp 1 and linf; "
            f"got lp {db_p} (the in-process engine evaluates any p)"
        )
    return modified, sensitivity


def _emit_table_sensitivity(plan: SensitivityPlan, tp: TableSensPlan) -> str:
    ctx = plan.ctx
    sens_table = f"{tp.table}_sensRows"
    froms = _from_clause(ctx) + f", {sens_table}"
    join = f"{sens_table}.ID = {tp.alias}.ID"
    pubs = _public_conjuncts(ctx)
    inner_cond = " AND ".join(pubs + [join])
    where = f"({inner_cond}) AND {sens_table}.sensitive"
    inner = (
        f"SELECT {tp.group_agg}(abs({render(tp.combined)})) AS sdsg "
        f"FROM {froms} WHERE {where} GROUP BY {sens_table}.ID"
    )
    if tp.rows_p == 1.0:
        outer_agg = "max(sdsg)"
    elif tp.rows_p == INF:
        outer_agg = "sum(sdsg)"
    else:
        raise NotImplementedError(
            "SQL emission supports row combiners lp 1 and linf; "
            f"got lp {tp.rows_p} (the in-process engine evaluates any p)"
        )
    return f"SELECT {outer_agg} FROM ({inner}) AS sub"
