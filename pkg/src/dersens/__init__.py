"""Derivative-sensitivity analysis and private release for SQL aggregates.

The pipeline: parse a query plus a schema with per-table row norms and CSV
data, rewrite the query into a continuous form, derive a smooth upper bound
on its derivative sensitivity aligned with the declared norms, evaluate
everything on the local data, and release the result with generalized-Cauchy
noise.
"""

from dersens.analyzer import (
    PlanParams,
    SensitivityPlan,
    build_plan,
    emit_sql,
    lower_aggregation,
    lower_predicate,
)
from dersens.engine import (
    EngineError,
    evaluate_emitted,
    run_initial,
    run_modified,
    run_sensitivity,
)
from dersens.exprs import (
    AnalysisError,
    Beta,
    EvalError,
    ScalarExpr,
    SmoothBound,
    combine_ds,
    ds_expr,
    eval_scalar,
    finite_diff_ds,
    smooth_bound,
)
from dersens.mechanism import (
    GenCauchy,
    InfeasibleParams,
    NoiseParams,
    Release,
    ddp_check,
    derive_b,
    guessing_posterior_bound,
    privatize,
    sample,
)
from dersens.norms import (
    Combine,
    HammerBound,
    NormError,
    NormExpr,
    Scale,
    ScalingWitness,
    Var,
    compare,
    eval_norm,
    hammer_bounds,
    normalize,
    parse_norm,
    print_norm,
    scale_elaborate,
    scale_straightforward,
)
from dersens.sqlfront import (
    Database,
    ParseError,
    QuerySpec,
    Schema,
    SchemaError,
    load_database,
    parse_emitted,
    parse_query,
    parse_schema,
    print_query,
    validate,
)

__version__ = "0.1.0"
