"""Scalar expression IR with derivative-sensitivity and smooth-bound calculus.

Expressions are immutable trees over table columns.  Three views matter:

* exact evaluation (`eval_scalar`) and exact a.e. partial derivatives
  (`partial_expr`), used by the engine and by finite-difference oracles;
* the derivative-sensitivity expression (`ds_expr`): the dual-norm length of
  the gradient with respect to a composite norm;
* smooth upper bounds (`smooth_bound` / `analyze`): expressions dominating
  the function and its sensitivity whose logarithm moves at a bounded rate
  per unit of norm distance, which is what makes the noise magnitude itself
  safe to reveal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Union

from dersens.norms import INF, Combine, NormExpr, Scale, Var

__all__ = [
    "AnalysisError",
    "Beta",
    "Bound",
    "Col",
    "Const",
    "Div",
    "EvalError",
    "Exp",
    "IfGE",
    "IfNonzero",
    "Ln",
    "LpNorm",
    "Max",
    "Min",
    "Opaque",
    "Power",
    "Prod",
    "ScalarExpr",
    "ScaleNorm",
    "Sigmoid",
    "SigmoidDeriv",
    "SmoothBound",
    "Sum",
    "Tauoid",
    "TauoidDeriv",
    "abs_expr",
    "add",
    "analyze",
    "combine_ds",
    "ds_expr",
    "dual_exponent",
    "eval_scalar",
    "expr_vars",
    "finite_diff_ds",
    "mul",
    "partial_expr",
    "smooth_bound",
    "sub",
]


class EvalError(ValueError):
    """Raised for missing bindings or numeric domain errors during evaluation."""


class AnalysisError(ValueError):
    """Raised when an expression leaves the fragment the smooth calculus covers."""


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Col:
    """A sensitive column reference, named 'table.column'."""

    name: str


@dataclass(frozen=True)
class Opaque:
    """A data-dependent value that carries no sensitivity (insensitive columns,
    public filter indicators, cross-row constants).  `sql` is its rendering,
    `key` the binding the engine supplies per row."""

    key: str
    sql: str
    nonneg: bool = False


@dataclass(frozen=True)
class Power:
    child: "ScalarExpr"
    r: float

    def __post_init__(self):
        if not math.isfinite(self.r):
            raise ValueError("power exponent must be finite")


@dataclass(frozen=True)
class Exp:
    """e^(rate * child)."""

    rate: float
    child: "ScalarExpr"


@dataclass(frozen=True)
class Ln:
    """Natural log; only produced by desugaring of division and negative powers."""

    child: "ScalarExpr"


@dataclass(frozen=True)
class Sigmoid:
    """e^(a c) / (e^(a c) + 1): smooth indicator of c > 0 with precision alpha."""

    alpha: float
    child: "ScalarExpr"

    def __post_init__(self):
        if not (self.alpha > 0):
            raise ValueError("sigmoid precision must be positive")


@dataclass(frozen=True)
class SigmoidDeriv:
    """a e^(a c) / (e^(a c) + 1)^2, the derivative of Sigmoid in its child."""

    alpha: float
    child: "ScalarExpr"


@dataclass(frozen=True)
class Tauoid:
    """2 / (e^(-a c) + e^(a c)): smooth indicator of c = 0 with precision alpha."""

    alpha: float
    child: "ScalarExpr"

    def __post_init__(self):
        if not (self.alpha > 0):
            raise ValueError("tauoid precision must be positive")


@dataclass(frozen=True)
class TauoidDeriv:
    """d/dc of Tauoid(alpha, c); signed."""

    alpha: float
    child: "ScalarExpr"


@dataclass(frozen=True)
class Sum:
    children: tuple["ScalarExpr", ...]


@dataclass(frozen=True)
class Prod:
    children: tuple["ScalarExpr", ...]


@dataclass(frozen=True)
class Min:
    children: tuple["ScalarExpr", ...]


@dataclass(frozen=True)
class Max:
    children: tuple["ScalarExpr", ...]


@dataclass(frozen=True)
class LpNorm:
    p: float
    children: tuple["ScalarExpr", ...]

    def __post_init__(self):
        if self.p != INF and not self.p >= 1.0:
            raise ValueError("lp exponent must be >= 1 or inf")


@dataclass(frozen=True)
class ScaleNorm:
    """Marks that the ambient metric of the subtree is scaled by `a`: the value
    is unchanged, sensitivities divide by `a`."""

    a: float
    child: "ScalarExpr"


@dataclass(frozen=True)
class Div:
    """Quotient; user-level division over sensitive data is desugared away,
    internal bounds keep quotients for faithful SQL rendering."""

    num: "ScalarExpr"
    den: "ScalarExpr"


@dataclass(frozen=True)
class IfGE:
    """CASE WHEN test >= threshold THEN if_true ELSE if_false END."""

    test: "ScalarExpr"
    threshold: "ScalarExpr"
    if_true: "ScalarExpr"
    if_false: "ScalarExpr"


@dataclass(frozen=True)
class IfNonzero:
    """guard * factor, short-circuited to 0 when guard = 0 (avoids 0 * huge)."""

    guard: "ScalarExpr"
    factor: "ScalarExpr"


ScalarExpr = Union[
    Const, Col, Opaque, Power, Exp, Ln, Sigmoid, SigmoidDeriv, Tauoid, TauoidDeriv,
    Sum, Prod, Min, Max, LpNorm, ScaleNorm, Div, IfGE, IfNonzero,
]

ZERO = Const(0.0)
ONE = Const(1.0)


def abs_expr(e: ScalarExpr) -> ScalarExpr:
    if isinstance(e, Const):
        return Const(abs(e.value))
    if isinstance(e, LpNorm):
        return e
    return LpNorm(1.0, (e,))


def add(a: ScalarExpr, b: ScalarExpr) -> ScalarExpr:
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value + b.value)
    if isinstance(a, Const) and a.value == 0.0:
        return b
    if isinstance(b, Const) and b.value == 0.0:
        return a
    return Sum((a, b))


def sub(a: ScalarExpr, b: ScalarExpr) -> ScalarExpr:
    if isinstance(b, Const):
        return add(a, Const(-b.value))
    return Sum((a, Prod((Const(-1.0), b))))


def mul(a: ScalarExpr, b: ScalarExpr) -> ScalarExpr:
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value * b.value)
    if isinstance(a, Const):
        if a.value == 1.0:
            return b
        if a.value == 0.0:
            return ZERO
    if isinstance(b, Const):
        if b.value == 1.0:
            return a
        if b.value == 0.0:
            return ZERO
    return Prod((a, b))


def expr_vars(e: ScalarExpr) -> frozenset[str]:
    """Sensitive column names referenced by the expression."""
    if isinstance(e, Col):
        return frozenset((e.name,))
    if isinstance(e, (Const, Opaque)):
        return frozenset()
    out: frozenset[str] = frozenset()
    for c in _subexprs(e):
        out |= expr_vars(c)
    return out


def _subexprs(e: ScalarExpr) -> Iterator[ScalarExpr]:
    if isinstance(e, (Sum, Prod, Min, Max, LpNorm)):
        yield from e.children
    elif isinstance(e, (Power, Exp, Ln, Sigmoid, SigmoidDeriv, Tauoid, TauoidDeriv, ScaleNorm)):
        yield e.child
    elif isinstance(e, Div):
        yield e.num
        yield e.den
    elif isinstance(e, IfGE):
        yield e.test
        yield e.threshold
        yield e.if_true
        yield e.if_false
    elif isinstance(e, IfNonzero):
        yield e.guard
        yield e.factor


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def _sigmoid(a: float, x: float) -> float:
    # branch on the sign so the exponential never overflows
    t = a * x
    if t >= 0.0:
        return 1.0 / (1.0 + math.exp(-t))
    z = math.exp(t)
    return z / (1.0 + z)


def _sigmoid_deriv(a: float, x: float) -> float:
    t = a * x
    z = math.exp(-abs(t))
    return a * z / (1.0 + z) ** 2


def _tauoid(a: float, x: float) -> float:
    t = abs(a * x)
    z = math.exp(-t)
    return 2.0 * z / (1.0 + z * z)


def _tauoid_deriv(a: float, x: float) -> float:
    t = a * x
    z = math.exp(-abs(t))
    mag = 2.0 * a * z * (1.0 - z * z) / (1.0 + z * z) ** 2
    return -mag if t >= 0.0 else mag


def eval_scalar(e: ScalarExpr, row: Mapping[str, float]) -> float:
    """IEEE double evaluation of the expression at one row binding."""
    if isinstance(e, Const):
        return e.value
    if isinstance(e, Col):
        try:
            return float(row[e.name])
        except KeyError:
            raise EvalError(f"no binding for column '{e.name}'") from None
    if isinstance(e, Opaque):
        try:
            return float(row[e.key])
        except KeyError:
            raise EvalError(f"no binding for derived value '{e.key}'") from None
    if isinstance(e, Power):
        base = eval_scalar(e.child, row)
        if base < 0.0 and e.r != round(e.r):
            raise EvalError(f"negative base {base} with non-integer exponent {e.r}")
        try:
            return base**e.r
        except (OverflowError, ZeroDivisionError) as exc:
            raise EvalError(str(exc)) from None
    if isinstance(e, Exp):
        return math.exp(e.rate * eval_scalar(e.child, row))
    if isinstance(e, Ln):
        v = eval_scalar(e.child, row)
        if v <= 0.0:
            raise EvalError(f"ln of non-positive value {v}")
        return math.log(v)
    if isinstance(e, Sigmoid):
        return _sigmoid(e.alpha, eval_scalar(e.child, row))
    if isinstance(e, SigmoidDeriv):
        return _sigmoid_deriv(e.alpha, eval_scalar(e.child, row))
    if isinstance(e, Tauoid):
        return _tauoid(e.alpha, eval_scalar(e.child, row))
    if isinstance(e, TauoidDeriv):
        return _tauoid_deriv(e.alpha, eval_scalar(e.child, row))
    if isinstance(e, Sum):
        return math.fsum(eval_scalar(c, row) for c in e.children)
    if isinstance(e, Prod):
        out = 1.0
        for c in e.children:
            out *= eval_scalar(c, row)
        return out
    if isinstance(e, Min):
        return min(eval_scalar(c, row) for c in e.children)
    if isinstance(e, Max):
        return max(eval_scalar(c, row) for c in e.children)
    if isinstance(e, LpNorm):
        vals = [abs(eval_scalar(c, row)) for c in e.children]
        if e.p == INF:
            return max(vals)
        if e.p == 1.0:
            return math.fsum(vals)
        return math.fsum(v**e.p for v in vals) ** (1.0 / e.p)
    if isinstance(e, ScaleNorm):
        return eval_scalar(e.child, row)
    if isinstance(e, Div):
        num = eval_scalar(e.num, row)
        den = eval_scalar(e.den, row)
        if den == 0.0:
            raise EvalError("division by zero")
        return num / den
    if isinstance(e, IfGE):
        if eval_scalar(e.test, row) >= eval_scalar(e.threshold, row):
            return eval_scalar(e.if_true, row)
        return eval_scalar(e.if_false, row)
    if isinstance(e, IfNonzero):
        g = eval_scalar(e.guard, row)
        if g == 0.0:
            return 0.0
        return g * eval_scalar(e.factor, row)
    raise EvalError(f"cannot evaluate {type(e).__name__}")


# ---------------------------------------------------------------------------
# Exact partial derivatives and the dual-norm gradient
# ---------------------------------------------------------------------------


def partial_expr(e: ScalarExpr, v: str) -> ScalarExpr:
    """Symbolic partial derivative d e / d v, valid away from ties and kinks."""
    if isinstance(e, (Const, Opaque)):
        return ZERO
    if isinstance(e, Col):
        return ONE if e.name == v else ZERO
    if isinstance(e, Power):
        d = partial_expr(e.child, v)
        if d == ZERO:
            return ZERO
        return mul(mul(Const(e.r), Power(e.child, e.r - 1.0)), d)
    if isinstance(e, Exp):
        d = partial_expr(e.child, v)
        if d == ZERO:
            return ZERO
        return mul(mul(Const(e.rate), Exp(e.rate, e.child)), d)
    if isinstance(e, Ln):
        d = partial_expr(e.child, v)
        if d == ZERO:
            return ZERO
        return mul(d, Power(e.child, -1.0))
    if isinstance(e, Sigmoid):
        d = partial_expr(e.child, v)
        if d == ZERO:
            return ZERO
        return mul(SigmoidDeriv(e.alpha, e.child), d)
    if isinstance(e, Tauoid):
        d = partial_expr(e.child, v)
        if d == ZERO:
            return ZERO
        return mul(TauoidDeriv(e.alpha, e.child), d)
    if isinstance(e, SigmoidDeriv):
        # s'' = a s' (1 - 2 sigma)
        d = partial_expr(e.child, v)
        if d == ZERO:
            return ZERO
        inner = sub(ONE, mul(Const(2.0), Sigmoid(e.alpha, e.child)))
        return mul(mul(Const(e.alpha), mul(SigmoidDeriv(e.alpha, e.child), inner)), d)
    if isinstance(e, TauoidDeriv):
        # tau'' = -a tanh(a c) tau' - a^2 tau^3
        d = partial_expr(e.child, v)
        if d == ZERO:
            return ZERO
        a, c = e.alpha, e.child
        tanh = Div(sub(Exp(a, c), Exp(-a, c)), add(Exp(-a, c), Exp(a, c)))
        second = add(
            mul(mul(Const(-a), tanh), TauoidDeriv(a, c)),
            mul(Const(-(a * a)), Power(Tauoid(a, c), 3.0)),
        )
        return mul(second, d)
    if isinstance(e, Sum):
        parts = [partial_expr(c, v) for c in e.children]
        parts = [p for p in parts if p != ZERO]
        if not parts:
            return ZERO
        out = parts[0]
        for p in parts[1:]:
            out = add(out, p)
        return out
    if isinstance(e, Prod):
        terms = []
        for i, c in enumerate(e.children):
            d = partial_expr(c, v)
            if d == ZERO:
                continue
            rest = d
            for j, other in enumerate(e.children):
                if j != i:
                    rest = mul(rest, other)
            terms.append(rest)
        if not terms:
            return ZERO
        out = terms[0]
        for t in terms[1:]:
            out = add(out, t)
        return out
    if isinstance(e, (Min, Max)):
        return _minmax_partial(e, v)
    if isinstance(e, LpNorm):
        return _lpnorm_partial(e, v)
    if isinstance(e, ScaleNorm):
        return partial_expr(e.child, v)
    if isinstance(e, Div):
        dn = partial_expr(e.num, v)
        dd = partial_expr(e.den, v)
        if dn == ZERO and dd == ZERO:
            return ZERO
        # (n' d - n d') / d^2
        return Div(sub(mul(dn, e.den), mul(e.num, dd)), Power(e.den, 2.0))
    if isinstance(e, IfNonzero):
        return partial_expr(mul(e.guard, e.factor), v)
    raise EvalError(f"no derivative rule for {type(e).__name__}")


def _minmax_partial(e: Min | Max, v: str) -> ScalarExpr:
    # fold to binary selections: the active branch's derivative wins
    kids = list(e.children)
    cur, dcur = kids[0], partial_expr(kids[0], v)
    for c in kids[1:]:
        dc = partial_expr(c, v)
        if isinstance(e, Min):
            # min(cur, c): if c >= cur use cur's derivative
            dcur = IfGE(c, cur, dcur, dc)
            cur = Min((cur, c))
        else:
            dcur = IfGE(c, cur, dc, dcur)
            cur = Max((cur, c))
    return dcur


def _lpnorm_partial(e: LpNorm, v: str) -> ScalarExpr:
    if e.p == INF:
        # derivative of the largest |child|, sign included
        kids = list(e.children)
        cur = abs_expr(kids[0])
        dcur = _abs_partial(kids[0], v)
        for c in kids[1:]:
            ac = abs_expr(c)
            dcur = IfGE(ac, cur, _abs_partial(c, v), dcur)
            cur = Max((cur, ac))
        return dcur
    if e.p == 1.0:
        parts = [_abs_partial(c, v) for c in e.children]
        parts = [p for p in parts if p != ZERO]
        if not parts:
            return ZERO
        out = parts[0]
        for p in parts[1:]:
            out = add(out, p)
        return out
    terms = []
    for c in e.children:
        dc = partial_expr(c, v)
        if dc == ZERO:
            continue
        # |c|^(p-1) * sign(c) * c' = |c|^(p-2) * c * c'
        terms.append(mul(mul(Power(abs_expr(c), e.p - 2.0), c), dc))
    if not terms:
        return ZERO
    num = terms[0]
    for t in terms[1:]:
        num = add(num, t)
    return mul(num, Power(e, 1.0 - e.p))


def _abs_partial(c: ScalarExpr, v: str) -> ScalarExpr:
    dc = partial_expr(c, v)
    if dc == ZERO:
        return ZERO
    # sign(c) * c'
    return IfGE(c, ZERO, dc, mul(Const(-1.0), dc))


def dual_exponent(p: float) -> float:
    """q with 1/p + 1/q = 1; 1 and inf are each other's duals."""
    if p == INF:
        return 1.0
    if p == 1.0:
        return INF
    return p / (p - 1.0)


def _fold_max(parts: list[ScalarExpr]) -> ScalarExpr:
    if all(isinstance(p, Const) for p in parts):
        return Const(max(p.value for p in parts))
    return Max(tuple(parts))


def _fold_lp(q: float, parts: list[ScalarExpr]) -> ScalarExpr:
    if all(isinstance(p, Const) for p in parts):
        vals = [abs(p.value) for p in parts]
        if q == INF:
            return Const(max(vals))
        return Const(math.fsum(v**q for v in vals) ** (1.0 / q))
    return LpNorm(q, tuple(parts))


def _dual_combine_exprs(norm: NormExpr, leaf: Callable[[str], ScalarExpr]) -> ScalarExpr:
    if isinstance(norm, Var):
        return leaf(norm.name)
    if isinstance(norm, Scale):
        return mul(_dual_combine_exprs(norm.child, leaf), Const(1.0 / norm.factor))
    parts = [_dual_combine_exprs(c, leaf) for c in norm.children]
    q = dual_exponent(norm.p)
    live = [p for p in parts if p != ZERO]
    if not live:
        return ZERO
    if len(live) == 1:
        return abs_expr(live[0])
    if q == INF:
        return _fold_max([abs_expr(p) for p in live])
    return _fold_lp(q, live)


def _check_norm_for_ds(f: ScalarExpr, norm: NormExpr) -> None:
    occs: dict[str, int] = {}
    stack = [norm]
    while stack:
        n = stack.pop()
        if isinstance(n, Var):
            occs[n.name] = occs.get(n.name, 0) + 1
        elif isinstance(n, Scale):
            stack.append(n.child)
        else:
            stack.extend(n.children)
    dup = [v for v, k in occs.items() if k > 1]
    if dup:
        raise AnalysisError(
            f"norm repeats variables {sorted(dup)}; normalize it before taking gradients"
        )
    missing = expr_vars(f) - set(occs)
    if missing:
        raise AnalysisError(
            "columns not covered by the norm (declare them insensitive upstream): "
            + ", ".join(sorted(missing))
        )


def ds_expr(f: ScalarExpr, norm: NormExpr) -> ScalarExpr:
    """Expression computing the operator norm of the derivative of f: the
    length of the gradient in the dual of the given composite norm."""
    _check_norm_for_ds(f, norm)
    if _is_matching_lpnorm(f, norm):
        return ONE
    return _dual_combine_exprs(norm, lambda v: abs_expr(partial_expr(f, v)))


def _is_matching_lpnorm(f: ScalarExpr, norm: NormExpr) -> bool:
    # ||x_1..x_n||_p measured in the same unscaled lp norm has sensitivity 1
    if not isinstance(f, LpNorm):
        return False
    cols = [c for c in f.children if isinstance(c, Col)]
    if len(cols) != len(f.children) or len({c.name for c in cols}) != len(cols):
        return False
    if isinstance(norm, Var):
        return len(cols) == 1 and cols[0].name == norm.name
    if not isinstance(norm, Combine) or norm.p != f.p:
        return False
    names = {c.name for c in cols}
    nkids = norm.children
    return all(isinstance(k, Var) for k in nkids) and {k.name for k in nkids} == names


def finite_diff_ds(
    f: ScalarExpr, norm: NormExpr, point: Mapping[str, float], h: float = 1e-5
) -> float:
    """Dual-norm length of the central-difference gradient; test oracle only."""
    if not h > 0:
        raise ValueError("step must be positive")
    grads: dict[str, float] = {}
    for v in sorted(expr_vars(f)):
        hi = dict(point)
        lo = dict(point)
        hi[v] = float(point[v]) + h
        lo[v] = float(point[v]) - h
        grads[v] = (eval_scalar(f, hi) - eval_scalar(f, lo)) / (2.0 * h)
    return _dual_value(norm, lambda v: abs(grads.get(v, 0.0)))


def _dual_value(norm: NormExpr, leaf: Callable[[str], float]) -> float:
    if isinstance(norm, Var):
        return leaf(norm.name)
    if isinstance(norm, Scale):
        return _dual_value(norm.child, leaf) / norm.factor
    vals = [_dual_value(c, leaf) for c in norm.children]
    q = dual_exponent(norm.p)
    if q == INF:
        return max(vals)
    if q == 1.0:
        return math.fsum(vals)
    return math.fsum(v**q for v in vals) ** (1.0 / q)


# ---------------------------------------------------------------------------
# Smooth upper bounds
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Beta:
    """Requested smoothness: log of the bound moves at most this fast per
    unit of norm distance."""

    value: float

    def __post_init__(self):
        if not (self.value > 0):
            raise ValueError("smoothness parameter must be positive")


@dataclass
class Bound:
    """Result of analyzing one expression.

    `ubf` dominates |expr|; `ds[v]` dominates the summed magnitude of the
    partial derivatives over all occurrences of v, already divided by v's
    metric scale.  `ubf_rates`/`ds_rates` hold per-raw-coordinate
    log-Lipschitz rates, from which the achieved smoothness is derived.
    """

    ubf: ScalarExpr
    ubf_rates: dict[str, float] = field(default_factory=dict)
    ds: dict[str, ScalarExpr] = field(default_factory=dict)
    ds_rates: dict[str, dict[str, float]] = field(default_factory=dict)
    nonneg: bool = False


@dataclass(frozen=True)
class SmoothBound:
    """ubf/ubds pair with the smoothness the construction actually achieved."""

    ubf: ScalarExpr
    ubds: ScalarExpr
    beta: float
    feasible: bool


@dataclass(frozen=True)
class _Env:
    """Per-variable budgets: targets[v] is the admissible raw log-Lipschitz
    rate for v (requested beta times v's metric scale), seeds[v] the factor
    each occurrence's sensitivity picks up (one over the metric scale).

    `blocks` lists uniformly scaled lp blocks of the declared norm, keyed by
    their variable sets; a multi-column lp atom matching such a block earns a
    joint rate certificate instead of the lossier per-coordinate one."""

    targets: Mapping[str, float]
    seeds: Mapping[str, float]
    blocks: Mapping[frozenset[str], tuple[float, float]] = None  # varset -> (p, scale)

    def __post_init__(self):
        if self.blocks is None:
            object.__setattr__(self, "blocks", {})

    def scaled(self, a: float) -> "_Env":
        return _Env(
            {v: t * a for v, t in self.targets.items()},
            {v: s / a for v, s in self.seeds.items()},
            {k: (p, s * a) for k, (p, s) in self.blocks.items()},
        )


def _rate_max(*dicts: Mapping[str, float]) -> dict[str, float]:
    out: dict[str, float] = {}
    for d in dicts:
        for k, r in d.items():
            out[k] = max(out.get(k, 0.0), r)
    return out


def _rate_sum(*dicts: Mapping[str, float]) -> dict[str, float]:
    out: dict[str, float] = {}
    for d in dicts:
        for k, r in d.items():
            out[k] = out.get(k, 0.0) + r
    return out


def _as_affine(e: ScalarExpr) -> tuple[dict[str, float], bool] | None:
    """Coefficients of sensitive columns if e is affine in them (any opaque or
    constant offset is allowed); None otherwise."""
    if isinstance(e, (Const, Opaque)):
        return {}, True
    if isinstance(e, Col):
        return {e.name: 1.0}, False
    if isinstance(e, Sum):
        total: dict[str, float] = {}
        const_only = True
        for c in e.children:
            got = _as_affine(c)
            if got is None:
                return None
            coeffs, is_const = got
            const_only = const_only and is_const
            total = _rate_sum(total, coeffs)
        return total, const_only
    if isinstance(e, Prod):
        scale = 1.0
        carrier: dict[str, float] | None = None
        for c in e.children:
            got = _as_affine(c)
            if got is None:
                return None
            coeffs, is_const = got
            if is_const:
                if isinstance(c, Const):
                    scale *= c.value
                else:
                    return None  # opaque factor: bounded but not a fixed coefficient
            elif carrier is None:
                carrier = coeffs
            else:
                return None
        if carrier is None:
            return {}, True
        return {v: a * scale for v, a in carrier.items()}, False
    return None


def _affine_coeffs(e: ScalarExpr) -> dict[str, float] | None:
    got = _as_affine(e)
    if got is None:
        return None
    return got[0]


def _budget(coeffs: Mapping[str, float], env: _Env) -> float:
    """Largest per-argument rate B so that B*|c_v| stays within every budget."""
    b = INF
    for v, c in coeffs.items():
        if c == 0.0:
            continue
        try:
            b = min(b, env.targets[v] / abs(c))
        except KeyError:
            raise AnalysisError(
                f"column '{v}' is not covered by the norm; declare it insensitive"
            ) from None
    return b


def _identity_ubf(e: ScalarExpr, b: float) -> ScalarExpr:
    """Smooth envelope of |e|: |e| where it is at least 1/b, exponential cap below."""
    a = abs_expr(e)
    cap = Div(Exp(1.0, sub(mul(Const(b), a), ONE)), Const(b))
    return IfGE(a, Const(1.0 / b), a, cap)


def _power_ubf(e: ScalarExpr, r: float, b: float) -> ScalarExpr:
    a = abs_expr(e)
    if r == 1.0:
        return _identity_ubf(e, b)
    cap = mul(Exp(1.0, sub(mul(Const(b), a), Const(r))), Const((r / b) ** r))
    return IfGE(a, Const(r / b), Power(a, r), cap)


def _power_ds_piece(e: ScalarExpr, r: float, b: float) -> ScalarExpr:
    if r == 1.0:
        return ONE
    a = abs_expr(e)
    main = mul(Const(r), Power(a, r - 1.0))
    cap = mul(Exp(1.0, sub(mul(Const(b), a), Const(r - 1.0))), Const(r * ((r - 1.0) / b) ** (r - 1.0)))
    return IfGE(a, Const((r - 1.0) / b), main, cap)


def _seeded(env: _Env, coeffs: Mapping[str, float]) -> dict[str, ScalarExpr]:
    out = {}
    for v, c in coeffs.items():
        if c != 0.0:
            out[v] = Const(abs(c) * env.seeds.get(v, 1.0))
    return out


def analyze(e: ScalarExpr, env: _Env) -> Bound:
    """Bottom-up smooth analysis; see module docstring for the contract."""
    if isinstance(e, Const):
        return Bound(ubf=Const(abs(e.value)), nonneg=e.value >= 0.0)
    if isinstance(e, Opaque):
        return Bound(ubf=e if e.nonneg else abs_expr(e), nonneg=e.nonneg)

    affine = _as_affine(e)
    if affine is not None and not affine[1]:
        coeffs = {v: c for v, c in affine[0].items() if c != 0.0}
        b = _budget(coeffs, env)
        rates = {v: abs(c) * b for v, c in coeffs.items()}
        seeded = _seeded(env, coeffs)
        ds = dict(seeded)
        return Bound(
            ubf=_identity_ubf(e, b),
            ubf_rates=rates,
            ds=ds,
            ds_rates={v: {} for v in ds},
            nonneg=False,
        )

    if isinstance(e, (Sigmoid, Tauoid)):
        coeffs = _affine_coeffs(e.child)
        if coeffs is None:
            raise AnalysisError(
                f"{type(e).__name__} argument must be affine in sensitive columns"
            )
        rates = {v: e.alpha * abs(c) for v, c in coeffs.items() if c != 0.0}
        seeded = _seeded(env, coeffs)
        if isinstance(e, Sigmoid):
            deriv: ScalarExpr = SigmoidDeriv(e.alpha, e.child)
        else:
            deriv = mul(Const(e.alpha), Tauoid(e.alpha, e.child))
        ds = {v: mul(deriv, s) for v, s in seeded.items()}
        return Bound(
            ubf=e,
            ubf_rates=rates,
            ds=ds,
            ds_rates={v: dict(rates) for v in ds},
            nonneg=True,
        )

    if isinstance(e, Exp):
        coeffs = _affine_coeffs(e.child)
        if coeffs is None:
            raise AnalysisError("Exp argument must be affine in sensitive columns")
        rates = {v: abs(e.rate * c) for v, c in coeffs.items() if c != 0.0}
        seeded = _seeded(env, coeffs)
        ds = {v: mul(mul(Const(abs(e.rate)), e), s) for v, s in seeded.items()}
        return Bound(e, rates, ds, {v: dict(rates) for v in ds}, nonneg=True)

    if isinstance(e, Ln):
        raise AnalysisError(
            "ln over sensitive data needs a logarithmic metric on that column; "
            "rewrite the query or the norm"
        )

    if isinstance(e, Power):
        if e.r == 1.0:
            return analyze(e.child, env)
        if e.r <= 0.0:
            raise AnalysisError("desugar non-positive powers before analysis")
        coeffs = _affine_coeffs(e.child)
        if coeffs is not None:
            if not any(c != 0.0 for c in coeffs.values()):
                return Bound(ubf=e, nonneg=True)  # data-constant base
            if e.r < 1.0:
                # the derivative blows up near zero: no sound sensitivity bound
                raise AnalysisError(
                    f"powers with exponent {e.r} < 1 over sensitive data admit a "
                    "value bound but no sensitivity bound"
                )
            b = _budget(coeffs, env)
            # both branches of the envelope move at rate b per argument unit
            rates_f = {v: abs(c) * b for v, c in coeffs.items() if c != 0.0}
            ubf = _power_ubf(e.child, e.r, b)
            piece = _power_ds_piece(e.child, e.r, b)
            ds = {v: mul(piece, s) for v, s in _seeded(env, coeffs).items()}
            rates_d = {v: abs(c) * b for v, c in coeffs.items() if c != 0.0}
            return Bound(ubf, rates_f, ds, {v: dict(rates_d) for v in ds}, nonneg=True)
        child = analyze(e.child, env)
        ubf = Power(child.ubf, e.r)
        rates_f = {v: e.r * r for v, r in child.ubf_rates.items()}
        if e.r < 1.0:
            if child.ds:
                raise AnalysisError(
                    "sensitivity bounds for powers need exponent >= 1 on composite bases"
                )
            return Bound(ubf, rates_f, {}, {}, nonneg=True)
        ds = {}
        rates_d = {}
        base = mul(Const(e.r), Power(child.ubf, e.r - 1.0)) if e.r != 1.0 else Const(e.r)
        for v, dv in child.ds.items():
            ds[v] = mul(base, dv)
            rates_d[v] = _rate_sum(
                {w: (e.r - 1.0) * r for w, r in child.ubf_rates.items()},
                child.ds_rates[v],
            )
        return Bound(ubf, rates_f, ds, rates_d, nonneg=True)

    if isinstance(e, Sum):
        kids = [analyze(c, env) for c in e.children]
        ubf = kids[0].ubf
        for k in kids[1:]:
            ubf = add(ubf, k.ubf)
        ds: dict[str, ScalarExpr] = {}
        rates_d: dict[str, dict[str, float]] = {}
        for k in kids:
            for v, dv in k.ds.items():
                ds[v] = add(ds[v], dv) if v in ds else dv
                rates_d[v] = _rate_max(rates_d.get(v, {}), k.ds_rates[v])
        return Bound(
            ubf,
            _rate_max(*(k.ubf_rates for k in kids)),
            ds,
            rates_d,
            nonneg=all(k.nonneg for k in kids),
        )

    if isinstance(e, Prod):
        kids = [analyze(c, env) for c in e.children]
        ubf = kids[0].ubf
        for k in kids[1:]:
            ubf = mul(ubf, k.ubf)
        rates_f = _rate_sum(*(k.ubf_rates for k in kids))
        ds: dict[str, ScalarExpr] = {}
        rates_d: dict[str, dict[str, float]] = {}
        for i, k in enumerate(kids):
            cof: ScalarExpr = ONE
            cof_rates: dict[str, float] = {}
            for j, other in enumerate(kids):
                if j != i:
                    cof = mul(cof, other.ubf)
                    cof_rates = _rate_sum(cof_rates, other.ubf_rates)
            for v, dv in k.ds.items():
                term = _guarded_mul(dv, cof)
                ds[v] = add(ds[v], term) if v in ds else term
                rates_d[v] = _rate_max(
                    rates_d.get(v, {}), _rate_sum(k.ds_rates[v], cof_rates)
                )
        return Bound(ubf, rates_f, ds, rates_d, nonneg=all(k.nonneg for k in kids))

    if isinstance(e, (Min, Max)):
        kids = [analyze(c, env) for c in e.children]
        ubf = Max(tuple(k.ubf for k in kids)) if len(kids) > 1 else kids[0].ubf
        ds: dict[str, ScalarExpr] = {}
        rates_d: dict[str, dict[str, float]] = {}
        for v in {v for k in kids for v in k.ds}:
            parts = [k.ds[v] for k in kids if v in k.ds]
            ds[v] = parts[0] if len(parts) == 1 else Max(tuple(parts))
            rates_d[v] = _rate_max(*(k.ds_rates[v] for k in kids if v in k.ds))
        return Bound(
            ubf,
            _rate_max(*(k.ubf_rates for k in kids)),
            ds,
            rates_d,
            nonneg=all(k.nonneg for k in kids),
        )

    if isinstance(e, LpNorm):
        if all(isinstance(c, Col) for c in e.children) and len(
            {c.name for c in e.children}
        ) == len(e.children):
            coeffs = {c.name: 1.0 for c in e.children}
            b = _budget(coeffs, env)
            cap = Div(Exp(1.0, sub(mul(Const(b), e), ONE)), Const(b))
            ubf = IfGE(e, Const(1.0 / b), e, cap)
            ds = _seeded(env, coeffs)
            key = frozenset(coeffs)
            if key in env.blocks and env.blocks[key][0] == e.p:
                # the envelope is b-smooth in the block's own lp metric
                rates: dict = {key: b}
            else:
                rates = {v: b for v in coeffs}
            return Bound(
                ubf,
                rates,
                ds,
                {v: {} for v in ds},
                nonneg=True,
            )
        kids = [analyze(c, env) for c in e.children]
        ubf = LpNorm(e.p, tuple(k.ubf for k in kids))
        ds: dict[str, ScalarExpr] = {}
        rates_d: dict[str, dict[str, float]] = {}
        for k in kids:
            for v, dv in k.ds.items():
                ds[v] = add(ds[v], dv) if v in ds else dv
                rates_d[v] = _rate_max(rates_d.get(v, {}), k.ds_rates[v])
        return Bound(ubf, _rate_max(*(k.ubf_rates for k in kids)), ds, rates_d, nonneg=True)

    if isinstance(e, ScaleNorm):
        return analyze(e.child, env.scaled(e.a))

    if isinstance(e, Div):
        den_vars = expr_vars(e.den)
        if den_vars:
            raise AnalysisError(
                "division by sensitive data needs the Table-2 style rewrite to "
                "exp/ln and a logarithmic metric; denominator uses "
                + ", ".join(sorted(den_vars))
            )
        num = analyze(e.num, env)
        ubf = Div(num.ubf, abs_expr(e.den))
        ds = {v: Div(dv, abs_expr(e.den)) for v, dv in num.ds.items()}
        return Bound(ubf, num.ubf_rates, ds, dict(num.ds_rates), nonneg=False)

    raise AnalysisError(f"no smooth-bound rule for {type(e).__name__}")


def _guarded_mul(d: ScalarExpr, cof: ScalarExpr) -> ScalarExpr:
    if isinstance(cof, Const):
        return mul(d, cof)
    if isinstance(d, Const):
        return mul(d, cof)
    return IfNonzero(d, cof)


def _leaf_scales(norm: NormExpr) -> dict[str, float]:
    out: dict[str, float] = {}

    def walk(n: NormExpr, acc: float) -> None:
        if isinstance(n, Var):
            # repeated variables: the strictest (largest) scale governs budgets
            out[n.name] = max(out.get(n.name, 0.0), acc)
        elif isinstance(n, Scale):
            walk(n.child, acc * n.factor)
        else:
            for c in n.children:
                walk(c, acc)

    walk(norm, 1.0)
    return out


def _norm_blocks(norm: NormExpr) -> dict[frozenset[str], tuple[float, float]]:
    """Uniformly scaled flat lp blocks of a normalized norm, by variable set."""
    from dersens.norms import normalize as _normalize

    out: dict[frozenset[str], tuple[float, float]] = {}

    def walk(n: NormExpr) -> None:
        if isinstance(n, Scale):
            walk(n.child)
            return
        if not isinstance(n, Combine):
            return
        leaves: list[tuple[str, float]] = []
        flat = True
        for c in n.children:
            if isinstance(c, Var):
                leaves.append((c.name, 1.0))
            elif isinstance(c, Scale) and isinstance(c.child, Var):
                leaves.append((c.child.name, c.factor))
            else:
                flat = False
            walk(c)
        if flat and leaves:
            names = [v for v, _ in leaves]
            scales = {s for _, s in leaves}
            if len(set(names)) == len(names) and len(scales) == 1:
                out[frozenset(names)] = (n.p, scales.pop())

    walk(_normalize(norm))
    return out


def env_for_norm(norm: NormExpr, beta: float) -> _Env:
    scales = _leaf_scales(norm)
    return _Env(
        targets={v: beta * s for v, s in scales.items()},
        seeds={v: 1.0 / s for v, s in scales.items()},
        blocks=_norm_blocks(norm),
    )


def _dual_rate(norm: NormExpr, rates: Mapping) -> float:
    """Smallest beta such that the rate functional (per-coordinate terms plus
    joint block terms) is at most beta * ||dx||_norm for every displacement."""
    from dersens.norms import normalize as _normalize

    def walk(n: NormExpr) -> float:
        if isinstance(n, Var):
            return float(rates.get(n.name, 0.0))
        if isinstance(n, Scale):
            return walk(n.child) / n.factor
        vals = [walk(c) for c in n.children]
        q = dual_exponent(n.p)
        if q == INF:
            base = max(vals)
        elif q == 1.0:
            base = math.fsum(vals)
        else:
            base = math.fsum(v**q for v in vals) ** (1.0 / q)
        leaves: list[tuple[str, float]] = []
        for c in n.children:
            if isinstance(c, Var):
                leaves.append((c.name, 1.0))
            elif isinstance(c, Scale) and isinstance(c.child, Var):
                leaves.append((c.child.name, c.factor))
        if len(leaves) == len(n.children):
            key = frozenset(v for v, _ in leaves)
            scales = {s for _, s in leaves}
            if key in rates and len(scales) == 1:
                base += rates[key] / scales.pop()
        return base

    return walk(_normalize(norm))


def bound_rates(b: Bound) -> dict[str, float]:
    out = dict(b.ubf_rates)
    for v in b.ds:
        out = _rate_max(out, b.ds_rates[v])
    return out


def smooth_bound(f: ScalarExpr, beta: Beta | float, norm: NormExpr) -> SmoothBound:
    """Smooth upper bounds on |f| and on its derivative sensitivity w.r.t. the
    given norm.  When the structure cannot reach the requested smoothness
    (the reported beta exceeds the request), feasible is False and the
    reported beta is the minimum this construction can achieve; raising
    epsilon accordingly restores the privacy guarantee.
    """
    req = beta.value if isinstance(beta, Beta) else float(beta)
    if not req > 0:
        raise ValueError("beta must be positive")
    env = env_for_norm(norm, req)
    b = analyze(f, env)
    ubds = _dual_combine_seeded(norm, b.ds)
    if _is_matching_lpnorm(f, norm):
        ubds = ONE
    achieved_f = _dual_rate(norm, b.ubf_rates)
    achieved_d = _dual_rate(norm, bound_rates(b))
    achieved = max(achieved_f, achieved_d)
    return SmoothBound(
        ubf=b.ubf,
        ubds=ubds,
        beta=achieved if achieved > 0 else req,
        feasible=achieved <= req * (1.0 + 1e-9),
    )


def _dual_combine_seeded(norm: NormExpr, ds: Mapping[str, ScalarExpr]) -> ScalarExpr:
    """Dual combination for per-variable bounds that already absorbed the
    norm's leaf scales: Scale nodes are skipped to avoid dividing twice."""

    def walk(n: NormExpr) -> ScalarExpr:
        if isinstance(n, Var):
            return ds.get(n.name, ZERO)
        if isinstance(n, Scale):
            return walk(n.child)
        parts = [walk(c) for c in n.children]
        live = [p for p in parts if p != ZERO]
        if not live:
            return ZERO
        if len(live) == 1:
            return live[0]
        q = dual_exponent(n.p)
        if q == INF:
            return _fold_max([abs_expr(p) for p in live])
        if q == 1.0:
            out = live[0]
            for p in live[1:]:
                out = add(out, p)
            return out
        return _fold_lp(q, live)

    return walk(norm)


def combine_ds(parts: list[tuple[ScalarExpr, frozenset[str]]], p: float) -> ScalarExpr:
    """Combine per-block sensitivity expressions across an lp block structure:
    the result is the l_{p/(p-1)} length of the block vector (max for p=1,
    sum for p=inf).  Blocks must use disjoint variable sets."""
    seen: set[str] = set()
    for _, vs in parts:
        if seen & vs:
            raise AnalysisError(
                "blocks share variables; use the dependent-variable product/sum rules"
            )
        seen |= vs
    exprs = [e for e, _ in parts]
    if len(exprs) == 1:
        return exprs[0]
    q = dual_exponent(p)
    if q == INF:
        return _fold_max([abs_expr(e) for e in exprs])
    if q == 1.0:
        out = exprs[0]
        for t in exprs[1:]:
            out = add(out, t)
        return out
    return _fold_lp(q, exprs)
