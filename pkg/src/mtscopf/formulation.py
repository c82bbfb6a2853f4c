"""Solver-agnostic MILP/LP model layer and reusable reformulation transforms.

The transforms are single-pass and deterministic: operand bounds are taken
at call time and never tightened retroactively.  A model is mutable while
being built and immutable after ``freeze()``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

LE = "<="
EQ = "="
GE = ">="

CONTINUOUS = "continuous"
BINARY = "binary"

_model_counter = [0]


class ModelError(Exception):
    pass


@dataclass
class VarRef:
    index: int
    name: str
    lo: float
    hi: float
    integrality: str = CONTINUOUS
    owner: int = -1

    def __hash__(self):
        return hash((self.owner, self.index))


@dataclass
class Bounds2D:
    x_lo: float
    x_hi: float
    y_lo: float
    y_hi: float

    def __post_init__(self):
        for lo, hi, ax in ((self.x_lo, self.x_hi, "x"), (self.y_lo, self.y_hi, "y")):
            if not (math.isfinite(lo) and math.isfinite(hi)):
                raise ModelError(f"Bounds2D: {ax} bounds must be finite")
            if lo > hi:
                raise ModelError(f"Bounds2D: {ax}_lo > {ax}_hi")


class LinExpr:
    """Linear expression: merged terms plus a constant, owner-checked."""

    __slots__ = ("coefs", "constant", "owner")

    def __init__(self):
        self.coefs: dict[int, float] = {}
        self.constant = 0.0
        self.owner: int | None = None

    @classmethod
    def from_terms(cls, terms, constant: float = 0.0) -> "LinExpr":
        e = cls()
        for var, coef in terms:
            e.add(var, coef)
        e.add_constant(constant)
        return e

    def add(self, var: VarRef, coef: float) -> "LinExpr":
        if not math.isfinite(coef):
            raise ModelError(f"non-finite coefficient for {var.name}")
        if self.owner is None:
            self.owner = var.owner
        elif var.owner != self.owner:
            raise ModelError(f"variable {var.name} belongs to a different model")
        c = self.coefs.get(var.index, 0.0) + coef
        if c == 0.0:
            self.coefs.pop(var.index, None)
        else:
            self.coefs[var.index] = c
        return self

    def add_constant(self, c: float) -> "LinExpr":
        if not math.isfinite(c):
            raise ModelError("non-finite constant")
        self.constant += c
        return self

    def add_expr(self, other: "LinExpr", scale: float = 1.0) -> "LinExpr":
        if other.owner is not None:
            if self.owner is None:
                self.owner = other.owner
            elif other.owner != self.owner:
                raise ModelError("mixing expressions from different models")
        for idx, coef in other.coefs.items():
            c = self.coefs.get(idx, 0.0) + scale * coef
            if c == 0.0:
                self.coefs.pop(idx, None)
            else:
                self.coefs[idx] = c
        self.constant += scale * other.constant
        return self

    def terms(self, model: "Model"):
        return [(model.variables[i], c) for i, c in self.coefs.items()]

    def value(self, x: np.ndarray) -> float:
        return self.constant + sum(c * x[i] for i, c in self.coefs.items())

    def __len__(self):
        return len(self.coefs)


@dataclass
class Row:
    expr: LinExpr
    sense: str
    rhs: float


@dataclass
class FrozenModelData:
    """Dense-free export of a frozen model, coordinate triplets only."""
    n: int
    lo: np.ndarray
    hi: np.ndarray
    is_binary: np.ndarray
    names: list[str]
    row_cols: list[np.ndarray]
    row_vals: list[np.ndarray]
    senses: list[str]
    rhs: np.ndarray
    obj: np.ndarray  # dense objective coefficients (maximize)
    obj_constant: float

    @property
    def m(self) -> int:
        return len(self.senses)

    def coordinates(self):
        """(row, col, val) triplets of the constraint matrix, no zeros."""
        rows, cols, vals = [], [], []
        for i, (c, v) in enumerate(zip(self.row_cols, self.row_vals)):
            rows.extend([i] * len(c))
            cols.extend(c.tolist())
            vals.extend(v.tolist())
        return np.array(rows, dtype=int), np.array(cols, dtype=int), np.array(vals)


class Model:
    """Mixed-integer linear model, objective sense: maximize."""

    def __init__(self, name: str = "model"):
        _model_counter[0] += 1
        self.token = _model_counter[0]
        self.name = name
        self.variables: list[VarRef] = []
        self.rows: list[Row] = []
        self.objective = LinExpr()
        self.frozen = False
        self._data: FrozenModelData | None = None
        # (aux var, defining expression) pairs in construction order, kept so
        # feasible points can be completed without re-deriving the splits
        self.aux_definitions: list[tuple[VarRef, LinExpr]] = []

    # -- construction ------------------------------------------------------
    def _check_mutable(self):
        if self.frozen:
            raise ModelError("model is frozen")

    def add_variable(self, name: str, lo: float, hi: float,
                     integrality: str = CONTINUOUS) -> VarRef:
        self._check_mutable()
        if lo > hi:
            raise ModelError(f"variable {name}: lo {lo} > hi {hi}")
        if integrality == BINARY and not (lo >= 0.0 and hi <= 1.0):
            raise ModelError(f"binary variable {name} must have bounds within [0, 1]")
        if integrality not in (CONTINUOUS, BINARY):
            raise ModelError(f"unknown integrality '{integrality}'")
        var = VarRef(len(self.variables), name, float(lo), float(hi), integrality, self.token)
        self.variables.append(var)
        return var

    def add_constraint(self, expr: LinExpr, sense: str, rhs: float) -> int:
        self._check_mutable()
        if sense not in (LE, EQ, GE):
            raise ModelError(f"unknown sense '{sense}'")
        if expr.owner is not None and expr.owner != self.token:
            raise ModelError("expression contains variables from another model")
        if not math.isfinite(rhs):
            raise ModelError("non-finite rhs")
        self.rows.append(Row(expr, sense, float(rhs)))
        return len(self.rows) - 1

    def append_term(self, row_id: int, var: VarRef, coef: float):
        self._check_mutable()
        if var.owner != self.token:
            raise ModelError("variable from another model")
        self.rows[row_id].expr.add(var, coef)

    def add_objective_term(self, var: VarRef, coef: float):
        self._check_mutable()
        self.objective.add(var, coef)

    def add_objective_expr(self, expr: LinExpr, scale: float = 1.0):
        self._check_mutable()
        self.objective.add_expr(expr, scale)

    def set_var_bounds(self, var: VarRef, lo: float, hi: float):
        self._check_mutable()
        if lo > hi:
            raise ModelError(f"variable {var.name}: lo {lo} > hi {hi}")
        var.lo = float(lo)
        var.hi = float(hi)

    def fix_var(self, var: VarRef, value: float):
        self.set_var_bounds(var, value, value)

    # -- export ------------------------------------------------------------
    def freeze(self) -> FrozenModelData:
        if not self.frozen:
            self.frozen = True
            n = len(self.variables)
            obj = np.zeros(n)
            for i, c in self.objective.coefs.items():
                obj[i] = c
            self._data = FrozenModelData(
                n=n,
                lo=np.array([v.lo for v in self.variables]),
                hi=np.array([v.hi for v in self.variables]),
                is_binary=np.array([v.integrality == BINARY for v in self.variables]),
                names=[v.name for v in self.variables],
                row_cols=[np.fromiter(r.expr.coefs.keys(), dtype=int, count=len(r.expr.coefs))
                          for r in self.rows],
                row_vals=[np.fromiter(r.expr.coefs.values(), dtype=float, count=len(r.expr.coefs))
                          for r in self.rows],
                senses=[r.sense for r in self.rows],
                rhs=np.array([r.rhs - r.expr.constant for r in self.rows]),
                obj=obj,
                obj_constant=self.objective.constant,
            )
        return self._data

    @property
    def num_vars(self) -> int:
        return len(self.variables)

    @property
    def num_rows(self) -> int:
        return len(self.rows)

    def check_point(self, x: np.ndarray, tol: float = 1e-7) -> list[str]:
        """Names of rows/bounds violated at x; empty list means feasible."""
        bad = []
        for v in self.variables:
            if x[v.index] < v.lo - tol or x[v.index] > v.hi + tol:
                bad.append(f"bound {v.name}: {x[v.index]} not in [{v.lo}, {v.hi}]")
        for i, row in enumerate(self.rows):
            val = row.expr.value(x)
            if row.sense == LE and val > row.rhs + tol:
                bad.append(f"row {i}: {val} </= {row.rhs}")
            elif row.sense == GE and val < row.rhs - tol:
                bad.append(f"row {i}: {val} >/= {row.rhs}")
            elif row.sense == EQ and abs(val - row.rhs) > tol:
                bad.append(f"row {i}: {val} != {row.rhs}")
        return bad


# ---------------------------------------------------------------------------
# transforms

def onoff_to_bounds(model: Model, p: VarRef, u: VarRef,
                    p_min: float, p_max: float) -> tuple[int, int]:
    """Commitment-scaled power bounds without auxiliary variables:
    p <= p_max*u and p >= p_min*u."""
    if u.integrality != BINARY:
        raise ModelError(f"{u.name} must be binary")
    if p_min > p_max:
        raise ModelError(f"p_min {p_min} > p_max {p_max}")
    hi = model.add_constraint(LinExpr.from_terms([(p, 1.0), (u, -p_max)]), LE, 0.0)
    lo = model.add_constraint(LinExpr.from_terms([(p, 1.0), (u, -p_min)]), GE, 0.0)
    return hi, lo


def mccormick_bilinear(model: Model, w: VarRef, x: VarRef, y: VarRef,
                       b: Bounds2D) -> list[int]:
    """Four-plane convex hull of w = x*y over the box b."""
    xl, xu, yl, yu = b.x_lo, b.x_hi, b.y_lo, b.y_hi
    ids = [
        model.add_constraint(
            LinExpr.from_terms([(w, 1.0), (y, -xl), (x, -yl)], 0.0), GE, -xl * yl),
        model.add_constraint(
            LinExpr.from_terms([(w, 1.0), (y, -xu), (x, -yu)], 0.0), GE, -xu * yu),
        model.add_constraint(
            LinExpr.from_terms([(w, 1.0), (y, -xu), (x, -yl)], 0.0), LE, -xu * yl),
        model.add_constraint(
            LinExpr.from_terms([(w, 1.0), (y, -xl), (x, -yu)], 0.0), LE, -xl * yu),
    ]
    return ids


def envelope_square(model: Model, w: VarRef, x: VarRef,
                    lo: float, hi: float) -> list[int]:
    """Tangent/secant envelope of w = x^2 for x in [lo, hi]."""
    if not (math.isfinite(lo) and math.isfinite(hi)):
        raise ModelError("envelope_square needs finite bounds")
    if lo > hi:
        raise ModelError("envelope_square: lo > hi")
    ids = [
        model.add_constraint(LinExpr.from_terms([(w, 1.0), (x, -2.0 * lo)]), GE, -lo * lo),
        model.add_constraint(LinExpr.from_terms([(w, 1.0), (x, -2.0 * hi)]), GE, -hi * hi),
        model.add_constraint(LinExpr.from_terms([(w, 1.0), (x, -(lo + hi))]), LE, -lo * hi),
    ]
    return ids


@dataclass
class QuadRow:
    """Symbolic quadratic <= 0 row: squares, bilinears, linears, constant."""
    squares: list[tuple[float, VarRef]] = field(default_factory=list)
    bilinears: list[tuple[float, VarRef, VarRef]] = field(default_factory=list)
    linears: list[tuple[float, VarRef]] = field(default_factory=list)
    constant: float = 0.0

    def value(self, x: np.ndarray) -> float:
        v = self.constant
        for c, var in self.squares:
            v += c * x[var.index] ** 2
        for c, a, b in self.bilinears:
            v += c * x[a.index] * x[b.index]
        for c, var in self.linears:
            v += c * x[var.index]
        return v


def soc_to_quadratic(A: float, B: float, C: float, D: float,
                     x: VarRef, y: VarRef, z: VarRef) -> QuadRow:
    """Square |A x + B y| <= C z + D into a quadratic <= 0 row.

    Validity requires C z + D >= 0, enforced by the caller as a side
    linear constraint.  Zero-coefficient monomials are dropped.
    """
    row = QuadRow(constant=-D * D)
    if A != 0.0:
        row.squares.append((A * A, x))
    if B != 0.0:
        row.squares.append((B * B, y))
    if A != 0.0 and B != 0.0:
        if x.index == y.index and x.owner == y.owner:
            row.squares.append((2.0 * A * B, x))
        else:
            row.bilinears.append((2.0 * A * B, x, y))
    if C != 0.0:
        row.squares.append((-C * C, z))
    if C != 0.0 and D != 0.0:
        row.linears.append((-2.0 * C * D, z))
    return row


def _square_range(lo: float, hi: float) -> tuple[float, float]:
    if lo <= 0.0 <= hi:
        return 0.0, max(lo * lo, hi * hi)
    return min(lo * lo, hi * hi), max(lo * lo, hi * hi)


def _product_range(b: Bounds2D) -> tuple[float, float]:
    corners = [b.x_lo * b.y_lo, b.x_lo * b.y_hi, b.x_hi * b.y_lo, b.x_hi * b.y_hi]
    return min(corners), max(corners)


def relax_quadratic_row(model: Model, row: QuadRow,
                        prefix: str = "qr") -> tuple[list[int], list[VarRef]]:
    """Replace every quadratic monomial by an enveloped auxiliary and link
    the auxiliaries in one final linear row."""
    ids: list[int] = []
    aux: list[VarRef] = []
    final = LinExpr()
    for k, (coef, var) in enumerate(row.squares):
        if not (math.isfinite(var.lo) and math.isfinite(var.hi)):
            raise ModelError(f"unbounded operand {var.name} in quadratic row")
        wlo, whi = _square_range(var.lo, var.hi)
        w = model.add_variable(f"{prefix}_sq{k}_{var.name}", wlo, whi)
        aux.append(w)
        ids.extend(envelope_square(model, w, var, var.lo, var.hi))
        final.add(w, coef)
    for k, (coef, va, vb) in enumerate(row.bilinears):
        b = Bounds2D(va.lo, va.hi, vb.lo, vb.hi)
        wlo, whi = _product_range(b)
        w = model.add_variable(f"{prefix}_bl{k}_{va.name}_{vb.name}", wlo, whi)
        aux.append(w)
        ids.extend(mccormick_bilinear(model, w, va, vb, b))
        final.add(w, coef)
    for coef, var in row.linears:
        final.add(var, coef)
    final.add_constant(row.constant)
    ids.append(model.add_constraint(final, LE, 0.0))
    return ids, aux


def minmax_to_mip(model: Model, y: VarRef, xs: list[VarRef],
                  big_m: float | None = None, kind: str = "max") -> tuple[list[int], list[VarRef]]:
    """Encode y = max(xs) (or min) with selector binaries and big-M rows."""
    if kind not in ("max", "min"):
        raise ModelError(f"kind must be 'max' or 'min', got '{kind}'")
    if not xs:
        raise ModelError("empty operand list")
    spread = max(v.hi for v in xs) - min(v.lo for v in xs)
    if not math.isfinite(spread):
        raise ModelError("minmax_to_mip needs finite operand bounds")
    if big_m is None:
        big_m = spread
    elif big_m < spread - 1e-12:
        raise ModelError(f"big_m {big_m} below bound spread {spread}")
    ids = []
    zs = [model.add_variable(f"z_{kind}_{y.name}_{i}", 0, 1, BINARY) for i in range(len(xs))]
    for x, z in zip(xs, zs):
        if kind == "max":
            ids.append(model.add_constraint(LinExpr.from_terms([(y, 1.0), (x, -1.0)]), GE, 0.0))
            ids.append(model.add_constraint(
                LinExpr.from_terms([(y, 1.0), (x, -1.0), (z, big_m)]), LE, big_m))
        else:
            ids.append(model.add_constraint(LinExpr.from_terms([(y, 1.0), (x, -1.0)]), LE, 0.0))
            ids.append(model.add_constraint(
                LinExpr.from_terms([(y, 1.0), (x, -1.0), (z, -big_m)]), GE, -big_m))
    ids.append(model.add_constraint(
        LinExpr.from_terms([(z, 1.0) for z in zs]), EQ, 1.0))
    return ids, zs


def clique_startup(model: Model, categories, window_durations: np.ndarray,
                   initial_off_hours: float | None,
                   stop_vars: list[VarRef], start_vars: list[VarRef],
                   min_downtime: float, name: str = "dev") -> tuple[list[int], dict]:
    """Downtime-dependent startup costs via category indicators.

    categories: list of (downtime_lo, downtime_hi, cost) with the last hi
    infinite.  For each start interval t one indicator per category whose
    downtime window can be reached, fed by the eligible in-window stops
    and, for boundary categories, by the prior off duration.  Adds the
    category costs to the (maximize) objective with negative sign.
    """
    cats = list(categories)
    if not cats or cats[0][0] > min_downtime + 1e-9 or not math.isinf(cats[-1][1]):
        raise ModelError("startup categories must cover [min_downtime, inf)")
    for (l1, h1, _), (l2, _, _) in zip(cats, cats[1:]):
        if abs(h1 - l2) > 1e-9:
            raise ModelError("startup categories must be contiguous")
    d = np.asarray(window_durations, dtype=float)
    W = len(d)
    ids: list[int] = []
    deltas: dict[tuple[int, int], VarRef] = {}
    eps = 1e-9
    for t in range(W):
        active: list[VarRef] = []
        for k, (lo, hi, cost) in enumerate(cats):
            feeders = []
            for s in range(t):
                down = float(np.sum(d[s:t]))
                if down >= lo - eps and down < hi - eps:
                    feeders.append(stop_vars[s])
            fed_initial = False
            if initial_off_hours is not None:
                down0 = initial_off_hours + float(np.sum(d[:t]))
                fed_initial = down0 >= lo - eps and down0 < hi - eps
            if not feeders and not fed_initial:
                continue
            delta = model.add_variable(f"delta_{name}_k{k}_t{t}", 0, 1, BINARY)
            deltas[(k, t)] = delta
            expr = LinExpr.from_terms([(delta, 1.0)] + [(s, -1.0) for s in feeders])
            ids.append(model.add_constraint(expr, LE, 1.0 if fed_initial else 0.0))
            model.add_objective_term(delta, -cost)
            active.append(delta)
        match = LinExpr.from_terms([(dv, 1.0) for dv in active] + [(start_vars[t], -1.0)])
        ids.append(model.add_constraint(match, EQ, 0.0))
    return ids, deltas


def split_long_expression(model: Model, expr: LinExpr,
                          chunk_size: int = 50,
                          name: str = "split") -> tuple[VarRef | None, list[int]]:
    """Break an n-term expression into partial-sum auxiliaries.

    Returns (None, []) when no split is needed, otherwise a variable whose
    value equals the original expression in every feasible point, with
    ceil(n/chunk) defining rows plus one combining row.
    """
    if chunk_size < 2:
        raise ModelError("chunk_size must be >= 2")
    items = list(expr.coefs.items())
    n = len(items)
    if n <= chunk_size:
        return None, []
    ids: list[int] = []
    partials: list[VarRef] = []
    for k in range(0, n, chunk_size):
        chunk = items[k:k + chunk_size]
        lo = hi = 0.0
        for idx, coef in chunk:
            v = model.variables[idx]
            a, b2 = coef * v.lo, coef * v.hi
            lo += min(a, b2)
            hi += max(a, b2)
        if not (math.isfinite(lo) and math.isfinite(hi)):
            lo, hi = -math.inf, math.inf
        w = model.add_variable(f"{name}_part{len(partials)}", lo, hi)
        row = LinExpr.from_terms([(w, 1.0)] + [(model.variables[i], -c) for i, c in chunk])
        ids.append(model.add_constraint(row, EQ, 0.0))
        model.aux_definitions.append(
            (w, LinExpr.from_terms([(model.variables[i], c) for i, c in chunk])))
        partials.append(w)
    lo = sum(p.lo for p in partials) + expr.constant
    hi = sum(p.hi for p in partials) + expr.constant
    total = model.add_variable(f"{name}_total", lo, hi)
    combine = LinExpr.from_terms([(total, 1.0)] + [(p, -1.0) for p in partials])
    ids.append(model.add_constraint(combine, EQ, expr.constant))
    model.aux_definitions.append(
        (total, LinExpr.from_terms([(p, 1.0) for p in partials], expr.constant)))
    return total, ids


def add_penalized_slack(model: Model, row_id: int, penalty: float,
                        name: str = "slack") -> list[VarRef]:
    """Soften a row with penalized slack: one for inequalities, a signed
    pair for equalities.  Each slack appears in exactly its own row."""
    if penalty <= 0:
        raise ModelError("penalty must be positive")
    row = model.rows[row_id]
    slacks = []
    if row.sense == LE:
        s = model.add_variable(f"{name}_r{row_id}", 0.0, math.inf)
        model.append_term(row_id, s, -1.0)
        model.add_objective_term(s, -penalty)
        slacks.append(s)
    elif row.sense == GE:
        s = model.add_variable(f"{name}_r{row_id}", 0.0, math.inf)
        model.append_term(row_id, s, 1.0)
        model.add_objective_term(s, -penalty)
        slacks.append(s)
    else:
        s_pos = model.add_variable(f"{name}_r{row_id}_pos", 0.0, math.inf)
        s_neg = model.add_variable(f"{name}_r{row_id}_neg", 0.0, math.inf)
        model.append_term(row_id, s_pos, -1.0)
        model.append_term(row_id, s_neg, 1.0)
        model.add_objective_term(s_pos, -penalty)
        model.add_objective_term(s_neg, -penalty)
        slacks.extend([s_pos, s_neg])
    return slacks
