"""Fixed-format MPS model exchange.

Writes ROWS/COLUMNS/RHS/RANGES/BOUNDS with binaries inside INTORG/INTEND
markers.  The model's maximize sense is recorded through the
``* OBJSENSE MAX`` comment convention, and the objective constant rides on
the objective-row RHS entry (negated, per the usual convention).  Names
longer than 8 characters are truncated deterministically with collision
suffixes.  The bundled reader accepts whitespace-separated fields, so the
round trip is exact to the printed precision.
"""
from __future__ import annotations

import math

import numpy as np

from ..formulation import BINARY, EQ, GE, LE, FrozenModelData, LinExpr, Model
from . import SolverError

_SENSE_TO_ROW = {LE: "L", GE: "G", EQ: "E"}
_ROW_TO_SENSE = {"L": LE, "G": GE, "E": EQ}


class MpsNameError(SolverError):
    pass


def _shorten(names: list[str]) -> list[str]:
    """Deterministic 8-char names: truncate, then suffix duplicates."""
    out: list[str] = []
    used: set[str] = set()
    for name in names:
        base = "".join(ch if ch.isalnum() else "_" for ch in name)[:8] or "N"
        cand = base
        k = 0
        while cand in used:
            k += 1
            tag = str(k)
            if len(tag) >= 8:
                raise MpsNameError(f"cannot disambiguate name '{name}'")
            cand = base[: 8 - len(tag)] + tag
        used.add(cand)
        out.append(cand)
    return out


def _num(v: float) -> str:
    """Shortest representation that fits a 12-character field."""
    for prec in (12, 10, 8, 6, 4):
        s = f"{v:.{prec}g}"
        if len(s) <= 12:
            return s
    return f"{v:.3g}"[:12]


def _fixed(f1: str = "", f2: str = "", f3: str = "", f4: str = "",
           f5: str = "", f6: str = "") -> str:
    line = f" {f1:<2} {f2:<8}  {f3:<8}  {f4:<12}   {f5:<8}  {f6:<12}"
    return line.rstrip()


def export_mps(model) -> str:
    """Serialize a frozen model; errors only on name-suffix exhaustion."""
    data = model.freeze() if isinstance(model, Model) else model
    m, n = data.m, data.n
    row_names = _shorten([f"R{i}" for i in range(m)])
    col_names = _shorten(data.names)
    lines = [f"* OBJSENSE MAX", f"NAME          MODEL"]
    lines.append("ROWS")
    lines.append(" N  OBJ")
    for i in range(m):
        lines.append(f" {_SENSE_TO_ROW[data.senses[i]]}  {row_names[i]}")

    # per-column entries, deterministic order
    col_entries: list[list[tuple[str, float]]] = [[] for _ in range(n)]
    for i, (cols, vals) in enumerate(zip(data.row_cols, data.row_vals)):
        order = np.argsort(cols, kind="stable")
        for k in order:
            col_entries[int(cols[k])].append((row_names[i], float(vals[k])))
    lines.append("COLUMNS")
    in_int = False
    marker = 0
    for j in range(n):
        want_int = bool(data.is_binary[j])
        if want_int != in_int:
            tag = "INTORG" if want_int else "INTEND"
            lines.append(_fixed("", f"M{marker}", "'MARKER'", "", f"'{tag}'"))
            marker += 1
            in_int = want_int
        entries = list(col_entries[j])
        if data.obj[j] != 0.0:
            entries.insert(0, ("OBJ", float(data.obj[j])))
        if not entries:
            entries = [("OBJ", 0.0)]  # keep every column present exactly once
        for a in range(0, len(entries), 2):
            pair = entries[a: a + 2]
            if len(pair) == 2:
                lines.append(_fixed("", col_names[j], pair[0][0], _num(pair[0][1]),
                                    pair[1][0], _num(pair[1][1])))
            else:
                lines.append(_fixed("", col_names[j], pair[0][0], _num(pair[0][1])))
    if in_int:
        lines.append(_fixed("", f"M{marker}", "'MARKER'", "", "'INTEND'"))

    lines.append("RHS")
    entries = []
    if data.obj_constant != 0.0:
        entries.append(("OBJ", -data.obj_constant))
    for i in range(m):
        if data.rhs[i] != 0.0:
            entries.append((row_names[i], float(data.rhs[i])))
    for a in range(0, len(entries), 2):
        pair = entries[a: a + 2]
        if len(pair) == 2:
            lines.append(_fixed("", "RHS", pair[0][0], _num(pair[0][1]),
                                pair[1][0], _num(pair[1][1])))
        else:
            lines.append(_fixed("", "RHS", pair[0][0], _num(pair[0][1])))
    lines.append("RANGES")
    lines.append("BOUNDS")
    for j in range(n):
        lo, hi = float(data.lo[j]), float(data.hi[j])
        name = col_names[j]
        if lo == hi:
            lines.append(_fixed("FX", "BND", name, _num(lo)))
            continue
        if math.isinf(lo) and lo < 0 and math.isinf(hi):
            lines.append(_fixed("FR", "BND", name))
            continue
        if math.isinf(lo) and lo < 0:
            lines.append(_fixed("MI", "BND", name))
        elif lo != 0.0:
            lines.append(_fixed("LO", "BND", name, _num(lo)))
        if math.isinf(hi):
            if lo != 0.0 or math.isinf(lo):
                pass  # PL is the default upper bound
            else:
                lines.append(_fixed("PL", "BND", name))
        else:
            lines.append(_fixed("UP", "BND", name, _num(hi)))
    lines.append("ENDATA")
    return "\n".join(lines) + "\n"


def parse_mps(text: str) -> FrozenModelData:
    """Re-parse exported text into model data (whitespace-field tolerant)."""
    maximize = False
    section = None
    row_sense: dict[str, str] = {}
    row_order: list[str] = []
    obj_row = None
    cols: dict[str, dict[str, float]] = {}
    col_order: list[str] = []
    integral: set[str] = set()
    rhs: dict[str, float] = {}
    bounds: dict[str, list] = {}
    in_int = False

    for raw in text.splitlines():
        if not raw.strip():
            continue
        if raw.startswith("*"):
            if "OBJSENSE" in raw and "MAX" in raw.upper():
                maximize = True
            continue
        if not raw[0].isspace():
            head = raw.split()
            section = head[0].upper()
            continue
        parts = raw.split()
        if section == "ROWS":
            kind, name = parts[0].upper(), parts[1]
            if kind == "N":
                if obj_row is None:
                    obj_row = name
            else:
                row_sense[name] = _ROW_TO_SENSE[kind]
                row_order.append(name)
        elif section == "COLUMNS":
            if len(parts) >= 3 and parts[1] == "'MARKER'":
                in_int = parts[2] == "'INTORG'"
                continue
            if len(parts) >= 3 and "'MARKER'" in parts:
                in_int = "'INTORG'" in parts
                continue
            col = parts[0]
            if col not in cols:
                cols[col] = {}
                col_order.append(col)
                if in_int:
                    integral.add(col)
            for k in range(1, len(parts) - 1, 2):
                cols[col][parts[k]] = cols[col].get(parts[k], 0.0) + float(parts[k + 1])
        elif section == "RHS":
            for k in range(1, len(parts) - 1, 2):
                rhs[parts[k]] = float(parts[k + 1])
        elif section == "BOUNDS":
            btype = parts[0].upper()
            name = parts[2]
            val = float(parts[3]) if len(parts) > 3 else None
            bounds.setdefault(name, []).append((btype, val))
        elif section == "RANGES":
            raise SolverError("RANGES entries are not produced by this writer")

    n = len(col_order)
    m = len(row_order)
    row_idx = {r: i for i, r in enumerate(row_order)}
    lo = np.zeros(n)
    hi = np.full(n, math.inf)
    is_binary = np.zeros(n, dtype=bool)
    obj = np.zeros(n)
    row_cols: list[list[int]] = [[] for _ in range(m)]
    row_vals: list[list[float]] = [[] for _ in range(m)]
    for j, cname in enumerate(col_order):
        for rname, val in cols[cname].items():
            if rname == obj_row:
                obj[j] = val
            else:
                row_cols[row_idx[rname]].append(j)
                row_vals[row_idx[rname]].append(val)
        if cname in integral:
            is_binary[j] = True
            hi[j] = 1.0
        for btype, val in bounds.get(cname, []):
            if btype == "LO":
                lo[j] = val
            elif btype == "UP":
                hi[j] = val
            elif btype == "FX":
                lo[j] = hi[j] = val
            elif btype == "FR":
                lo[j], hi[j] = -math.inf, math.inf
            elif btype == "MI":
                lo[j] = -math.inf
            elif btype == "PL":
                hi[j] = math.inf
            elif btype == "BV":
                is_binary[j] = True
                lo[j], hi[j] = 0.0, 1.0
            else:
                raise SolverError(f"unsupported bound type {btype}")

    obj_constant = -rhs.pop(obj_row, 0.0) if obj_row else 0.0
    rhs_vec = np.array([rhs.get(r, 0.0) for r in row_order])
    if not maximize:
        obj = -obj
        obj_constant = -obj_constant
    return FrozenModelData(
        n=n, lo=lo, hi=hi, is_binary=is_binary, names=list(col_order),
        row_cols=[np.array(c, dtype=int) for c in row_cols],
        row_vals=[np.array(v) for v in row_vals],
        senses=[row_sense[r] for r in row_order],
        rhs=rhs_vec, obj=obj, obj_constant=float(obj_constant),
    )
