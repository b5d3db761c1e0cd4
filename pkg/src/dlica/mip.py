"""Solver-agnostic MIP model and the sum-of-networks WDP encoder.

The encoder turns one ReLU network per bidder into a linear MIP: every node
gets an output variable ``z``, a slack ``s`` for the negative part of its
preactivation, and an activity indicator ``y``, linked by the rows

    z - s = W z_prev + b,    z <= U * y,    s <= S * (1 - y),

with ``U``/``S`` either a uniform big-M or per-node interval bounds.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import _kernels
from .nn import ValueNetwork, preactivation_bounds

MODEL_SCHEMA = "dlica.mip/1"
SENSES = ("<=", "=", ">=")
BINARY = "binary"
CONTINUOUS = "continuous"


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class Variable:
    name: str
    kind: str
    lb: float
    ub: float


@dataclass(frozen=True)
class Constraint:
    coeffs: Mapping[int, float]
    sense: str
    rhs: float
    name: str


@dataclass
class MipModel:
    """Maximization MIP: variables with bounds, linear rows, linear objective."""

    variables: list[Variable] = field(default_factory=list)
    constraints: list[Constraint] = field(default_factory=list)
    objective: dict[int, float] = field(default_factory=dict)
    name: str = "model"

    def __post_init__(self):
        self._index = {v.name: i for i, v in enumerate(self.variables)}

    # construction ---------------------------------------------------------

    def add_var(self, name: str, kind: str = CONTINUOUS, lb: float = 0.0, ub: float | None = None) -> int:
        """Append a variable; ``ub`` defaults to 1 for binaries and +inf otherwise."""
        if ub is None:
            ub = 1.0 if kind == BINARY else math.inf
        if name in self._index:
            raise ModelError(f"duplicate variable name {name!r}")
        if kind == BINARY and not (0.0 <= lb <= ub <= 1.0):
            raise ModelError(f"binary variable {name!r} needs bounds inside [0, 1]")
        if kind not in (BINARY, CONTINUOUS):
            raise ModelError(f"unknown variable kind {kind!r}")
        self.variables.append(Variable(name, kind, float(lb), float(ub)))
        self._index[name] = len(self.variables) - 1
        return len(self.variables) - 1

    def add_constraint(self, coeffs: Mapping[int, float], sense: str, rhs: float, name: str | None = None) -> int:
        if sense not in SENSES:
            raise ModelError(f"unknown relation {sense!r}")
        terms = {int(k): float(v) for k, v in coeffs.items() if v != 0.0}
        if name is None:
            name = f"c{len(self.constraints)}"
        self.constraints.append(Constraint(terms, sense, float(rhs), name))
        return len(self.constraints) - 1

    def set_objective(self, coeffs: Mapping[int, float]) -> None:
        self.objective = {int(k): float(v) for k, v in coeffs.items() if v != 0.0}

    # queries --------------------------------------------------------------

    @property
    def n_vars(self) -> int:
        return len(self.variables)

    def index_of(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise KeyError(f"no variable named {name!r}") from None

    def has_var(self, name: str) -> bool:
        return name in self._index

    def binary_ids(self) -> list[int]:
        return [i for i, v in enumerate(self.variables) if v.kind == BINARY]

    def validate(self) -> None:
        n = self.n_vars
        for v in self.variables:
            if v.kind == BINARY and not (0.0 <= v.lb <= v.ub <= 1.0):
                raise ModelError(f"binary variable {v.name!r} has bounds [{v.lb}, {v.ub}]")
            if math.isnan(v.lb) or math.isnan(v.ub) or v.lb > v.ub:
                raise ModelError(f"variable {v.name!r} has invalid bounds [{v.lb}, {v.ub}]")
        for c in self.constraints:
            if c.sense not in SENSES:
                raise ModelError(f"row {c.name!r}: unknown relation {c.sense!r}")
            if not math.isfinite(c.rhs):
                raise ModelError(f"row {c.name!r}: non-finite right-hand side")
            for k, a in c.coeffs.items():
                if not 0 <= k < n:
                    raise ModelError(f"row {c.name!r} references undeclared variable {k}")
                if not math.isfinite(a):
                    raise ModelError(f"row {c.name!r}: non-finite coefficient")
        for k, a in self.objective.items():
            if not 0 <= k < n:
                raise ModelError(f"objective references undeclared variable {k}")
            if not math.isfinite(a):
                raise ModelError("objective has a non-finite coefficient")

    def copy(self) -> "MipModel":
        return MipModel(list(self.variables), list(self.constraints), dict(self.objective), self.name)

    def with_bounds(self, updates: Mapping[int, tuple[float, float]]) -> "MipModel":
        out = self.copy()
        for k, (lb, ub) in updates.items():
            v = out.variables[k]
            out.variables[k] = Variable(v.name, v.kind, float(lb), float(ub))
        return out

    def to_arrays(self):
        """Dense ``(c, A, sense, b, lb, ub, is_binary)``; sense is -1/0/+1 for <=, =, >=."""
        n = self.n_vars
        c = np.zeros(n)
        for k, a in self.objective.items():
            c[k] = a
        A = np.zeros((len(self.constraints), n))
        sense = np.zeros(len(self.constraints), dtype=np.int64)
        b = np.zeros(len(self.constraints))
        for r, con in enumerate(self.constraints):
            for k, a in con.coeffs.items():
                A[r, k] = a
            sense[r] = SENSES.index(con.sense) - 1
            b[r] = con.rhs
        lb = np.array([v.lb for v in self.variables], dtype=np.float64)
        ub = np.array([v.ub for v in self.variables], dtype=np.float64)
        is_bin = np.array([v.kind == BINARY for v in self.variables], dtype=bool)
        return c, A, sense, b, lb, ub, is_bin

    def objective_value(self, x: Sequence[float]) -> float:
        return float(sum(a * x[k] for k, a in self.objective.items()))

    def max_violation(self, x: Sequence[float]) -> float:
        """Largest bound or row violation of point ``x`` (absolute units)."""
        x = np.asarray(x, dtype=np.float64)
        worst = 0.0
        for k, v in enumerate(self.variables):
            worst = max(worst, v.lb - x[k], x[k] - v.ub)
        for con in self.constraints:
            lhs = sum(a * x[k] for k, a in con.coeffs.items())
            if con.sense == "<=":
                worst = max(worst, lhs - con.rhs)
            elif con.sense == ">=":
                worst = max(worst, con.rhs - lhs)
            else:
                worst = max(worst, abs(lhs - con.rhs))
        return float(worst)

    # equivalence and serialization ---------------------------------------

    def equivalent(self, other: "MipModel") -> bool:
        if self.variables != other.variables:
            return False
        if self.objective != other.objective:
            return False
        if len(self.constraints) != len(other.constraints):
            return False
        return all(
            dict(a.coeffs) == dict(b.coeffs) and a.sense == b.sense and a.rhs == b.rhs and a.name == b.name
            for a, b in zip(self.constraints, other.constraints)
        )

    def to_dict(self) -> dict:
        return {
            "schema": MODEL_SCHEMA,
            "name": self.name,
            "variables": [[v.name, v.kind, _num(v.lb), _num(v.ub)] for v in self.variables],
            "constraints": [
                {"name": c.name, "sense": c.sense, "rhs": c.rhs,
                 "terms": [[k, a] for k, a in sorted(c.coeffs.items())]}
                for c in self.constraints
            ],
            "objective": [[k, a] for k, a in sorted(self.objective.items())],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MipModel":
        if data.get("schema") != MODEL_SCHEMA:
            raise ModelError(f"unsupported model schema {data.get('schema')!r}")
        model = cls(name=data.get("name", "model"))
        for name, kind, lb, ub in data["variables"]:
            model.add_var(name, kind, float(lb), float(ub))
        for c in data["constraints"]:
            model.add_constraint({k: a for k, a in c["terms"]}, c["sense"], c["rhs"], c["name"])
        model.set_objective({k: a for k, a in data["objective"]})
        return model


def _num(v: float):
    # JSON has no infinity literal; keep the dump strict
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


# ---------------------------------------------------------------------------
# big-M policy and WDP encoding
# ---------------------------------------------------------------------------

DEFAULT_BIG_M = 5000.0


@dataclass(frozen=True)
class BigMPolicy:
    """``uniform`` uses one constant ``L``; ``per_node`` uses interval bounds."""

    mode: str = "per_node"
    L: float = DEFAULT_BIG_M

    def __post_init__(self):
        if self.mode not in ("uniform", "per_node"):
            raise ValueError(f"unknown big-M mode {self.mode!r}")
        if not (self.L > 0 and math.isfinite(self.L)):
            raise ValueError("big-M constant L must be positive and finite")

    @classmethod
    def uniform(cls, L: float = DEFAULT_BIG_M) -> "BigMPolicy":
        return cls("uniform", L)

    @classmethod
    def per_node(cls) -> "BigMPolicy":
        return cls("per_node")


def _pad(v: float) -> float:
    return v + 1e-7 * (1.0 + abs(v))


def a_name(i: int, j: int) -> str:
    return f"a_{i}_{j}"


def node_names(i: int, k: int, j: int) -> tuple[str, str, str]:
    return f"z_{i}_{k}_{j}", f"s_{i}_{k}_{j}", f"y_{i}_{k}_{j}"


def encoded_var_count(archs: Iterable) -> int:
    """Closed-form variable count ``sum_i (m + 3 * (sum_k d_k + 1))``."""
    total = 0
    for arch in archs:
        dims = arch.layer_dims
        total += dims[0] + 3 * (sum(dims[1:-1]) + 1)
    return total


def encode_wdp(
    nets: Sequence[ValueNetwork],
    policy: BigMPolicy = BigMPolicy(),
    eliminate_dead: bool | None = None,
    name: str = "wdp",
) -> MipModel:
    """Compile ``max sum_i N_i(a_i)`` over feasible allocations into a linear MIP.

    Bidder ``i`` is the position in ``nets``. With ``per_node`` big-M, nodes whose
    preactivation upper bound is <= 0 are dead: their ``z`` is fixed to 0 and
    no ``s``/``y``/rows are emitted (set ``eliminate_dead=False`` to keep them).
    """
    if len(nets) == 0:
        raise ModelError("economy must contain at least one bidder")
    m = nets[0].n_items
    for i, net in enumerate(nets):
        if net.n_items != m:
            raise ModelError(f"bidder {i} network takes {net.n_items} items, expected {m}")
    if eliminate_dead is None:
        eliminate_dead = policy.mode == "per_node"
    if eliminate_dead and policy.mode != "per_node":
        raise ModelError("dead-node elimination needs per-node bounds")

    model = MipModel(name=name)
    objective = {}
    for i, net in enumerate(nets):
        prev = [model.add_var(a_name(i, j), BINARY, 0.0, 1.0) for j in range(m)]
        prev_dead = [False] * m
        bounds = preactivation_bounds(net) if policy.mode == "per_node" else None
        for k, (w, b) in enumerate(zip(net.weights, net.biases), start=1):
            cur = []
            cur_dead = []
            for j in range(w.shape[0]):
                zn, sn, yn = node_names(i, k, j)
                if bounds is None:
                    up = down = policy.L
                else:
                    lo, hi = bounds[k - 1][0][j], bounds[k - 1][1][j]
                    up = _pad(hi) if hi > 0 else 0.0
                    down = _pad(-lo) if lo < 0 else 0.0
                if eliminate_dead and up == 0.0:
                    cur.append(model.add_var(zn, CONTINUOUS, 0.0, 0.0))
                    cur_dead.append(True)
                    continue
                z = model.add_var(zn, CONTINUOUS, 0.0, up)
                s = model.add_var(sn, CONTINUOUS, 0.0, down)
                y = model.add_var(yn, BINARY, 0.0, 1.0)
                row = {z: 1.0, s: -1.0}
                for col, p in enumerate(prev):
                    if not prev_dead[col] and w[j, col] != 0.0:
                        row[p] = row.get(p, 0.0) - float(w[j, col])
                model.add_constraint(row, "=", float(b[j]), f"e_{i}_{k}_{j}")
                model.add_constraint({z: 1.0, y: -up}, "<=", 0.0, f"zu_{i}_{k}_{j}")
                model.add_constraint({s: 1.0, y: down}, "<=", down, f"su_{i}_{k}_{j}")
                cur.append(z)
                cur_dead.append(False)
            prev, prev_dead = cur, cur_dead
        objective[prev[0]] = 1.0
    if len(nets) > 1:
        for j in range(m):
            model.add_constraint({model.index_of(a_name(i, j)): 1.0 for i in range(len(nets))},
                                 "<=", 1.0, f"item_{j}")
    model.set_objective(objective)
    return model


def wdp_bidders(model: MipModel) -> int:
    n = 0
    while model.has_var(a_name(n, 0)):
        n += 1
    return n


def wdp_items(model: MipModel) -> int:
    m = 0
    while model.has_var(a_name(0, m)):
        m += 1
    return m


def fix_inputs(model: MipModel, bidder: int, bundle: Sequence[int]) -> MipModel:
    """Copy of ``model`` with bidder's allocation variables fixed to ``bundle``."""
    n = wdp_bidders(model)
    if not 0 <= bidder < n:
        raise IndexError(f"bidder {bidder} out of range for a {n}-bidder model")
    m = wdp_items(model)
    bundle = [int(round(float(v))) for v in bundle]
    if len(bundle) != m:
        raise ModelError(f"bundle has length {len(bundle)}, model has {m} items")
    if any(v not in (0, 1) for v in bundle):
        raise ModelError("bundle entries must be 0 or 1")
    return model.with_bounds({model.index_of(a_name(bidder, j)): (v, v) for j, v in enumerate(bundle)})


def allocation_from_assignment(model: MipModel, x: Sequence[float]) -> list[int]:
    """Per-bidder bundle bitmasks read off the ``a`` variables of a WDP solution."""
    n, m = wdp_bidders(model), wdp_items(model)
    masks = []
    for i in range(n):
        mask = 0
        for j in range(m):
            if x[model.index_of(a_name(i, j))] > 0.5:
                mask |= 1 << j
        masks.append(mask)
    return masks


class _WdpLayout:
    """Variable ids and dense rows of an encoded WDP, for fast point completion."""

    def __init__(self, model: MipModel, nets: Sequence[ValueNetwork]):
        self.m = nets[0].n_items
        self.n_vars = model.n_vars
        self.a_ids = np.array([[model.index_of(a_name(i, j)) for j in range(self.m)] for i in range(len(nets))],
                              dtype=np.int64).reshape(len(nets), self.m)
        self.nodes = []  # per bidder, per layer: (z, s, y) id arrays, -1 for eliminated nodes
        for i, net in enumerate(nets):
            layers = []
            for k, w in enumerate(net.weights, start=1):
                ids = np.full((3, w.shape[0]), -1, dtype=np.int64)
                for j in range(w.shape[0]):
                    for row, name in enumerate(node_names(i, k, j)):
                        if model.has_var(name):
                            ids[row, j] = model.index_of(name)
                layers.append(ids)
            self.nodes.append(layers)
        c, A, sense, b, lb, ub, _ = model.to_arrays()
        self.A, self.sense, self.b, self.lb, self.ub = A, sense, b, lb, ub

    def violation(self, x: np.ndarray) -> float:
        worst = max(float(np.max(self.lb - x, initial=0.0)), float(np.max(x - self.ub, initial=0.0)))
        if self.A.shape[0]:
            gap = self.A @ x - self.b
            gap = np.where(self.sense < 0, gap, np.where(self.sense > 0, -gap, np.abs(gap)))
            worst = max(worst, float(gap.max()))
        return worst


def wdp_completion(model: MipModel, nets: Sequence[ValueNetwork], masks: Sequence[int],
                   layout: _WdpLayout | None = None) -> np.ndarray | None:
    """Full MIP point for allocation ``masks``: z, s, y from an exact forward pass.

    Returns ``None`` if the point violates the model (e.g. infeasible masks).
    """
    if layout is None:
        layout = _WdpLayout(model, nets)
    x = np.zeros(layout.n_vars)
    m = layout.m
    for i, (net, mask) in enumerate(zip(nets, masks)):
        bundle = np.array([(mask >> j) & 1 for j in range(m)], dtype=np.float64)
        x[layout.a_ids[i]] = bundle
        o = bundle
        for ids, w, b in zip(layout.nodes[i], net.weights, net.biases):
            pre = w @ o + b
            o = np.maximum(pre, 0.0)
            z, s, y = ids
            live = z >= 0
            x[z[live]] = o[live]
            has_s = s >= 0
            x[s[has_s]] = np.maximum(-pre[has_s], 0.0)
            has_y = y >= 0
            x[y[has_y]] = (pre[has_y] > 0).astype(np.float64)
    if layout.violation(x) > 1e-6:
        return None
    return x


# ---------------------------------------------------------------------------
# LP text format
# ---------------------------------------------------------------------------


class LpParseError(ValueError):
    def __init__(self, message: str, line: int, col: int):
        super().__init__(f"line {line}, column {col}: {message}")
        self.line = line
        self.col = col


def _fmt(v: float) -> str:
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(float(v))


def _terms(coeffs: Mapping[int, float], variables: Sequence[Variable], per_line: int = 6) -> str:
    parts = []
    for k, a in sorted(coeffs.items()):
        sign = "-" if a < 0 or (a == 0 and math.copysign(1.0, a) < 0) else "+"
        parts.append(f"{sign} {_fmt(abs(a))} {variables[k].name}")
    lines = [" ".join(parts[i:i + per_line]) for i in range(0, len(parts), per_line)]
    return "\n   ".join(lines)


def export_lp(model: MipModel) -> str:
    """Canonical LP-format text: objective, rows, bounds for every variable, binaries."""
    out = [f"\\ {MODEL_SCHEMA} {model.name}", "Maximize", f" obj: {_terms(model.objective, model.variables)}".rstrip()]
    out.append("Subject To")
    for c in model.constraints:
        out.append(f" {c.name}: {_terms(c.coeffs, model.variables)} {c.sense} {_fmt(c.rhs)}".replace(":  ", ": "))
    out.append("Bounds")
    for v in model.variables:
        out.append(f" {_fmt(v.lb)} <= {v.name} <= {_fmt(v.ub)}")
    binaries = [v.name for v in model.variables if v.kind == BINARY]
    if binaries:
        out.append("Binaries")
        for i in range(0, len(binaries), 8):
            out.append(" " + " ".join(binaries[i:i + 8]))
    out.append("End")
    return "\n".join(out) + "\n"


_SECTION_PATTERNS = [
    ("max", re.compile(r"(maximize|maximise|maximum|max)\b", re.I)),
    ("min", re.compile(r"(minimize|minimise|minimum|min)\b", re.I)),
    ("st", re.compile(r"(subject\s+to|such\s+that|s\.t\.|st)(?![\w.])", re.I)),
    ("bounds", re.compile(r"(bounds|bound)\b", re.I)),
    ("binary", re.compile(r"(binaries|binary|bin)\b", re.I)),
    ("general", re.compile(r"(generals|general|gen|integers)\b", re.I)),
    ("end", re.compile(r"end\b", re.I)),
]

_TOKEN = re.compile(
    r"""
    (?P<ws>\s+)
    |(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?|inf(?:inity)?\b)
    |(?P<name>[A-Za-z_!"\#$%&()/,.;?@`'{}|~][A-Za-z0-9_!"\#$%&()/,.;?@`'{}|~\[\]]*)
    |(?P<rel>[<>=!]+)
    |(?P<sign>[+-])
    |(?P<colon>:)
    |(?P<other>.)
    """,
    re.X | re.I,
)

_RELATIONS = {"<=": "<=", "=<": "<=", "<": "<=", ">=": ">=", "=>": ">=", ">": ">=", "=": "="}


@dataclass
class _Tok:
    kind: str
    text: str
    line: int
    col: int


def _tokenize(text: str, line: int, col0: int = 1) -> list[_Tok]:
    toks = []
    pos = 0
    while pos < len(text):
        mt = _TOKEN.match(text, pos)
        kind = mt.lastgroup
        if kind == "other":
            raise LpParseError(f"unexpected character {mt.group()!r}", line, col0 + pos)
        if kind != "ws":
            t = mt.group()
            if kind == "rel" and t not in _RELATIONS:
                raise LpParseError(f"malformed relation token {t!r}", line, col0 + pos)
            if kind == "name" and t.lower() in ("inf", "infinity"):
                kind = "num"
            toks.append(_Tok(kind, t, line, col0 + pos))
        pos = mt.end()
    return toks


def _to_float(tok: _Tok) -> float:
    return math.inf if tok.text.lower().startswith("inf") else float(tok.text)


class _Parser:
    def __init__(self, text: str):
        self.sections: list[tuple[str, list[_Tok], int]] = []
        current = None
        toks: list[_Tok] = []
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("\\", 1)[0]
            stripped = line.lstrip()
            offset = len(line) - len(stripped) + 1
            if not stripped:
                continue
            for key, pat in _SECTION_PATTERNS:
                mt = pat.match(stripped)
                if mt and not stripped[mt.end():].lstrip().startswith(":"):
                    if current is not None:
                        self.sections.append((current, toks, lineno))
                    current, toks = key, []
                    stripped = stripped[mt.end():]
                    offset += mt.end()
                    break
            if current is None:
                raise LpParseError("expected an objective section header", lineno, offset)
            toks.extend(_tokenize(stripped, lineno, offset))
            toks.append(_Tok("eol", "", lineno, offset + len(stripped)))
        if current is not None:
            self.sections.append((current, toks, -1))

    def parse(self) -> MipModel:
        names: list[str] = []
        seen: set[str] = set()
        bounds: dict[str, list[float]] = {}
        bound_order: list[str] = []
        binaries: list[str] = []
        objective: dict[str, float] = {}
        rows: list[tuple[str | None, dict[str, float], str, float]] = []

        def note(name):
            if name not in seen:
                seen.add(name)
                names.append(name)

        has_objective = False
        for key, toks, _ in self.sections:
            toks = [t for t in toks if t.kind != "eol"] if key in ("max", "min", "st") else toks
            if key == "min":
                t = toks[0] if toks else _Tok("", "", 1, 1)
                raise LpParseError("only maximization models are supported", t.line, t.col)
            if key == "max":
                has_objective = True
                pos = 0
                if len(toks) >= 2 and toks[0].kind == "name" and toks[1].kind == "colon":
                    pos = 2
                expr, pos = self._expr(toks, pos, note)
                if pos != len(toks):
                    t = toks[pos]
                    raise LpParseError(f"unexpected token {t.text!r} in objective", t.line, t.col)
                objective = expr
            elif key == "st":
                pos = 0
                while pos < len(toks):
                    rname = None
                    if pos + 1 < len(toks) and toks[pos].kind == "name" and toks[pos + 1].kind == "colon":
                        rname = toks[pos].text
                        pos += 2
                    expr, pos = self._expr(toks, pos, note)
                    if pos >= len(toks) or toks[pos].kind != "rel":
                        t = toks[pos] if pos < len(toks) else toks[-1]
                        raise LpParseError(f"expected a relation, got {t.text!r}", t.line, t.col)
                    sense = _RELATIONS[toks[pos].text]
                    pos += 1
                    rhs, pos = self._signed_number(toks, pos)
                    rows.append((rname, expr, sense, rhs))
            elif key == "bounds":
                for line_toks in _split_lines(toks):
                    self._bound(line_toks, bounds, bound_order, note)
            elif key == "binary":
                for t in toks:
                    if t.kind == "eol":
                        continue
                    if t.kind != "name":
                        raise LpParseError(f"expected a variable name, got {t.text!r}", t.line, t.col)
                    note(t.text)
                    binaries.append(t.text)
            elif key == "general":
                t = toks[0] if toks else _Tok("", "", 1, 1)
                raise LpParseError("general integer variables are not supported", t.line, t.col)
        if not has_objective:
            raise LpParseError("missing objective section", 1, 1)

        order = [n for n in bound_order] + [n for n in names if n not in bounds]
        binset = set(binaries)
        model = MipModel()
        for n in order:
            if n in binset:
                lb, ub = bounds.get(n, [0.0, 1.0])
                lb, ub = max(lb, 0.0), min(ub, 1.0)
                model.add_var(n, BINARY, lb, ub)
            else:
                lb, ub = bounds.get(n, [0.0, math.inf])
                model.add_var(n, CONTINUOUS, lb, ub)
        model.set_objective({model.index_of(n): a for n, a in objective.items()})
        for r, (rname, expr, sense, rhs) in enumerate(rows):
            model.add_constraint({model.index_of(n): a for n, a in expr.items()}, sense, rhs,
                                 rname if rname is not None else f"R{r}")
        return model

    @staticmethod
    def _signed_number(toks, pos):
        sign = 1.0
        while pos < len(toks) and toks[pos].kind == "sign":
            if toks[pos].text == "-":
                sign = -sign
            pos += 1
        if pos >= len(toks) or toks[pos].kind != "num":
            t = toks[min(pos, len(toks) - 1)]
            raise LpParseError(f"expected a number, got {t.text!r}", t.line, t.col)
        return sign * _to_float(toks[pos]), pos + 1

    @staticmethod
    def _expr(toks, pos, note):
        expr: dict[str, float] = {}
        while pos < len(toks) and toks[pos].kind in ("sign", "num", "name"):
            sign = 1.0
            while pos < len(toks) and toks[pos].kind == "sign":
                if toks[pos].text == "-":
                    sign = -sign
                pos += 1
            coef = 1.0
            if pos < len(toks) and toks[pos].kind == "num":
                coef = _to_float(toks[pos])
                pos += 1
            if pos >= len(toks) or toks[pos].kind != "name":
                t = toks[min(pos, len(toks) - 1)]
                raise LpParseError(f"expected a variable name, got {t.text!r}", t.line, t.col)
            name = toks[pos].text
            pos += 1
            note(name)
            expr[name] = expr.get(name, 0.0) + sign * coef
        return expr, pos

    @staticmethod
    def _bound(toks, bounds, order, note):
        if not toks:
            return
        first = toks[0]

        def reg(name):
            if name not in bounds:
                bounds[name] = [0.0, math.inf]
                order.append(name)
            note(name)
            return bounds[name]

        # forms: x free | x REL num | num REL x | num REL x REL num
        kinds = [t.kind for t in toks]
        if kinds == ["name", "name"] and toks[1].text.lower() == "free":
            b = reg(toks[0].text)
            b[0], b[1] = -math.inf, math.inf
            return
        # collapse signed numbers
        items = []
        pos = 0
        while pos < len(toks):
            if toks[pos].kind in ("sign", "num"):
                v, pos = _Parser._signed_number(toks, pos)
                items.append(("num", v, toks[pos - 1]))
            else:
                items.append((toks[pos].kind, toks[pos].text, toks[pos]))
                pos += 1
        shape = [k for k, _, _ in items]
        if shape == ["name", "rel", "num"]:
            b = reg(items[0][1])
            _apply(b, _RELATIONS[items[1][1]], items[2][1], var_left=True)
        elif shape == ["num", "rel", "name"]:
            b = reg(items[2][1])
            _apply(b, _RELATIONS[items[1][1]], items[0][1], var_left=False)
        elif shape == ["num", "rel", "name", "rel", "num"]:
            b = reg(items[2][1])
            _apply(b, _RELATIONS[items[1][1]], items[0][1], var_left=False)
            _apply(b, _RELATIONS[items[3][1]], items[4][1], var_left=True)
        else:
            raise LpParseError("malformed bound", first.line, first.col)


def _apply(b, sense, value, var_left):
    if sense == "=":
        b[0] = b[1] = value
    elif (sense == "<=") == var_left:
        b[1] = value
    else:
        b[0] = value


def _split_lines(toks):
    line = []
    for t in toks:
        if t.kind == "eol":
            if line:
                yield line
            line = []
        else:
            line.append(t)
    if line:
        yield line


def import_lp(text: str) -> MipModel:
    """Parse LP-format text (maximization, binaries and continuous variables)."""
    model = _Parser(text).parse()
    header = re.match(r"\\\s*" + re.escape(MODEL_SCHEMA) + r"\s+(\S+)", text)
    if header:
        model.name = header.group(1)
    return model


def wdp_rounding_heuristic(model: MipModel, nets: Sequence[ValueNetwork]):
    """Primal heuristic for ``solve_mip``: round the LP allocation greedily, complete by forward pass."""
    n, m = len(nets), nets[0].n_items
    ids = np.array([[model.index_of(a_name(i, j)) for j in range(m)] for i in range(n)])
    tried: set[tuple[int, ...]] = set()
    layout = _WdpLayout(model, nets)

    def heuristic(x_lp, lb, ub):
        a = np.asarray(x_lp)[ids]
        masks = [0] * n
        taken = set()
        # honour branching fixings first, then greedily place the largest fractions
        for i in range(n):
            for j in range(m):
                if lb[ids[i, j]] > 0.5:
                    masks[i] |= 1 << j
                    taken.add(j)
        order = sorted(((-a[i, j], i, j) for i in range(n) for j in range(m)))
        for neg, i, j in order:
            if -neg < 0.5 or j in taken or ub[ids[i, j]] < 0.5:
                continue
            masks[i] |= 1 << j
            taken.add(j)
        key = tuple(masks)
        if key in tried:
            return None
        tried.add(key)
        return wdp_completion(model, nets, masks, layout)

    return heuristic


def wdp_propagator(model: MipModel):
    """Node bound tightening for ``solve_mip`` on an encoded WDP.

    Re-runs interval arithmetic through every ``e_`` row with the node's
    current bounds, capping each ``z`` at ``max(0, hi)`` and each ``s`` at
    ``max(0, -lo)``. Valid because at any integer point ``z`` and ``s`` are
    the positive and negative parts of the preactivation.
    """
    indptr = [0]
    indices: list[int] = []
    weights: list[float] = []
    bias, z_ids, s_ids = [], [], []
    for con in model.constraints:
        if not (con.name and con.name.startswith("e_")):
            continue
        suffix = con.name[2:]
        z = model.index_of("z_" + suffix)
        s = model.index_of("s_" + suffix) if model.has_var("s_" + suffix) else -1
        for v, coef in sorted(con.coeffs.items()):
            if v != z and v != s:
                indices.append(v)
                weights.append(-coef)
        indptr.append(len(indices))
        bias.append(con.rhs)
        z_ids.append(z)
        s_ids.append(s)
    args = (np.asarray(indptr, dtype=np.int64), np.asarray(indices, dtype=np.int64),
            np.asarray(weights, dtype=np.float64), np.asarray(bias, dtype=np.float64),
            np.asarray(z_ids, dtype=np.int64), np.asarray(s_ids, dtype=np.int64))

    def propagate(lb, ub):
        return _kernels.relu_tighten(*args, lb, ub)

    return propagate


def wdp_branch_priority(model: MipModel) -> list[int]:
    """Branch on allocation variables before node indicators."""
    return [1 if v.name.startswith("a_") else 0 for v in model.variables]


def wdp_solver_hooks(model: MipModel, nets: Sequence[ValueNetwork]) -> dict:
    """Keyword arguments that let ``solve_mip`` exploit the WDP encoding."""
    return {
        "heuristic": wdp_rounding_heuristic(model, nets),
        "propagator": wdp_propagator(model),
        "branch_priority": wdp_branch_priority(model),
    }
