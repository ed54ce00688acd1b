"""
Rail Rescheduling Engine - Standard Form Problem
Column/row storage of a windowed rescheduling problem and solver results.
"""
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import sparse

from app.models.domain import ServiceKey, XiKey

CONTINUOUS = "continuous"
INTEGER = "integer"
BINARY = "binary"

NONLINEAR = "nonlinear"
LINEARIZED = "linearized"


@dataclass(frozen=True)
class Column:
    name: str
    kind: str
    lb: float
    ub: float
    role: str
    key: Tuple = ()


@dataclass(frozen=True)
class Row:
    """Sparse linear row: sum(coef * x[col]) (= or <=) rhs."""
    cols: Tuple[int, ...]
    coefs: Tuple[float, ...]
    rhs: float
    sense: str
    tag: str

    def activity(self, x: np.ndarray) -> float:
        return float(sum(c * x[j] for j, c in zip(self.cols, self.coefs)))

    def violation(self, x: np.ndarray) -> float:
        act = self.activity(x)
        if self.sense == "eq":
            return abs(act - self.rhs)
        return max(0.0, act - self.rhs)


@dataclass(frozen=True)
class AffineExpr:
    cols: Tuple[int, ...]
    coefs: Tuple[float, ...]
    const: float = 0.0

    def value(self, x: np.ndarray) -> float:
        return self.const + float(sum(c * x[j] for j, c in zip(self.cols, self.coefs)))


@dataclass(frozen=True)
class BilinearTerm:
    """coef * left(x) * right(x)"""
    coef: float
    left: AffineExpr
    right: AffineExpr


@dataclass(frozen=True)
class BigMConstants:
    y_max: int
    o_max: float
    o_min: float
    epsilon: float


@dataclass(frozen=True)
class SlotCols:
    """Composition-change columns of one service."""
    key: ServiceKey
    y: int
    o: int
    gamma: int
    eta: int
    adjustable: bool = True


@dataclass(frozen=True)
class XiEntry:
    """Departure-order flag between two sibling depot services."""
    key: XiKey
    xi: int
    w: int
    y_other: int
    d_col: int
    d_other_col: int
    d_pre: int
    d_pre_next: int
    d_pre_other: int
    d_pre_other_next: int
    t_roll: float
    m_a: float
    M_a: float


@dataclass
class StandardFormProblem:
    """Compact hybrid problem: columns with kinds and bounds, sparse rows, two objectives.

    `mode` picks which objective `objective_value` reports; the surrogate cost
    row `c_lin` is always what linear solvers minimize.
    """
    columns: List[Column]
    rows: List[Row]
    c_lin: np.ndarray
    const_lin: float
    c_quad: np.ndarray
    const_quad: float
    bilinear: List[BilinearTerm]
    mode: str
    big_m: BigMConstants
    slots: Dict[ServiceKey, SlotCols] = field(default_factory=dict)
    xi_entries: List[XiEntry] = field(default_factory=list)
    service_cols: Dict[ServiceKey, Dict[str, int]] = field(default_factory=dict)
    service_params: Dict[ServiceKey, Dict[str, float]] = field(default_factory=dict)
    window: Tuple[int, int] = (0, 0)
    lb: Optional[np.ndarray] = None
    ub: Optional[np.ndarray] = None
    _cache: Dict[str, object] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.lb is None:
            self.lb = np.array([c.lb for c in self.columns], dtype=float)
        if self.ub is None:
            self.ub = np.array([c.ub for c in self.columns], dtype=float)

    # ---- layout ----

    @property
    def n_cols(self) -> int:
        return len(self.columns)

    @property
    def var_index(self) -> Dict[str, int]:
        if "var_index" not in self._cache:
            self._cache["var_index"] = {c.name: j for j, c in enumerate(self.columns)}
        return self._cache["var_index"]

    def col(self, name: str) -> int:
        return self.var_index[name]

    @property
    def integer_cols(self) -> np.ndarray:
        return np.array([j for j, c in enumerate(self.columns) if c.kind != CONTINUOUS], dtype=int)

    @property
    def primary_integer_cols(self) -> List[int]:
        """y and xi columns; every other integer follows from them."""
        cols = [s.y for s in self.slots.values()]
        cols += [e.xi for e in self.xi_entries]
        return sorted(cols)

    def cols_with_role(self, role: str) -> List[int]:
        return [j for j, c in enumerate(self.columns) if c.role == role]

    # ---- rows ----

    def _matrices(self):
        if "matrices" not in self._cache:
            eq = [r for r in self.rows if r.sense == "eq"]
            ub = [r for r in self.rows if r.sense != "eq"]
            self._cache["matrices"] = (
                _stack(eq, self.n_cols), np.array([r.rhs for r in eq], dtype=float),
                _stack(ub, self.n_cols), np.array([r.rhs for r in ub], dtype=float),
            )
        return self._cache["matrices"]

    @property
    def A_eq(self) -> sparse.csr_matrix:
        return self._matrices()[0]

    @property
    def b_eq(self) -> np.ndarray:
        return self._matrices()[1]

    @property
    def A_ub(self) -> sparse.csr_matrix:
        return self._matrices()[2]

    @property
    def b_ub(self) -> np.ndarray:
        return self._matrices()[3]

    def rows_tagged(self, prefix: str) -> List[Row]:
        return [r for r in self.rows if r.tag.startswith(prefix)]

    # ---- derived problems ----

    def with_bounds(self, lb: np.ndarray, ub: np.ndarray) -> "StandardFormProblem":
        shared = {k: v for k, v in self._cache.items()}
        return replace(self, lb=np.asarray(lb, dtype=float).copy(),
                       ub=np.asarray(ub, dtype=float).copy(), _cache=shared)

    def with_fixed(self, assignment: Dict[int, float]) -> "StandardFormProblem":
        lb, ub = self.lb.copy(), self.ub.copy()
        for j, v in assignment.items():
            lb[j] = ub[j] = v
        return self.with_bounds(lb, ub)

    def with_rows(self, extra: List[Row]) -> "StandardFormProblem":
        return replace(self, rows=list(self.rows) + list(extra),
                       lb=self.lb.copy(), ub=self.ub.copy(), _cache={})

    def with_mode(self, mode: str) -> "StandardFormProblem":
        shared = {k: v for k, v in self._cache.items()}
        return replace(self, mode=mode, lb=self.lb.copy(), ub=self.ub.copy(), _cache=shared)

    # ---- objectives ----

    def surrogate_objective(self, x: np.ndarray) -> float:
        return float(self.c_lin @ x) + self.const_lin

    def true_objective(self, x: np.ndarray) -> float:
        total = float(self.c_quad @ x) + self.const_quad
        for term in self.bilinear:
            total += term.coef * term.left.value(x) * term.right.value(x)
        return total

    def true_gradient(self, x: np.ndarray) -> np.ndarray:
        g = self.c_quad.copy()
        for term in self.bilinear:
            lv, rv = term.left.value(x), term.right.value(x)
            for j, c in zip(term.left.cols, term.left.coefs):
                g[j] += term.coef * c * rv
            for j, c in zip(term.right.cols, term.right.coefs):
                g[j] += term.coef * c * lv
        return g

    def objective_value(self, x: np.ndarray) -> float:
        if self.mode == NONLINEAR:
            return self.true_objective(x)
        return self.surrogate_objective(x)

    # ---- checks ----

    def row_violations(self, x: np.ndarray, tol: float) -> List[Tuple[str, float]]:
        bad = [(r.tag, r.violation(x)) for r in self.rows]
        bad = [(t, v) for t, v in bad if v > tol]
        for j, c in enumerate(self.columns):
            if x[j] < self.lb[j] - tol or x[j] > self.ub[j] + tol:
                bad.append((f"bound:{c.name}", float(max(self.lb[j] - x[j], x[j] - self.ub[j]))))
        return bad

    def integrality_violations(self, x: np.ndarray, tol: float) -> List[int]:
        cols = self.integer_cols
        if cols.size == 0:
            return []
        frac = np.abs(x[cols] - np.round(x[cols]))
        return [int(j) for j in cols[frac > tol]]


def _stack(rows: List[Row], n_cols: int) -> sparse.csr_matrix:
    data, ri, ci = [], [], []
    for i, r in enumerate(rows):
        ri.extend([i] * len(r.cols))
        ci.extend(r.cols)
        data.extend(r.coefs)
    return sparse.csr_matrix(
        (np.asarray(data, dtype=float), (np.asarray(ri, dtype=int), np.asarray(ci, dtype=int))),
        shape=(len(rows), n_cols),
    )


# ============ Results ============

OPTIMAL = "optimal"
FEASIBLE_TIME_LIMIT = "feasible_time_limit"
INFEASIBLE = "infeasible"
INFEASIBLE_UNPROVEN = "infeasible_unproven"
UNBOUNDED = "unbounded"


@dataclass
class SolveStats:
    nodes: int = 0
    simplex_iterations: int = 0
    wall_time_s: float = 0.0
    subproblems: int = 0
    early_terminated: bool = False
    bound_trace: List[float] = field(default_factory=list)
    objective_trace: List[float] = field(default_factory=list)
    diagnostics: List[str] = field(default_factory=list)


@dataclass
class SolveResult:
    status: str
    primal: Optional[np.ndarray] = None
    objective: float = float("inf")
    gap: float = float("inf")
    stats: SolveStats = field(default_factory=SolveStats)
    duals: Optional[np.ndarray] = None

    @property
    def has_solution(self) -> bool:
        return self.status in (OPTIMAL, FEASIBLE_TIME_LIMIT) and self.primal is not None
