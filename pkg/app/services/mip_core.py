"""
Rail Rescheduling Engine - MIP Core
LP relaxations, best-bound branch-and-bound, fixed-integer nonlinear polish,
the MINLP pipeline and a brute-force enumeration oracle.
"""
import heapq
import itertools
import logging
import time
from typing import Dict, List, Optional

import numpy as np

from app.exceptions import InfeasibleError, OracleCapError
from app.models.problem import (
    FEASIBLE_TIME_LIMIT,
    INFEASIBLE,
    INFEASIBLE_UNPROVEN,
    OPTIMAL,
    UNBOUNDED,
    SolveResult,
    SolveStats,
    StandardFormProblem,
)
from app.models.schemas import SolverConfig
from app.services.lp_solver import LinearProgram, solve_linear_program
from app.services.resched_model import implied_flags

logger = logging.getLogger(__name__)


def relative_gap(incumbent: float, bound: float) -> float:
    if not np.isfinite(incumbent):
        return float("inf")
    return max(0.0, incumbent - bound) / (abs(incumbent) + 1e-10)


# ============ LP ============

def solve_lp(problem: StandardFormProblem, config: SolverConfig,
             cost: Optional[np.ndarray] = None) -> SolveResult:
    """Solve the continuous relaxation with the surrogate cost, or with `cost` when given."""
    lp = LinearProgram.from_problem(problem, cost=cost, const=0.0 if cost is not None else None)
    result = solve_linear_program(lp, engine=config.lp_engine, feas_tol=config.feas_tol,
                                  max_iter=config.simplex_max_iter)
    result.stats.subproblems = 1
    return result


def solve_fixed(problem: StandardFormProblem, assignment: Dict[int, float], config: SolverConfig,
                cost: Optional[np.ndarray] = None) -> SolveResult:
    """LP with the given integer columns fixed; out-of-bound values are reported infeasible."""
    for j, v in assignment.items():
        if v < problem.lb[j] - config.int_tol or v > problem.ub[j] + config.int_tol:
            stats = SolveStats(diagnostics=[f"{problem.columns[j].name}={v} outside its bounds"])
            return SolveResult(status=INFEASIBLE, stats=stats)
    return solve_lp(problem.with_fixed(assignment), config, cost=cost)


def _round_integers(problem: StandardFormProblem, x: np.ndarray) -> Dict[int, float]:
    return {int(j): float(np.round(x[j])) for j in problem.integer_cols}


# ============ Branch and Bound ============

class BranchAndBound:
    """
    Best-bound branch-and-bound over the LP relaxation of the surrogate objective.

    Branches on the most fractional integer column (lowest index on ties);
    the open node with the smallest bound is processed next, FIFO on ties.
    """

    def __init__(self, problem: StandardFormProblem, config: SolverConfig):
        self.problem = problem
        self.config = config
        self.int_cols = problem.integer_cols
        self.stats = SolveStats()
        self.incumbent: Optional[np.ndarray] = None
        self.incumbent_obj = float("inf")
        self._created = 0

    def solve(self, warm_start: Optional[Dict[int, float]] = None) -> SolveResult:
        t0 = time.perf_counter()
        if warm_start:
            self._try_warm_start(warm_start)

        root = self._node_lp(self.problem.lb, self.problem.ub)
        if root.status == INFEASIBLE:
            return self._finish(t0, INFEASIBLE, bound=float("inf"))
        if root.status == UNBOUNDED:
            return self._finish(t0, UNBOUNDED, bound=-float("inf"))

        heap = [(root.objective, self._next_id(), self.problem.lb.copy(), self.problem.ub.copy(), root.primal)]
        best_bound = root.objective
        ref_time, ref_gap = time.perf_counter(), relative_gap(self.incumbent_obj, best_bound)
        stopped = False

        while heap:
            now = time.perf_counter()
            if now - t0 >= self.config.time_limit_s or self.stats.nodes >= self.config.max_nodes:
                stopped = True
                break
            best_bound = max(best_bound, heap[0][0])
            gap = relative_gap(self.incumbent_obj, best_bound)
            if ref_gap - gap >= self.config.early_term_min_gap_drop or not np.isfinite(ref_gap):
                ref_time, ref_gap = now, gap
            elif self.incumbent is not None and now - ref_time >= self.config.early_term_window_s:
                logger.warning(
                    f"Early termination: gap {gap:.4f} did not drop by "
                    f"{self.config.early_term_min_gap_drop} in {self.config.early_term_window_s} s"
                )
                self.stats.early_terminated = True
                stopped = True
                break

            bound, _, lb, ub, x = heapq.heappop(heap)
            self.stats.nodes += 1
            self.stats.bound_trace.append(best_bound)
            if self._prunable(bound):
                continue
            j = self._branch_column(x)
            if j is None:
                self._consider_incumbent(x)
                continue
            v = x[j]
            for child_lb, child_ub in self._children(lb, ub, j, v):
                res = self._node_lp(child_lb, child_ub)
                if res.status != OPTIMAL or self._prunable(res.objective):
                    continue
                heapq.heappush(heap, (res.objective, self._next_id(), child_lb, child_ub, res.primal))
            logger.debug(
                f"B&B node {self.stats.nodes}: bound {bound:.6g}, incumbent {self.incumbent_obj:.6g}, "
                f"open {len(heap)}"
            )

        if stopped and heap:
            best_bound = max(best_bound, min(node[0] for node in heap))
        else:
            best_bound = self.incumbent_obj if self.incumbent is not None else best_bound
        if self.incumbent is None:
            status = INFEASIBLE_UNPROVEN if stopped else INFEASIBLE
        else:
            status = FEASIBLE_TIME_LIMIT if stopped else OPTIMAL
        return self._finish(t0, status, bound=best_bound)

    def _next_id(self) -> int:
        self._created += 1
        return self._created

    def _node_lp(self, lb: np.ndarray, ub: np.ndarray) -> SolveResult:
        res = solve_lp(self.problem.with_bounds(lb, ub), self.config)
        self.stats.subproblems += 1
        self.stats.simplex_iterations += res.stats.simplex_iterations
        return res

    def _prunable(self, bound: float) -> bool:
        if self.incumbent is None:
            return False
        return bound >= self.incumbent_obj - self.config.gap_tol * (abs(self.incumbent_obj) + 1e-10)

    def _branch_column(self, x: np.ndarray) -> Optional[int]:
        if self.int_cols.size == 0:
            return None
        frac = np.abs(x[self.int_cols] - np.round(x[self.int_cols]))
        if frac.max() <= self.config.int_tol:
            return None
        # argmax returns the first maximum, i.e. the lowest column index
        return int(self.int_cols[int(np.argmax(frac))])

    @staticmethod
    def _children(lb, ub, j, v):
        down_ub = ub.copy()
        down_ub[j] = np.floor(v)
        up_lb = lb.copy()
        up_lb[j] = np.ceil(v)
        return [(lb.copy(), down_ub), (up_lb, ub.copy())]

    def _consider_incumbent(self, x: np.ndarray) -> bool:
        """Round integers, fix them and re-solve so the incumbent is exactly integral."""
        fixed = _round_integers(self.problem, x)
        res = solve_fixed(self.problem, fixed, self.config)
        self.stats.subproblems += 1
        if res.status != OPTIMAL or res.objective >= self.incumbent_obj:
            return False
        self.incumbent = res.primal
        self.incumbent_obj = res.objective
        self.stats.objective_trace.append(res.objective)
        logger.debug(f"New incumbent {res.objective:.6g} at node {self.stats.nodes}")
        return True

    def _try_warm_start(self, warm_start: Dict[int, float]) -> None:
        fixed = implied_flags(self.problem, warm_start)
        res = solve_fixed(self.problem, fixed, self.config)
        self.stats.subproblems += 1
        if res.status == OPTIMAL and not self.problem.integrality_violations(res.primal, self.config.int_tol):
            self.incumbent = res.primal
            self.incumbent_obj = res.objective
            self.stats.objective_trace.append(res.objective)
            return
        message = f"Warm start rejected: fixed LP status {res.status}"
        logger.warning(message)
        self.stats.diagnostics.append(message)

    def _finish(self, t0: float, status: str, bound: float) -> SolveResult:
        self.stats.wall_time_s = time.perf_counter() - t0
        if self.incumbent is None:
            return SolveResult(status=status, stats=self.stats)
        return SolveResult(
            status=status,
            primal=self.incumbent.copy(),
            objective=self.incumbent_obj,
            gap=relative_gap(self.incumbent_obj, bound),
            stats=self.stats,
        )


def solve_milp(problem: StandardFormProblem, config: SolverConfig,
               warm_start: Optional[Dict[int, float]] = None) -> SolveResult:
    """Mixed-integer solve of the surrogate objective."""
    result = BranchAndBound(problem, config).solve(warm_start)
    logger.debug(
        f"MILP {result.status}: objective {result.objective:.6g}, gap {result.gap:.3g}, "
        f"{result.stats.nodes} nodes, {result.stats.wall_time_s:.2f} s"
    )
    return result


# ============ Nonlinear Polish ============

def polish_nlp(problem: StandardFormProblem, fixed: Dict[int, float], start: np.ndarray,
               config: SolverConfig) -> SolveResult:
    """
    Sequential linearization of the true objective with the integers fixed.

    Each iteration minimizes the gradient of the true objective over the
    fixed-integer polytope intersected with a box of radius delta around the
    current departures. A step is kept only when the true objective strictly
    decreases; otherwise delta is halved.

    Args:
        problem: Problem carrying the bilinear objective
        fixed: Integer column values
        start: Starting point; projected onto the polytope when infeasible
        config: Solver limits and tolerances

    Returns:
        SolveResult whose objective is the true objective and whose
        stats.objective_trace is non-increasing
    """
    t0 = time.perf_counter()
    stats = SolveStats()
    base = problem.with_fixed(fixed)
    x = np.clip(np.asarray(start, dtype=float).copy(), base.lb, base.ub)
    if base.row_violations(x, config.feas_tol * 10):
        projected = solve_lp(base, config, cost=np.zeros(base.n_cols))
        stats.subproblems += 1
        if projected.status != OPTIMAL:
            raise InfeasibleError("Polish start is infeasible and the fixed-integer polytope is empty")
        logger.debug("Polish start projected onto the fixed-integer polytope")
        x = projected.primal

    d_cols = np.array(problem.cols_with_role("d"), dtype=int)
    f = base.true_objective(x)
    stats.objective_trace.append(f)
    delta = config.polish_trust_radius
    for _ in range(config.polish_max_iter):
        if time.perf_counter() - t0 >= config.time_limit_s:
            break
        grad = base.true_gradient(x)
        lb, ub = base.lb.copy(), base.ub.copy()
        if d_cols.size:
            lb[d_cols] = np.maximum(lb[d_cols], x[d_cols] - delta)
            ub[d_cols] = np.minimum(ub[d_cols], x[d_cols] + delta)
        res = solve_lp(base.with_bounds(lb, ub), config, cost=grad)
        stats.subproblems += 1
        stats.simplex_iterations += res.stats.simplex_iterations
        if res.status != OPTIMAL:
            break
        x_new = res.primal
        step = float(np.max(np.abs(x_new[d_cols] - x[d_cols]))) if d_cols.size else 0.0
        f_new = base.true_objective(x_new)
        if f_new < f - 1e-12 * max(1.0, abs(f)):
            x, f = x_new, f_new
            stats.objective_trace.append(f)
            if step < config.polish_min_step:
                break
        else:
            delta /= 2.0
            if delta < config.polish_min_step:
                break
    stats.wall_time_s = time.perf_counter() - t0
    return SolveResult(status=OPTIMAL, primal=x, objective=f, gap=0.0, stats=stats)


# ============ MINLP Pipeline ============

def solve_minlp(problem: StandardFormProblem, config: SolverConfig,
                warm_start: Optional[Dict[int, float]] = None) -> SolveResult:
    """MILP on the surrogate, polish with integers fixed, then a 1-opt search over y."""
    t0 = time.perf_counter()
    milp = solve_milp(problem, config, warm_start)
    if not milp.has_solution:
        return milp
    stats = milp.stats
    ints = _round_integers(problem, milp.primal)
    best = polish_nlp(problem, ints, milp.primal, config)
    stats.subproblems += best.stats.subproblems
    best_ints = ints

    for key, slot in sorted(problem.slots.items()):
        if not slot.adjustable or problem.lb[slot.y] == problem.ub[slot.y]:
            continue
        for step in (-1, 1):
            if time.perf_counter() - t0 >= config.time_limit_s:
                break
            y = best_ints[slot.y] + step
            if y < problem.lb[slot.y] or y > problem.ub[slot.y]:
                continue
            cand = implied_flags(problem, {**best_ints, slot.y: y})
            res = solve_fixed(problem, _free_implied(problem, cand), config)
            stats.subproblems += 1
            if not res.has_solution:
                continue
            cand = _round_integers(problem, res.primal)
            pol = polish_nlp(problem, cand, res.primal, config)
            stats.subproblems += pol.stats.subproblems
            if pol.objective < best.objective - config.gap_tol * (abs(best.objective) + 1e-10):
                best, best_ints = pol, cand

    stats.objective_trace.append(best.objective)
    stats.wall_time_s = time.perf_counter() - t0
    return SolveResult(status=milp.status, primal=best.primal, objective=best.objective,
                       gap=milp.gap, stats=stats)


def _free_implied(problem: StandardFormProblem, assignment: Dict[int, float]) -> Dict[int, float]:
    """Drop composition columns so they follow the fixed y values."""
    implied = set(problem.cols_with_role("l"))
    return {j: v for j, v in assignment.items() if j not in implied}


# ============ Oracle ============

def enumeration_columns(problem: StandardFormProblem) -> List[int]:
    """Integer columns an exhaustive search must try: y and xi, or every integer when none are tagged."""
    cols = problem.primary_integer_cols if (problem.slots or problem.xi_entries) else list(problem.integer_cols)
    return [j for j in cols if problem.ub[j] > problem.lb[j]]


def brute_force_oracle(problem: StandardFormProblem, config: SolverConfig,
                       domain: Optional[Dict[int, List[int]]] = None) -> SolveResult:
    """
    Enumerate every assignment of the free integer columns and solve each continuous subproblem.

    Args:
        problem: Linear (surrogate) problem
        config: Tolerances and the column cap
        domain: Values to try per column; the column's integer range when omitted

    Returns:
        Best assignment's LP solution; stats.subproblems counts the solves
    """
    t0 = time.perf_counter()
    cols = sorted(domain) if domain is not None else enumeration_columns(problem)
    if len(cols) > config.oracle_cap:
        raise OracleCapError(f"{len(cols)} integer columns exceed the oracle cap of {config.oracle_cap}")
    values = [
        domain[j] if domain is not None else list(range(int(problem.lb[j]), int(problem.ub[j]) + 1))
        for j in cols
    ]
    stats = SolveStats()
    best: Optional[SolveResult] = None
    for combo in itertools.product(*values):
        assignment = implied_flags(problem, dict(zip(cols, map(float, combo))))
        res = solve_fixed(problem, assignment, config)
        stats.subproblems += 1
        stats.simplex_iterations += res.stats.simplex_iterations
        if res.status != OPTIMAL:
            continue
        if problem.integrality_violations(res.primal, config.int_tol):
            res = solve_fixed(problem, _round_integers(problem, res.primal), config)
            if res.status != OPTIMAL:
                continue
        if best is None or res.objective < best.objective - 1e-12:
            best = res
    stats.wall_time_s = time.perf_counter() - t0
    if best is None:
        return SolveResult(status=INFEASIBLE, stats=stats)
    return SolveResult(status=OPTIMAL, primal=best.primal, objective=best.objective, gap=0.0, stats=stats)
