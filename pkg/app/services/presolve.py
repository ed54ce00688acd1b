"""
Rail Rescheduling Engine - Presolve
Fixes order flags and depot draws that are implied before any search,
and completes partial integer assignments.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from app.exceptions import ConsistencyError
from app.models.domain import ServiceDecision, ServiceKey, TimetableTemplate, XiKey
from app.models.problem import OPTIMAL, Row, SolveResult, StandardFormProblem, XiEntry
from app.models.schemas import SolverConfig
from app.services.mip_core import solve_fixed
from app.services.resched_model import implied_flags, slot_assignment

logger = logging.getLogger(__name__)

RULE_ORDER_WINDOW = "5.1"
RULE_ORDER_MONOTONE = "5.2"
RULE_NO_DEPOT = "5.3"
RULE_DEPARTED = "5.4"


@dataclass
class PresolveMask:
    """Integer fixings found before the solve; free columns are what a search still decides."""
    fixed_xi: Dict[XiKey, int] = field(default_factory=dict)
    fixed_y: Dict[ServiceKey, int] = field(default_factory=dict)
    free_integer_cols: List[int] = field(default_factory=list)
    rules: Dict[int, str] = field(default_factory=dict)
    monotone_rows: List[Row] = field(default_factory=list)

    @property
    def n_fixed(self) -> int:
        return len(self.fixed_xi) + len(self.fixed_y)


def nominal_order(entry: XiEntry) -> int:
    """The order rule evaluated at predetermined departures."""
    return int(entry.d_pre >= entry.d_pre_other + entry.t_roll)


def apply_presolve(
    problem: StandardFormProblem,
    tt: TimetableTemplate,
    t_now: float,
    past: Optional[Dict[ServiceKey, ServiceDecision]] = None,
) -> PresolveMask:
    """
    Fix order flags and depot draws whose values are implied.

    Args:
        problem: Built window
        tt: Timetable of the window
        t_now: Current time, s
        past: Decisions already applied to the plant

    Returns:
        PresolveMask with the rule that fixed each column
    """
    past = past or {}
    mask = PresolveMask()
    by_key = {e.key: e for e in problem.xi_entries}

    for e in problem.xi_entries:
        if e.d_pre >= e.d_pre_other_next + e.t_roll:
            _fix_xi(mask, e, 1, RULE_ORDER_WINDOW)
        elif e.d_pre_next <= e.d_pre_other + e.t_roll:
            _fix_xi(mask, e, 0, RULE_ORDER_WINDOW)
    _propagate_monotone(mask, by_key)

    for key, slot in sorted(problem.slots.items()):
        if not slot.adjustable:
            _fix_y(problem, mask, key, 0, RULE_NO_DEPOT)
            continue
        departed = past.get(key)
        if departed is not None:
            if not problem.lb[slot.y] <= departed.y <= problem.ub[slot.y]:
                raise ConsistencyError(
                    f"Applied y={departed.y} of {key} outside [{problem.lb[slot.y]}, {problem.ub[slot.y]}]"
                )
            _fix_y(problem, mask, key, departed.y, RULE_DEPARTED)
        elif tt.d_pre_at(key[0], key[1] + 1) - 1 < t_now:
            _fix_y(problem, mask, key, 0, RULE_DEPARTED)

    mask.monotone_rows = _monotone_rows(problem, mask, by_key)
    fixed_cols = set(mask.rules)
    mask.free_integer_cols = [j for j in problem.primary_integer_cols if j not in fixed_cols]
    logger.debug(
        f"Presolve fixed {len(mask.fixed_xi)} order flags and {len(mask.fixed_y)} draws; "
        f"{len(mask.free_integer_cols)} integers free"
    )
    return mask


def _fix_xi(mask: PresolveMask, e: XiEntry, value: int, rule: str) -> bool:
    if e.key in mask.fixed_xi:
        if mask.fixed_xi[e.key] != value:
            raise ConsistencyError(f"Order flag {e.key} implied both 0 and 1")
        return False
    mask.fixed_xi[e.key] = value
    mask.rules[e.xi] = rule
    return True


def _fix_y(problem: StandardFormProblem, mask: PresolveMask, key: ServiceKey, value: int, rule: str) -> None:
    mask.fixed_y[key] = value
    mask.rules[problem.slots[key].y] = rule


def _neighbours(key: XiKey) -> Tuple[XiKey, XiKey]:
    """Flags implied equal or larger: the next own departure, the previous other departure."""
    p, k, q, j = key
    return (p, k + 1, q, j), (p, k, q, j - 1)


def _propagate_monotone(mask: PresolveMask, by_key: Dict[XiKey, XiEntry]) -> None:
    """xi is non-decreasing in the own index and non-increasing in the other index."""
    changed = True
    while changed:
        changed = False
        for key, value in sorted(mask.fixed_xi.items()):
            p, k, q, j = key
            if value == 1:
                implied = [(p, k + 1, q, j), (p, k, q, j - 1)]
            else:
                implied = [(p, k - 1, q, j), (p, k, q, j + 1)]
            for other in implied:
                if other in by_key and other not in mask.fixed_xi:
                    changed |= _fix_xi(mask, by_key[other], value, RULE_ORDER_MONOTONE)


def _monotone_rows(problem: StandardFormProblem, mask: PresolveMask, by_key: Dict[XiKey, XiEntry]) -> List[Row]:
    rows = []
    for key, e in sorted(by_key.items()):
        if key in mask.fixed_xi:
            continue
        for other in _neighbours(key):
            if other in by_key and other not in mask.fixed_xi:
                rows.append(Row(
                    cols=tuple(sorted((e.xi, by_key[other].xi))),
                    coefs=(1.0, -1.0) if e.xi < by_key[other].xi else (-1.0, 1.0),
                    rhs=0.0,
                    sense="le",
                    tag=f"order_monotone:{e.xi}:{by_key[other].xi}",
                ))
    return rows


# ============ Masks & Assignments ============

def mask_assignment(problem: StandardFormProblem, mask: PresolveMask) -> Dict[int, float]:
    """Column values fixed by a mask, including the flags implied by fixed y."""
    assignment: Dict[int, float] = {}
    by_key = {e.key: e for e in problem.xi_entries}
    for key, value in mask.fixed_xi.items():
        assignment[by_key[key].xi] = float(value)
    for key, value in mask.fixed_y.items():
        assignment.update(slot_assignment(problem, key, value))
    return assignment


def apply_mask(problem: StandardFormProblem, mask: PresolveMask) -> StandardFormProblem:
    """Problem with the mask's fixings as bounds and the retained monotonicity rows."""
    reduced = problem.with_rows(mask.monotone_rows) if mask.monotone_rows else problem
    return reduced.with_fixed(mask_assignment(problem, mask))


def residual_xi_policy(problem: StandardFormProblem, mask: PresolveMask,
                       tt: Optional[TimetableTemplate] = None) -> Dict[XiKey, int]:
    """Every order flag: fixed by the mask, or the order rule evaluated at predetermined times."""
    return {
        e.key: mask.fixed_xi[e.key] if e.key in mask.fixed_xi else nominal_order(e)
        for e in problem.xi_entries
    }


def complete_assignment(problem: StandardFormProblem, mask: PresolveMask,
                        y_values: Dict[ServiceKey, int]) -> Dict[int, float]:
    """Full integer assignment from chosen y values; mask fixings take precedence."""
    assignment: Dict[int, float] = {}
    for key, slot in problem.slots.items():
        y = mask.fixed_y.get(key, y_values.get(key, 0))
        assignment[slot.y] = float(y)
    xi = residual_xi_policy(problem, mask)
    for e in problem.xi_entries:
        assignment[e.xi] = float(xi[e.key])
    return implied_flags(problem, assignment)


@dataclass
class Reconciled:
    result: SolveResult
    assignment: Dict[int, float]
    flips: int = 0


def reconcile_xi(
    problem: StandardFormProblem,
    assignment: Dict[int, float],
    config: SolverConfig,
    mask: Optional[PresolveMask] = None,
) -> Optional[Reconciled]:
    """
    Fixed-integer LP with one repair of residual order flags.

    If the LP with the nominal order flags is infeasible, the residual flags are
    relaxed, the order rule is evaluated at the relaxed departures, disagreeing
    flags are flipped and the LP is solved once more.

    Returns:
        Reconciled result, or None when the repaired assignment is still infeasible
    """
    mask = mask or PresolveMask()
    target = apply_mask(problem, mask) if mask.monotone_rows else problem
    res = solve_fixed(target, assignment, config)
    if res.status == OPTIMAL:
        return Reconciled(result=res, assignment=assignment)

    residual = [e for e in problem.xi_entries if e.key not in mask.fixed_xi]
    if not residual:
        return None
    relaxed = {j: v for j, v in assignment.items() if j not in {e.xi for e in residual}}
    relaxed_res = solve_fixed(target, relaxed, config)
    if relaxed_res.status != OPTIMAL:
        return None
    x = relaxed_res.primal
    repaired = dict(assignment)
    flips = 0
    for e in residual:
        rule = int(x[e.d_col] - x[e.d_other_col] >= e.t_roll - config.feas_tol)
        if int(round(assignment.get(e.xi, rule))) != rule:
            repaired[e.xi] = float(rule)
            flips += 1
    if flips == 0:
        return None
    res = solve_fixed(target, repaired, config)
    if res.status != OPTIMAL:
        return None
    logger.debug(f"Order flags repaired with {flips} flip(s)")
    return Reconciled(result=res, assignment=repaired, flips=flips)


def format_mask(problem: StandardFormProblem, mask: PresolveMask) -> str:
    """One line per fixed column with the rule that fixed it."""
    assignment = mask_assignment(problem, mask)
    lines = []
    for j in sorted(mask.rules):
        lines.append(f"{problem.columns[j].name} = {int(round(assignment[j]))} [{mask.rules[j]}]")
    return "\n".join(lines) + ("\n" if lines else "")
