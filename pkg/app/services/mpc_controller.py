"""
Rail Rescheduling Engine - MPC Controller
Rolling-horizon loop: build the window, obtain integers per strategy, solve the
continuous variables, apply the first step to the plant and shift.
"""
import logging
import time
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from app.config import get_settings
from app.exceptions import FallbackError, InfeasibleError, ParameterError, RailSchedError, RangeError
from app.models.domain import (
    DecisionVector,
    EpisodeLog,
    MpcState,
    ServiceDecision,
    ServiceKey,
    StepRecord,
    TimetableTemplate,
)
from app.models.problem import LINEARIZED, NONLINEAR, OPTIMAL, SolveResult, StandardFormProblem
from app.models.schemas import Network, ObjectiveWeights, SolverConfig, StrategyConfig
from app.services.mip_core import polish_nlp, solve_fixed, solve_milp, solve_minlp
from app.services.plant import Plant
from app.services.presolve import (
    PresolveMask,
    Reconciled,
    apply_mask,
    apply_presolve,
    complete_assignment,
    reconcile_xi,
)
from app.services.resched_model import (
    ProblemBuilder,
    check_assignment,
    decode_solution,
    eval_objective,
    implied_flags,
)
from app.storage import write_csv, write_yaml

logger = logging.getLogger(__name__)
settings = get_settings()

EPISODE_COLUMNS = [
    "kappa", "strategy", "objective", "solve_time_s", "gap_vs_benchmark", "fallback_used", "feasible",
    "feasible_pre", "window_objective", "n_fixed", "n_free", "flips",
]
SERVICE_COLUMNS = ["platform_id", "k", "d", "a", "l", "y", "r", "r_turn"]


# ============ Fallback ============

def lemma1_fallback(
    problem: StandardFormProblem,
    mask: PresolveMask,
    config: SolverConfig,
) -> Tuple[Dict[int, float], SolveResult]:
    """
    Keep every composition and let the order flags follow the departures.

    No depot is drawn from, so terminal services inherit the units their
    turnaround predecessor arrived with. The order flags are first relaxed,
    then set by the order rule at the relaxed departures and the LP is solved
    once more with everything fixed.

    Returns:
        (integer assignment, fixed-integer LP result)
    """
    fixed: Dict[int, float] = {}
    for key, slot in problem.slots.items():
        fixed[slot.y] = float(mask.fixed_y.get(key, 0))
    fixed = implied_flags(problem, fixed)

    relaxed = solve_fixed(problem, fixed, config)
    if relaxed.status != OPTIMAL:
        raise FallbackError(f"Keep-composition LP is {relaxed.status} in window {problem.window}")
    x = relaxed.primal
    for e in problem.xi_entries:
        f = x[e.d_col] - x[e.d_other_col] - e.t_roll
        fixed[e.xi] = float(mask.fixed_xi.get(e.key, int(f >= -config.feas_tol)))

    res = solve_fixed(problem, fixed, config)
    if res.status != OPTIMAL:
        raise FallbackError(f"Keep-composition assignment is {res.status} after fixing order flags")
    return fixed, res


# ============ Controller ============

class MpcController:
    """
    Closed-loop controller for one network, strategy and solver configuration.

    `policy` is the learned integer proposer of the learning strategies; it
    must provide `reset()` and `propose(state, problem, mask, config)`, the
    latter returning a reconciled assignment or None.
    """

    def __init__(
        self,
        net: Network,
        tt: TimetableTemplate,
        weights: ObjectiveWeights,
        strategy: StrategyConfig,
        solver: Optional[SolverConfig] = None,
        policy=None,
    ):
        if strategy.is_learning and policy is None:
            raise ParameterError(f"Strategy {strategy.kind} needs a trained ensemble")
        self.net = net
        self.tt = tt
        self.weights = weights
        self.strategy = strategy
        base = solver or SolverConfig.from_settings(settings)
        self.solver = base.model_copy(update={"time_limit_s": strategy.time_limit_s})
        self.policy = policy
        self.builder = ProblemBuilder(net, tt)
        self.plant = Plant(net, tt)
        self.mode = NONLINEAR if strategy.is_nonlinear else LINEARIZED

    def window(self, kappa: int) -> Tuple[int, int]:
        return kappa, min(self.strategy.horizon, self.tt.n_steps - kappa)

    def build_window(self, state: MpcState) -> Tuple[StandardFormProblem, PresolveMask]:
        """Window problem seeded with the realized state, and its presolve mask."""
        kappa = state.kappa
        if kappa >= self.tt.n_steps:
            raise RangeError(f"Step {kappa} is past the timetable's {self.tt.n_steps} steps")
        problem = self.builder.build(
            state.scenario.base, self.window(kappa), self.weights, mode=self.mode, start=state.window_start(),
        )
        mask = apply_presolve(problem, self.tt, float(self.tt.step_start(kappa)), state.applied)
        return problem, mask

    def step(self, state: MpcState) -> Tuple[MpcState, StepRecord, DecisionVector]:
        """
        One control step.

        Returns:
            (state of the next step, step record, window decisions)
        """
        problem, mask = self.build_window(state)
        t0 = time.perf_counter()
        res, fallback_used, feasible_pre, flips = self._dispatch(state, problem, mask)
        solve_time = time.perf_counter() - t0

        x = res.primal
        violations = check_assignment(problem, x)
        if violations:
            tag, amount = max(violations, key=lambda v: v[1])
            raise InfeasibleError(f"Step {state.kappa}: solution violates {tag} by {amount:.3g}")

        dv, _ = decode_solution(problem, x)
        decisions = {key: s for key, s in dv.services.items() if key[1] == state.kappa}
        nxt, realized = self.plant.advance(state, decisions)
        nxt.plan_y = {key: s.y for key, s in dv.services.items() if key[1] > state.kappa and key in problem.slots}
        nxt.plan_xi = {key: v for key, v in dv.xi.items() if key[1] > state.kappa and key[3] > state.kappa}

        applied_dv = DecisionVector(services=decisions)
        record = StepRecord(
            kappa=state.kappa,
            strategy=self.strategy.kind,
            objective=eval_objective(applied_dv, realized, self.weights, NONLINEAR, self.net, self.tt),
            window_objective=problem.true_objective(x),
            solve_time_s=solve_time,
            fallback_used=fallback_used,
            feasible_pre=feasible_pre,
            feasible=True,
            n_fixed=mask.n_fixed,
            n_free=len(mask.free_integer_cols),
            flips=flips,
        )
        logger.info(
            f"[{self.strategy.kind}] step {state.kappa}: J={record.objective:.6g} "
            f"window J={record.window_objective:.6g} in {solve_time:.3f} s"
            f"{' (fallback)' if fallback_used else ''}"
        )
        return nxt, record, dv

    def run_episode(self, initial: MpcState, steps: int, episode_id: int = 0) -> EpisodeLog:
        """Iterate steps from `initial`; errors are re-raised with the failing step index."""
        if steps < 1:
            raise ParameterError(f"An episode needs at least one step, got {steps}")
        if initial.kappa + steps > self.tt.n_steps:
            raise RangeError(
                f"{steps} steps from step {initial.kappa} run past the timetable's {self.tt.n_steps} steps"
            )
        if self.policy is not None:
            self.policy.reset()
        log = EpisodeLog(strategy=self.strategy.kind, episode_id=episode_id, seed=initial.scenario.seed)
        state = initial
        for _ in range(steps):
            kappa = state.kappa
            try:
                state, record, _ = self.step(state)
            except RailSchedError as exc:
                raise type(exc)(f"Step {kappa}: {exc}") from exc
            log.records.append(record)
            log.services.extend(sorted(
                (s for key, s in state.applied.items() if key[1] == kappa), key=lambda s: (s.d, s.key)
            ))
        logger.info(
            f"[{self.strategy.kind}] episode {episode_id} (seed {log.seed}): "
            f"{steps} steps, J={log.total_objective:.6g}, "
            f"{sum(r.fallback_used for r in log.records)} fallback step(s)"
        )
        return log

    # ---- strategies ----

    def _dispatch(self, state: MpcState, problem: StandardFormProblem,
                  mask: PresolveMask) -> Tuple[SolveResult, bool, bool, int]:
        """(result, fallback used, feasible before fallback, order-flag flips)"""
        kind = self.strategy.kind
        cfg = self.solver
        if kind == "fallback_only":
            _, res = lemma1_fallback(problem, mask, cfg)
            return res, False, True, 0

        if self.strategy.is_learning:
            proposal: Optional[Reconciled] = self.policy.propose(state, problem, mask, cfg)
            if proposal is not None:
                res = proposal.result
                if kind == "learning_nlp":
                    res = polish_nlp(problem, proposal.assignment, res.primal, cfg)
                return res, False, True, proposal.flips
            logger.warning(f"Step {state.kappa}: no learned candidate was feasible, using the fallback")
            _, res = lemma1_fallback(problem, mask, cfg)
            return res, True, False, 0

        masked = apply_mask(problem, mask)
        if kind == "milp":
            res = solve_milp(masked, cfg)
        elif kind == "minlp":
            res = solve_minlp(masked, cfg)
        else:
            res = solve_minlp(masked, cfg, warm_start=self._warm_start(state, problem, mask))
        if res.has_solution:
            return res, False, True, 0
        logger.warning(f"Step {state.kappa}: {kind} ended {res.status}, using the fallback")
        _, res = lemma1_fallback(problem, mask, cfg)
        return res, True, False, 0

    def _warm_start(self, state: MpcState, problem: StandardFormProblem, mask: PresolveMask) -> Dict[int, float]:
        """Shifted previous plan; the keep-composition assignment where no plan exists."""
        assignment = complete_assignment(problem, mask, state.plan_y)
        for e in problem.xi_entries:
            if e.key not in mask.fixed_xi and e.key in state.plan_xi:
                assignment[e.xi] = float(state.plan_xi[e.key])
        return assignment


def mpc_step(
    state: MpcState,
    net: Network,
    tt: TimetableTemplate,
    weights: ObjectiveWeights,
    strategy: StrategyConfig,
    solver: Optional[SolverConfig] = None,
    policy=None,
) -> Tuple[MpcState, StepRecord, DecisionVector]:
    return MpcController(net, tt, weights, strategy, solver, policy).step(state)


# ============ Episode Output ============

def episode_frame(log: EpisodeLog) -> pd.DataFrame:
    rows = []
    for r in log.records:
        rows.append({
            "kappa": r.kappa,
            "strategy": r.strategy,
            "objective": r.objective,
            "solve_time_s": r.solve_time_s,
            "gap_vs_benchmark": np.nan if r.gap_vs_benchmark is None else r.gap_vs_benchmark,
            "fallback_used": int(r.fallback_used),
            "feasible": int(r.feasible),
            "feasible_pre": int(r.feasible_pre),
            "window_objective": r.window_objective,
            "n_fixed": r.n_fixed,
            "n_free": r.n_free,
            "flips": r.flips,
        })
    return pd.DataFrame(rows, columns=EPISODE_COLUMNS)


def services_frame(services: List[ServiceDecision]) -> pd.DataFrame:
    rows = [
        {"platform_id": s.platform, "k": s.k, "d": s.d, "a": s.a, "l": s.l, "y": s.y,
         "r": np.nan if s.r is None else s.r, "r_turn": np.nan if s.r_turn is None else s.r_turn}
        for s in services
    ]
    return pd.DataFrame(rows, columns=SERVICE_COLUMNS)


def services_from_frame(frame: pd.DataFrame) -> List[ServiceDecision]:
    """Applied services read back from a services CSV."""
    out = []
    for row in frame.itertuples(index=False):
        out.append(ServiceDecision(
            platform=str(row.platform_id), k=int(row.k), d=float(row.d), a=float(row.a), l=int(row.l), y=int(row.y),
            r=None if pd.isna(row.r) else float(row.r),
            r_turn=None if pd.isna(row.r_turn) else float(row.r_turn),
        ))
    return out


def episode_summary(log: EpisodeLog) -> Dict:
    times = log.solve_times
    return {
        "strategy": log.strategy,
        "episode_id": log.episode_id,
        "seed": log.seed,
        "steps": len(log.records),
        "total_objective": log.total_objective,
        "fallback_steps": sum(r.fallback_used for r in log.records),
        "infeasible_steps": sum(not r.feasible for r in log.records),
        "solve_time_s": {
            "max": max(times) if times else 0.0,
            "mean": float(np.mean(times)) if times else 0.0,
            "min": min(times) if times else 0.0,
        },
    }


def save_episode(log: EpisodeLog, out_dir: Path) -> Path:
    """Write the step CSV, the applied-services CSV and the summary of one episode."""
    out_dir = Path(out_dir)
    stem = f"{log.strategy}_ep{log.episode_id}"
    write_csv(episode_frame(log), out_dir / f"{stem}.csv")
    write_csv(services_frame(log.services), out_dir / f"{stem}_services.csv")
    write_yaml(out_dir / f"{stem}_summary.yaml", episode_summary(log))
    return out_dir / f"{stem}.csv"


def applied_history(services: List[ServiceDecision], tt: TimetableTemplate) -> List[Tuple[float, float, float]]:
    """(d, d_pre, d_pre_next) of applied departures, the input of the w3 fit."""
    return [(s.d, float(tt.d_pre_at(*s.key)), float(tt.d_pre_at(s.platform, s.k + 1))) for s in services]
