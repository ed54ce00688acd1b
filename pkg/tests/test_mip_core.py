import numpy as np
import pytest

from app.exceptions import OracleCapError
from app.models.problem import (
    BINARY,
    CONTINUOUS,
    FEASIBLE_TIME_LIMIT,
    INFEASIBLE_UNPROVEN,
    LINEARIZED,
    OPTIMAL,
    BigMConstants,
)
from app.services.mip_core import (
    brute_force_oracle,
    enumeration_columns,
    polish_nlp,
    relative_gap,
    solve_lp,
    solve_milp,
    solve_minlp,
)
from app.services.network_model import build_timetable
from app.services.presolve import apply_mask, apply_presolve
from app.services.resched_model import (
    ProblemAssembler,
    ProblemBuilder,
    build_problem,
    check_assignment,
    nominal_start,
)
from conftest import flat_scenario, network_from, shuttle_data


def _integers(problem, x):
    return {int(j): float(round(x[j])) for j in problem.integer_cols}


def _random_loop_window(net, tt, seed):
    rng = np.random.default_rng(seed)
    rates = {"A": rng.uniform(0.01, 0.4), "B": rng.uniform(0.01, 0.2)}
    scenario = flat_scenario(tt, rates, seed=seed)
    weights_ = {"w3": float(rng.uniform(0.1, 1.0))}
    kappa = int(rng.integers(0, tt.n_steps - 2))
    start = nominal_start(net, tt, scenario.base, kappa)
    start.depot_stock["Z1"] = int(rng.integers(0, 4))
    return scenario, kappa, start, weights_


def _check_oracle(loop_net, loop_tt, weights, solver, seed):
    scenario, kappa, start, update = _random_loop_window(loop_net, loop_tt, seed)
    problem = ProblemBuilder(loop_net, loop_tt).build(
        scenario.base, (kappa, 2), weights.model_copy(update=update), start=start
    )
    milp = solve_milp(problem, solver)
    oracle = brute_force_oracle(problem, solver)
    assert oracle.status == OPTIMAL
    assert milp.has_solution
    assert milp.objective == pytest.approx(oracle.objective, rel=1e-5, abs=1e-6)


@pytest.mark.parametrize("seed", range(8))
def test_milp_matches_exhaustive_search(loop_net, loop_tt, weights, solver, seed):
    _check_oracle(loop_net, loop_tt, weights, solver, seed)


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(8, 58))
def test_milp_matches_exhaustive_search_wide(loop_net, loop_tt, weights, solver, seed):
    _check_oracle(loop_net, loop_tt, weights, solver, seed)


def test_lp_relaxation_bounds_milp(loop_net, loop_tt, weights, solver):
    scenario = flat_scenario(loop_tt, {"A": 0.3, "B": 0.1})
    problem = build_problem(loop_net, loop_tt, scenario, (0, 3), weights)
    relaxed = solve_lp(problem, solver)
    milp = solve_milp(problem, solver)
    assert relaxed.objective <= milp.objective + 1e-6
    assert milp.gap <= solver.gap_tol + 1e-12


def test_presolve_keeps_the_optimum(shuttle_net, shuttle_tt, weights, solver):
    scenario = flat_scenario(shuttle_tt, {p: 0.1 for p in shuttle_tt.phase})
    problem = build_problem(shuttle_net, shuttle_tt, scenario, (0, 2), weights, sigma_zero_slots=True)
    mask = apply_presolve(problem, shuttle_tt, t_now=shuttle_tt.step_start(0))
    assert len(mask.free_integer_cols) < len(problem.primary_integer_cols)
    full = solve_milp(problem, solver)
    reduced = solve_milp(apply_mask(problem, mask), solver)
    assert reduced.objective == pytest.approx(full.objective, rel=1e-6, abs=1e-6)


def test_polish_never_increases_the_true_objective(loop_net, loop_tt, weights, solver):
    scenario = flat_scenario(loop_tt, {"A": 0.3, "B": 0.1})
    problem = build_problem(loop_net, loop_tt, scenario, (0, 3), weights)
    milp = solve_milp(problem, solver)
    polished = polish_nlp(problem, _integers(problem, milp.primal), milp.primal, solver)
    trace = polished.stats.objective_trace
    assert trace[0] == pytest.approx(problem.true_objective(milp.primal))
    assert all(b <= a + 1e-9 for a, b in zip(trace, trace[1:]))
    assert polished.objective == pytest.approx(problem.true_objective(polished.primal))


def test_minlp_returns_feasible_point_with_true_cost(loop_net, loop_tt, weights, solver):
    scenario = flat_scenario(loop_tt, {"A": 0.3, "B": 0.1})
    problem = build_problem(loop_net, loop_tt, scenario, (0, 3), weights)
    result = solve_minlp(problem, solver)
    assert result.has_solution
    assert check_assignment(problem, result.primal) == []
    assert result.objective == pytest.approx(problem.true_objective(result.primal))


def test_warm_start_reaches_the_same_optimum(loop_net, loop_tt, weights, solver):
    scenario = flat_scenario(loop_tt, {"A": 0.3, "B": 0.1})
    problem = build_problem(loop_net, loop_tt, scenario, (0, 3), weights)
    cold = solve_milp(problem, solver)
    warm = solve_milp(problem, solver, warm_start=_integers(problem, cold.primal))
    assert warm.objective == pytest.approx(cold.objective, rel=1e-9, abs=1e-9)


def test_oracle_refuses_large_searches(loop_net, loop_tt, weights, solver):
    scenario = flat_scenario(loop_tt, {"A": 0.3, "B": 0.1})
    problem = build_problem(loop_net, loop_tt, scenario, (0, 2), weights)
    assert len(enumeration_columns(problem)) == 2
    with pytest.raises(OracleCapError):
        brute_force_oracle(problem, solver.model_copy(update={"oracle_cap": 1}))


def test_relative_gap():
    assert relative_gap(110.0, 100.0) == pytest.approx(10.0 / 110.0)
    assert relative_gap(100.0, 120.0) == 0.0
    assert relative_gap(float("inf"), 0.0) == float("inf")


def _knapsack_problem():
    asm = ProblemAssembler()
    picks = [asm.add_column(f"b{i}", BINARY, 0, 1, "b") for i in range(3)]
    x = asm.add_column("x", CONTINUOUS, 0.0, 10.0, "x")
    for j, value in zip(picks, (3.0, 2.0, 4.0)):
        asm.add_cost(j, surrogate=-value, true=-value)
    asm.add_cost(x, surrogate=1.0, true=1.0)
    asm.add_row([(j, 1.0) for j in picks], "le", 2.0, "pick")
    asm.add_row([(x, 1.0), (picks[2], -1.0)], "ge", 0.0, "link")
    return asm.freeze(LINEARIZED, BigMConstants(3, 3.0, 0.0, 1e-3))


def test_oracle_solves_one_subproblem_per_assignment(solver):
    problem = _knapsack_problem()
    assert len(enumeration_columns(problem)) == 3
    oracle = brute_force_oracle(problem, solver)
    assert oracle.stats.subproblems == 8
    # items 0 and 2, paying 1 for the link
    assert oracle.objective == pytest.approx(-6.0)
    assert solve_milp(problem, solver).objective == pytest.approx(-6.0)


def test_fully_fixed_problem_solves_as_its_lp(loop_net, loop_tt, weights, solver):
    scenario = flat_scenario(loop_tt, {"A": 0.3, "B": 0.1})
    problem = build_problem(loop_net, loop_tt, scenario, (0, 3), weights)
    milp = solve_milp(problem, solver)
    fixed = problem.with_fixed(_integers(problem, milp.primal))
    again = solve_milp(fixed, solver)
    relaxed = solve_lp(fixed, solver)
    assert again.status == relaxed.status == OPTIMAL
    assert again.stats.nodes == 1
    assert again.objective == pytest.approx(relaxed.objective, rel=1e-9, abs=1e-9)
    assert again.objective == pytest.approx(milp.objective, rel=1e-7, abs=1e-9)


def test_tiny_time_limit_is_reported_not_raised(shuttle_net, shuttle_tt, weights, solver):
    scenario = flat_scenario(shuttle_tt, {p: 0.3 for p in shuttle_tt.phase})
    problem = build_problem(shuttle_net, shuttle_tt, scenario, (0, 3), weights)
    result = solve_milp(problem, solver.model_copy(update={"time_limit_s": 0.001}))
    assert result.status in (FEASIBLE_TIME_LIMIT, INFEASIBLE_UNPROVEN)
    assert result.has_solution == (result.status == FEASIBLE_TIME_LIMIT)


def test_polish_leaves_a_zero_demand_start_alone(loop_net, loop_tt, weights, solver):
    scenario = flat_scenario(loop_tt, {}, sampled=False)
    problem = build_problem(loop_net, loop_tt, scenario, (0, 3), weights)
    milp = solve_milp(problem, solver)
    polished = polish_nlp(problem, _integers(problem, milp.primal), milp.primal, solver)
    np.testing.assert_allclose(polished.primal, milp.primal, atol=1e-6)
    assert polished.stats.objective_trace == [pytest.approx(problem.true_objective(milp.primal))]


def test_oracle_covers_order_flags_at_a_shared_depot(weights, solver):
    net = network_from(shuttle_data(fleet={"l_max": 3, "c_max": 50}))
    tt = build_timetable(net)
    scenario = flat_scenario(tt, {"AU": 0.6, "AD": 0.6, "BU": 0.1, "BD": 0.1}, sampled=False)
    start = nominal_start(net, tt, scenario.base, 0)
    start.depot_stock["Z1"] = 1
    problem = ProblemBuilder(net, tt).build(scenario.base, (0, 1), weights, start=start)
    cols = enumeration_columns(problem)
    assert sorted(problem.columns[j].role for j in cols) == ["xi", "xi", "y", "y"]
    oracle = brute_force_oracle(problem, solver)
    assert oracle.stats.subproblems == 5 * 5 * 2 * 2
    milp = solve_milp(problem, solver)
    assert milp.objective == pytest.approx(oracle.objective, rel=1e-6, abs=1e-6)
    assert check_assignment(problem, milp.primal) == []


def _argmin_y(problem, result):
    return [int(round(result.primal[slot.y])) for _, slot in sorted(problem.slots.items())]


@pytest.mark.parametrize("seed", range(4))
def test_scaling_both_weights_keeps_the_argmin(loop_net, loop_tt, weights, solver, seed):
    scenario, kappa, start, update = _random_loop_window(loop_net, loop_tt, seed)
    base = weights.model_copy(update={**update, "delay_tiebreak": 0.0})
    builder = ProblemBuilder(loop_net, loop_tt)
    problem = builder.build(scenario.base, (kappa, 2), base, start=start)
    scaled = builder.build(scenario.base, (kappa, 2), base.scaled(10.0), start=start)
    first = brute_force_oracle(problem, solver)
    second = brute_force_oracle(scaled, solver)
    assert second.objective == pytest.approx(10.0 * first.objective, rel=1e-7, abs=1e-9)
    assert _argmin_y(scaled, second) == _argmin_y(problem, first)


# ============ Acceptance Scale ============

@pytest.mark.slow
@pytest.mark.parametrize("seed", range(20))
def test_presolve_soundness_on_random_windows(shuttle_net, shuttle_tt, weights, solver, seed):
    rng = np.random.default_rng(seed)
    scenario = flat_scenario(shuttle_tt, {p: rng.uniform(0.02, 0.5) for p in shuttle_tt.phase}, seed=seed)
    kappa = int(rng.integers(0, shuttle_tt.n_steps - 2))
    start = nominal_start(shuttle_net, shuttle_tt, scenario.base, kappa)
    start.depot_stock["Z1"] = int(rng.integers(0, 4))
    problem = ProblemBuilder(shuttle_net, shuttle_tt).build(
        scenario.base, (kappa, 2), weights, start=start, sigma_zero_slots=True
    )
    mask = apply_presolve(problem, shuttle_tt, t_now=shuttle_tt.step_start(kappa))
    assert len(mask.free_integer_cols) < len(problem.primary_integer_cols)
    full = solve_milp(problem, solver)
    reduced = solve_milp(apply_mask(problem, mask), solver)
    assert reduced.objective == pytest.approx(full.objective, rel=1e-6, abs=1e-6)


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(100))
def test_polish_descends_from_the_surrogate_solution(loop_net, loop_tt, weights, solver, seed):
    scenario, kappa, start, update = _random_loop_window(loop_net, loop_tt, seed)
    problem = ProblemBuilder(loop_net, loop_tt).build(
        scenario.base, (kappa, 2), weights.model_copy(update=update), start=start
    )
    milp = solve_milp(problem, solver)
    polished = polish_nlp(problem, _integers(problem, milp.primal), milp.primal, solver)
    trace = polished.stats.objective_trace
    assert all(b <= a + 1e-9 for a, b in zip(trace, trace[1:]))
    assert polished.objective <= problem.true_objective(milp.primal) + 1e-9
    assert check_assignment(problem, polished.primal) == []
