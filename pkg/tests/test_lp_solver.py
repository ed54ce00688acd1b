import numpy as np
import pytest
from scipy import sparse
from scipy.optimize import linprog

from app.exceptions import ParameterError
from app.models.problem import INFEASIBLE, OPTIMAL, UNBOUNDED
from app.services.lp_solver import LinearProgram, solve_linear_program


def _random_lp(seed: int, n: int = 8, m_eq: int = 3, m_ub: int = 5) -> LinearProgram:
    rng = np.random.default_rng(seed)
    x0 = rng.uniform(0.0, 5.0, n)
    A_eq = rng.normal(size=(m_eq, n))
    A_ub = rng.normal(size=(m_ub, n))
    return LinearProgram(
        c=rng.normal(size=n),
        A_eq=sparse.csr_matrix(A_eq),
        b_eq=A_eq @ x0,
        A_ub=sparse.csr_matrix(A_ub),
        b_ub=A_ub @ x0 + rng.uniform(0.0, 2.0, m_ub),
        lb=np.zeros(n),
        ub=np.full(n, 10.0),
        const=1.5,
    )


def _tiny(c, A_ub, b_ub, ub=np.inf) -> LinearProgram:
    n = len(c)
    return LinearProgram(
        c=np.asarray(c, dtype=float),
        A_eq=sparse.csr_matrix((0, n)),
        b_eq=np.zeros(0),
        A_ub=sparse.csr_matrix(np.asarray(A_ub, dtype=float)),
        b_ub=np.asarray(b_ub, dtype=float),
        lb=np.zeros(n),
        ub=np.full(n, ub),
    )


@pytest.mark.parametrize("seed", range(10))
def test_simplex_matches_highs_on_random_programs(seed):
    lp = _random_lp(seed)
    ours = solve_linear_program(lp, engine="simplex")
    ref = linprog(lp.c, A_ub=lp.A_ub.toarray(), b_ub=lp.b_ub, A_eq=lp.A_eq.toarray(), b_eq=lp.b_eq,
                  bounds=list(zip(lp.lb, lp.ub)), method="highs")
    assert ref.status == 0
    assert ours.status == OPTIMAL
    assert ours.objective == pytest.approx(ref.fun + lp.const, rel=1e-6, abs=1e-6)
    np.testing.assert_allclose(lp.A_eq @ ours.primal, lp.b_eq, atol=1e-6)
    assert np.all(lp.A_ub @ ours.primal <= lp.b_ub + 1e-6)


def test_engines_agree():
    lp = _random_lp(3)
    simplex = solve_linear_program(lp, engine="simplex")
    highs = solve_linear_program(lp, engine="highs")
    assert simplex.objective == pytest.approx(highs.objective, rel=1e-6, abs=1e-6)


@pytest.mark.parametrize("engine", ["simplex", "highs"])
def test_infeasible_program(engine):
    lp = _tiny([1.0, 1.0], [[1.0, 1.0]], [-1.0])
    assert solve_linear_program(lp, engine=engine).status == INFEASIBLE


@pytest.mark.parametrize("engine", ["simplex", "highs"])
def test_unbounded_program(engine):
    lp = _tiny([-1.0, -1.0], [[1.0, -1.0]], [1.0])
    assert solve_linear_program(lp, engine=engine).status == UNBOUNDED


def test_box_only_program():
    lp = _tiny([1.0, -2.0], np.zeros((0, 2)), [], ub=3.0)
    result = solve_linear_program(lp)
    np.testing.assert_allclose(result.primal, [0.0, 3.0])
    assert result.objective == pytest.approx(-6.0)


def test_unknown_engine_is_rejected():
    with pytest.raises(ParameterError):
        solve_linear_program(_random_lp(0), engine="interior")


def test_simplex_needs_finite_lower_bounds():
    lp = _random_lp(1)
    lp.lb[0] = -np.inf
    with pytest.raises(ParameterError):
        solve_linear_program(lp, engine="simplex")
