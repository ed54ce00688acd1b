"""
Rail Rescheduling Engine - LP Solver
Bounded-variable two-phase revised simplex with a product-form inverse,
and an adapter to scipy's HiGHS for large batch runs.
"""
import logging
import time
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy import sparse
from scipy.optimize import linprog
from scipy.sparse.linalg import splu

from app.exceptions import ParameterError, SolverError
from app.models.problem import (
    INFEASIBLE,
    OPTIMAL,
    UNBOUNDED,
    SolveResult,
    SolveStats,
    StandardFormProblem,
)

logger = logging.getLogger(__name__)

PIVOT_TOL = 1e-9
UNSTABLE_PIVOT = 1e-8
DUAL_TOL = 1e-9


@dataclass
class LinearProgram:
    """min c'x + const  s.t.  A_eq x = b_eq,  A_ub x <= b_ub,  lb <= x <= ub."""
    c: np.ndarray
    A_eq: sparse.csr_matrix
    b_eq: np.ndarray
    A_ub: sparse.csr_matrix
    b_ub: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    const: float = 0.0

    @property
    def n(self) -> int:
        return len(self.c)

    @classmethod
    def from_problem(cls, problem: StandardFormProblem, cost: Optional[np.ndarray] = None,
                     const: Optional[float] = None) -> "LinearProgram":
        return cls(
            c=problem.c_lin if cost is None else np.asarray(cost, dtype=float),
            A_eq=problem.A_eq,
            b_eq=problem.b_eq,
            A_ub=problem.A_ub,
            b_ub=problem.b_ub,
            lb=problem.lb,
            ub=problem.ub,
            const=problem.const_lin if const is None else const,
        )


class _Basis:
    """Basis bookkeeping: sparse LU of the last refactorisation plus an eta file."""

    def __init__(self, A: sparse.csc_matrix, basis: np.ndarray, refactor_every: int):
        self.A = A
        self.basis = basis
        self.refactor_every = refactor_every
        self.etas: List[Tuple[int, np.ndarray]] = []
        self.lu = None

    def refactor(self) -> None:
        B = self.A[:, self.basis].tocsc()
        try:
            self.lu = splu(B, permc_spec="COLAMD")
        except RuntimeError as e:
            raise SolverError(f"Basis factorisation failed: {str(e)}")
        self.etas = []

    def ftran(self, v: np.ndarray) -> np.ndarray:
        z = self.lu.solve(np.asarray(v, dtype=float))
        for r, a in self.etas:
            zr = z[r] / a[r]
            z -= a * zr
            z[r] = zr
        return z

    def btran(self, v: np.ndarray) -> np.ndarray:
        u = np.array(v, dtype=float)
        for r, a in reversed(self.etas):
            u[r] = (u[r] - (a @ u - a[r] * u[r])) / a[r]
        return self.lu.solve(u, trans="T")

    def replace(self, r: int, j: int, alpha: np.ndarray) -> None:
        self.basis[r] = j
        self.etas.append((r, alpha.copy()))

    @property
    def stale(self) -> bool:
        return len(self.etas) >= self.refactor_every


class RevisedSimplex:
    """
    Two-phase revised simplex over bounded variables.

    Nonbasic variables sit at a finite lower bound or at their upper bound.
    Pricing is Dantzig's rule, switching to Bland's rule after a run of
    degenerate pivots until the objective moves again.
    """

    def __init__(
        self,
        feas_tol: float = 1e-7,
        max_iter: int = 50000,
        refactor_every: int = 64,
        bland_after: int = 50,
    ):
        self.feas_tol = feas_tol
        self.max_iter = max_iter
        self.refactor_every = refactor_every
        self.bland_after = bland_after

    def solve(self, lp: LinearProgram) -> SolveResult:
        t0 = time.perf_counter()
        stats = SolveStats()
        n = lp.n
        lb = np.asarray(lp.lb, dtype=float)
        ub = np.asarray(lp.ub, dtype=float)
        if not np.all(np.isfinite(lb)):
            raise ParameterError("Revised simplex needs finite lower bounds on every column")
        if np.any(lb > ub + self.feas_tol):
            stats.wall_time_s = time.perf_counter() - t0
            return SolveResult(status=INFEASIBLE, stats=stats)

        m1, m2 = lp.A_eq.shape[0], lp.A_ub.shape[0]
        m = m1 + m2
        if m == 0:
            return self._box_only(lp, stats, t0)
        A = _with_slacks(lp.A_eq, lp.A_ub, n)
        b = np.concatenate([lp.b_eq, lp.b_ub]).astype(float)
        lo = np.concatenate([lb, np.zeros(m2)])
        hi = np.concatenate([ub, np.full(m2, np.inf)])
        cost = np.concatenate([lp.c, np.zeros(m2)]).astype(float)

        n_tot = n + m2
        x = lo.copy()
        resid = b - A @ x
        sign = np.where(resid >= 0, 1.0, -1.0)
        A_full = sparse.hstack([A, sparse.diags(sign, format="csc")]).tocsc()
        lo_full = np.concatenate([lo, np.zeros(m)])
        hi_full = np.concatenate([hi, np.full(m, np.inf)])
        x_full = np.concatenate([x, np.abs(resid)])
        at_upper = np.zeros(n_tot + m, dtype=bool)
        basis = _Basis(A_full, np.arange(n_tot, n_tot + m), self.refactor_every)

        phase1 = np.concatenate([np.zeros(n_tot), np.ones(m)])
        status, _ = self._iterate(A_full, b, lo_full, hi_full, x_full, at_upper, basis, phase1, stats)
        if status != OPTIMAL:
            raise SolverError(f"Phase 1 ended with status {status}")
        infeasibility = float(np.sum(x_full[n_tot:]))
        if infeasibility > self.feas_tol * max(1.0, float(np.max(np.abs(b)))):
            stats.wall_time_s = time.perf_counter() - t0
            logger.debug(f"LP infeasible: phase-1 residual {infeasibility:.3e}")
            return SolveResult(status=INFEASIBLE, stats=stats)

        hi_full[n_tot:] = 0.0
        nonbasic_art = np.setdiff1d(np.arange(n_tot, n_tot + m), basis.basis)
        x_full[nonbasic_art] = 0.0
        at_upper[n_tot:] = False
        self._recompute_basics(A_full, b, x_full, basis)
        phase2 = np.concatenate([cost, np.zeros(m)])
        status, y = self._iterate(A_full, b, lo_full, hi_full, x_full, at_upper, basis, phase2, stats)
        stats.wall_time_s = time.perf_counter() - t0
        if status == UNBOUNDED:
            return SolveResult(status=UNBOUNDED, stats=stats)

        primal = np.clip(x_full[:n], lb, ub)
        objective = float(lp.c @ primal) + lp.const
        return SolveResult(status=OPTIMAL, primal=primal, objective=objective, gap=0.0, stats=stats, duals=y)

    def _box_only(self, lp: LinearProgram, stats: SolveStats, t0: float) -> SolveResult:
        primal = np.where(lp.c >= 0, lp.lb, lp.ub).astype(float)
        stats.wall_time_s = time.perf_counter() - t0
        if not np.all(np.isfinite(primal)):
            return SolveResult(status=UNBOUNDED, stats=stats)
        return SolveResult(status=OPTIMAL, primal=primal, objective=float(lp.c @ primal) + lp.const,
                           gap=0.0, stats=stats, duals=np.zeros(0))

    @staticmethod
    def _recompute_basics(A, b, x, basis: _Basis) -> None:
        basis.refactor()
        x_n = x.copy()
        x_n[basis.basis] = 0.0
        x[basis.basis] = basis.ftran(b - A @ x_n)

    def _iterate(self, A, b, lo, hi, x, at_upper, basis: _Basis, cost, stats: SolveStats):
        self._recompute_basics(A, b, x, basis)
        movable = hi > lo
        bland = False
        degenerate = 0
        while True:
            if stats.simplex_iterations >= self.max_iter:
                raise SolverError(f"Simplex iteration limit {self.max_iter} reached")
            y = basis.btran(cost[basis.basis])
            d = cost - A.T @ y
            is_basic = np.zeros(len(x), dtype=bool)
            is_basic[basis.basis] = True
            free = movable & ~is_basic
            incr = free & ~at_upper & (d < -DUAL_TOL)
            decr = free & at_upper & (d > DUAL_TOL)
            eligible = incr | decr
            if not eligible.any():
                return OPTIMAL, y

            if bland:
                j = int(np.flatnonzero(eligible)[0])
            else:
                j = int(np.argmax(np.where(eligible, np.abs(d), -1.0)))
            direction = 1.0 if incr[j] else -1.0
            alpha = basis.ftran(A[:, j].toarray().ravel())
            delta = direction * alpha

            x_b = x[basis.basis]
            lo_b, hi_b = lo[basis.basis], hi[basis.basis]
            ratios = np.full(len(delta), np.inf)
            down = delta > PIVOT_TOL
            up = delta < -PIVOT_TOL
            ratios[down] = (x_b[down] - lo_b[down]) / delta[down]
            finite_up = up & np.isfinite(hi_b)
            ratios[finite_up] = (x_b[finite_up] - hi_b[finite_up]) / delta[finite_up]
            ratios = np.maximum(ratios, 0.0)

            theta = hi[j] - lo[j]
            r = -1
            if np.isfinite(ratios).any():
                best = float(np.min(ratios))
                if best < theta:
                    ties = np.flatnonzero(ratios <= best + 1e-12)
                    if bland:
                        r = int(ties[np.argmin(basis.basis[ties])])
                    else:
                        r = int(ties[np.argmax(np.abs(delta[ties]))])
                    theta = best
            if not np.isfinite(theta):
                return UNBOUNDED, y
            if r >= 0 and abs(alpha[r]) < UNSTABLE_PIVOT:
                if basis.etas:
                    logger.debug(f"Unstable pivot {alpha[r]:.3e}, refactorising")
                    self._recompute_basics(A, b, x, basis)
                    bland = True
                    continue
                if not bland:
                    bland = True
                    continue
                raise SolverError(f"Pivot element {alpha[r]:.3e} too small under Bland's rule")

            x[basis.basis] -= theta * delta
            x[j] += direction * theta
            if r < 0:
                at_upper[j] = not at_upper[j]
                x[j] = hi[j] if at_upper[j] else lo[j]
            else:
                out = int(basis.basis[r])
                hits_upper = bool(delta[r] < 0)
                x[out] = hi[out] if hits_upper else lo[out]
                at_upper[out] = hits_upper
                at_upper[j] = False
                basis.replace(r, j, alpha)
                if basis.stale:
                    self._recompute_basics(A, b, x, basis)

            stats.simplex_iterations += 1
            if theta <= 1e-12:
                degenerate += 1
                if degenerate >= self.bland_after and not bland:
                    logger.debug(f"{degenerate} degenerate pivots, switching to Bland's rule")
                    bland = True
            else:
                degenerate = 0
                bland = False


def _with_slacks(A_eq, A_ub, n: int) -> sparse.csc_matrix:
    """[[A_eq, 0], [A_ub, I]] without zero-sized blocks."""
    m1, m2 = A_eq.shape[0], A_ub.shape[0]
    blocks = []
    if m1:
        eq = sparse.csr_matrix(A_eq, shape=(m1, n))
        blocks.append([eq, sparse.csr_matrix((m1, m2))] if m2 else [eq])
    if m2:
        blocks.append([sparse.csr_matrix(A_ub, shape=(m2, n)), sparse.identity(m2, format="csr")])
    return sparse.bmat(blocks, format="csc")


def _solve_highs(lp: LinearProgram) -> SolveResult:
    t0 = time.perf_counter()
    bounds = [
        (float(lo) if np.isfinite(lo) else None, float(hi) if np.isfinite(hi) else None)
        for lo, hi in zip(lp.lb, lp.ub)
    ]
    res = linprog(
        lp.c,
        A_ub=lp.A_ub if lp.A_ub.shape[0] else None,
        b_ub=lp.b_ub if lp.A_ub.shape[0] else None,
        A_eq=lp.A_eq if lp.A_eq.shape[0] else None,
        b_eq=lp.b_eq if lp.A_eq.shape[0] else None,
        bounds=bounds,
        method="highs",
    )
    stats = SolveStats(simplex_iterations=int(getattr(res, "nit", 0) or 0),
                       wall_time_s=time.perf_counter() - t0)
    if res.status == 0:
        duals = []
        if lp.A_eq.shape[0]:
            duals.append(np.asarray(res.eqlin.marginals))
        if lp.A_ub.shape[0]:
            duals.append(np.asarray(res.ineqlin.marginals))
        primal = np.clip(np.asarray(res.x, dtype=float), lp.lb, lp.ub)
        return SolveResult(
            status=OPTIMAL, primal=primal, objective=float(lp.c @ primal) + lp.const, gap=0.0,
            stats=stats, duals=np.concatenate(duals) if duals else np.zeros(0),
        )
    if res.status == 2:
        return SolveResult(status=INFEASIBLE, stats=stats)
    if res.status == 3:
        return SolveResult(status=UNBOUNDED, stats=stats)
    raise SolverError(f"HiGHS failed with status {res.status}: {res.message}")


def solve_linear_program(lp: LinearProgram, engine: str = "simplex", feas_tol: float = 1e-7,
                         max_iter: int = 50000) -> SolveResult:
    """Dispatch an LP to the selected engine; both return the same result contract."""
    if engine == "highs":
        return _solve_highs(lp)
    if engine == "simplex":
        return RevisedSimplex(feas_tol=feas_tol, max_iter=max_iter).solve(lp)
    raise ParameterError(f"Unknown LP engine: {engine}")
