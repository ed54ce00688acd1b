"""
Rail Rescheduling Engine - Rescheduling Model
Builds the windowed hybrid problem: timing, composition, depot and passenger rows
with their big-M encodings, plus the true and surrogate objectives.
"""
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse

from app.config import get_settings
from app.exceptions import (
    EncodingBoundError,
    EncodingError,
    InfeasibleInputError,
    ParameterError,
    RangeError,
)
from app.models.domain import (
    DecisionVector,
    DemandProfile,
    DemandScenario,
    PassengerState,
    ServiceDecision,
    ServiceKey,
    ServicePassengers,
    TimetableTemplate,
    WindowStart,
)
from app.models.problem import (
    BINARY,
    CONTINUOUS,
    INTEGER,
    LINEARIZED,
    NONLINEAR,
    AffineExpr,
    BigMConstants,
    BilinearTerm,
    Column,
    Row,
    SlotCols,
    StandardFormProblem,
    XiEntry,
)
from app.models.schemas import Network, ObjectiveWeights
from app.storage import write_text

logger = logging.getLogger(__name__)
settings = get_settings()

INF = float("inf")
Terms = Iterable[Tuple[int, float]]


def service_tag(p: str, k: int) -> str:
    return f"p{p}_k{k}"


# ============ Assembly ============

class ProblemAssembler:
    """Accumulates columns, rows and objective terms, then freezes them into a problem."""

    def __init__(self):
        self.columns: List[Column] = []
        self.rows: List[Row] = []
        self._c_lin: Dict[int, float] = {}
        self._c_quad: Dict[int, float] = {}
        self.const_lin = 0.0
        self.const_quad = 0.0
        self.bilinear: List[BilinearTerm] = []

    def add_column(self, name: str, kind: str, lb: float, ub: float, role: str, key: Tuple = ()) -> int:
        if lb > ub:
            raise InfeasibleInputError(f"Column {name}: lower bound {lb} above upper bound {ub}")
        self.columns.append(Column(name=name, kind=kind, lb=float(lb), ub=float(ub), role=role, key=tuple(key)))
        return len(self.columns) - 1

    def add_row(self, terms: Terms, sense: str, rhs: float, tag: str) -> Row:
        """Add sum(coef * x) (= | <= | >=) rhs; '>=' rows are stored negated."""
        merged: Dict[int, float] = {}
        for j, c in terms:
            merged[j] = merged.get(j, 0.0) + float(c)
        cols = tuple(sorted(j for j, c in merged.items() if c != 0.0))
        coefs = tuple(merged[j] for j in cols)
        if sense == "ge":
            coefs = tuple(-c for c in coefs)
            rhs = -rhs
            sense = "le"
        if sense not in ("eq", "le"):
            raise ParameterError(f"Unknown row sense: {sense}")
        row = Row(cols=cols, coefs=coefs, rhs=float(rhs), sense=sense, tag=tag)
        self.rows.append(row)
        return row

    def add_cost(self, j: int, surrogate: float = 0.0, true: float = 0.0) -> None:
        if surrogate:
            self._c_lin[j] = self._c_lin.get(j, 0.0) + surrogate
        if true:
            self._c_quad[j] = self._c_quad.get(j, 0.0) + true

    def add_bilinear(self, coef: float, left: AffineExpr, right: AffineExpr) -> None:
        self.bilinear.append(BilinearTerm(coef=coef, left=left, right=right))

    def freeze(self, mode: str, big_m: BigMConstants, **layout) -> StandardFormProblem:
        n = len(self.columns)
        c_lin = np.zeros(n)
        c_quad = np.zeros(n)
        for j, c in self._c_lin.items():
            c_lin[j] = c
        for j, c in self._c_quad.items():
            c_quad[j] = c
        return StandardFormProblem(
            columns=list(self.columns),
            rows=list(self.rows),
            c_lin=c_lin,
            const_lin=self.const_lin,
            c_quad=c_quad,
            const_quad=self.const_quad,
            bilinear=list(self.bilinear),
            mode=mode,
            big_m=big_m,
            **layout,
        )


# ============ Big-M Encodings ============

def encode_abs(asm: ProblemAssembler, y_col: int, y_max: int, name: str) -> Tuple[List[Row], int, int]:
    """
    Absolute value o = |y| with sign flag gamma = [y >= 0].

    Returns:
        (rows, o column, gamma column)
    """
    col = asm.columns[y_col]
    bound = max(abs(col.lb), abs(col.ub))
    if y_max < bound:
        raise EncodingError(f"Y_max={y_max} does not cover |{col.name}| <= {bound}")
    o = asm.add_column(f"o_{name}", CONTINUOUS, 0.0, y_max, "o", col.key)
    gamma = asm.add_column(f"gamma_{name}", BINARY, 0, 1, "gamma", col.key)
    big = 2.0 * y_max
    rows = [
        asm.add_row([(o, 1.0), (y_col, -1.0)], "ge", 0.0, f"abs_pos:{name}"),
        asm.add_row([(o, 1.0), (y_col, -1.0), (gamma, big)], "le", big, f"abs_pos_gate:{name}"),
        asm.add_row([(o, 1.0), (y_col, 1.0)], "ge", 0.0, f"abs_neg:{name}"),
        asm.add_row([(o, 1.0), (y_col, 1.0), (gamma, -big)], "le", 0.0, f"abs_neg_gate:{name}"),
    ]
    return rows, o, gamma


def encode_indicator(
    asm: ProblemAssembler, o_col: int, o_min: float, o_max: float, epsilon: float, name: str
) -> Tuple[List[Row], int]:
    """Flag eta = 1 exactly when o >= epsilon."""
    if epsilon <= 0:
        raise EncodingError(f"epsilon must be positive, got {epsilon}")
    if not (o_min <= 0.0 < o_max):
        raise EncodingError(f"Need O_min <= 0 < O_max, got [{o_min}, {o_max}]")
    col = asm.columns[o_col]
    if col.ub > o_max or col.lb < o_min:
        raise EncodingError(f"[{o_min}, {o_max}] does not cover {col.name} in [{col.lb}, {col.ub}]")
    eta = asm.add_column(f"eta_{name}", BINARY, 0, 1, "eta", col.key)
    rows = [
        asm.add_row([(o_col, 1.0), (eta, -o_max)], "le", 0.0, f"ind_on:{name}"),
        asm.add_row([(o_col, 1.0), (eta, o_min - epsilon)], "ge", o_min, f"ind_off:{name}"),
    ]
    return rows, eta


def encode_order(
    asm: ProblemAssembler,
    d_col: int,
    d_other_col: int,
    t_roll: float,
    m_a: float,
    M_a: float,
    epsilon: float,
    name: str,
    key: Tuple = (),
) -> Tuple[List[Row], int]:
    """Order flag xi = 1 exactly when d >= d_other + t_roll.

    m_a and M_a bound f = d - d_other - t_roll over the reachable box.
    """
    if m_a > M_a:
        raise EncodingError(f"Order bracket inverted for {name}: m={m_a} > M={M_a}")
    xi = asm.add_column(f"xi_{name}", BINARY, 0, 1, "xi", key)
    rows = [
        asm.add_row([(d_col, 1.0), (d_other_col, -1.0), (xi, m_a)], "ge", m_a + t_roll, f"order_on:{name}"),
        asm.add_row([(d_col, 1.0), (d_other_col, -1.0), (xi, -(M_a + epsilon))], "le",
                    t_roll - epsilon, f"order_off:{name}"),
    ]
    return rows, xi


def encode_product(asm: ProblemAssembler, xi_col: int, y_col: int, y_max: int, name: str,
                   key: Tuple = ()) -> Tuple[List[Row], int]:
    """w = xi * y for binary xi and |y| <= y_max."""
    w = asm.add_column(f"w_{name}", CONTINUOUS, -y_max, y_max, "w", key)
    rows = [
        asm.add_row([(w, 1.0), (xi_col, -y_max)], "le", 0.0, f"prod_up:{name}"),
        asm.add_row([(w, 1.0), (xi_col, y_max)], "ge", 0.0, f"prod_low:{name}"),
        asm.add_row([(w, 1.0), (y_col, -1.0), (xi_col, y_max)], "le", y_max, f"prod_follow_up:{name}"),
        asm.add_row([(w, 1.0), (y_col, -1.0), (xi_col, -y_max)], "ge", -y_max, f"prod_follow_low:{name}"),
    ]
    return rows, w


# ============ Builder ============

def nominal_start(net: Network, tt: TimetableTemplate, forecast: DemandProfile, kappa: int) -> WindowStart:
    """Initial condition with nothing realized: expected arrivals waiting, full depots."""
    waiting = {p: forecast.count(p, kappa) for p in tt.phase}
    return WindowStart(
        kappa=kappa,
        waiting=waiting,
        depot_stock={z.id: z.n_train for z in net.depots},
    )


class ProblemBuilder:
    """Builds the windowed rescheduling problem for one network and timetable."""

    def __init__(self, net: Network, tt: TimetableTemplate, epsilon: Optional[float] = None):
        self.net = net
        self.tt = tt
        self.epsilon = settings.epsilon if epsilon is None else epsilon
        self.by_id = {p.id: p for p in net.platforms}

    def build(
        self,
        forecast: DemandProfile,
        window: Tuple[int, int],
        weights: ObjectiveWeights,
        mode: str = NONLINEAR,
        start: Optional[WindowStart] = None,
        sigma_zero_slots: bool = False,
    ) -> StandardFormProblem:
        """
        Build the problem of control steps [kappa, kappa + N).

        Args:
            forecast: Demand the optimizer plans with
            window: (kappa, N)
            weights: Objective weights
            mode: nonlinear or linearized objective reporting
            start: Realized initial condition; nominal when omitted
            sigma_zero_slots: Also create composition-change columns at sigma = 0 platforms

        Returns:
            StandardFormProblem carrying both objectives
        """
        kappa, horizon = window
        self._check_window(kappa, horizon, forecast)
        if mode not in (NONLINEAR, LINEARIZED):
            raise ParameterError(f"Unknown objective mode: {mode}")
        if mode == LINEARIZED and weights.w3 <= 0:
            raise ParameterError("The linearized objective needs w3 > 0")
        start = start or nominal_start(self.net, self.tt, forecast, kappa)
        self._check_start(start)

        y_max = self.net.fleet.y_max
        big_m = BigMConstants(y_max=y_max, o_max=float(y_max), o_min=0.0, epsilon=self.epsilon)
        asm = ProblemAssembler()
        steps = range(kappa, kappa + horizon)
        keys = sorted(
            ((p, k) for p in self.tt.phase for k in steps),
            key=lambda s: (self.tt.d_pre_at(*s), s),
        )
        cols: Dict[ServiceKey, Dict[str, int]] = {}
        params: Dict[ServiceKey, Dict[str, float]] = {}
        slots: Dict[ServiceKey, SlotCols] = {}
        transfers: Dict[ServiceKey, List[Tuple[ServiceKey, float]]] = {}

        for key in keys:
            cols[key], params[key], transfers[key] = self._service_columns(asm, key, forecast, start, window)
            slot = self._slot_columns(asm, key, y_max, sigma_zero_slots)
            if slot is not None:
                slots[key] = slot
        for key in keys:
            self._timing_rows(asm, key, cols, slots, params, start)
            self._passenger_rows(asm, key, cols, params, transfers[key])
            self._objective_terms(asm, key, cols, slots, params, weights)
        xi_entries = self._depot_rows(asm, keys, cols, slots, start, y_max)

        problem = asm.freeze(
            mode,
            big_m,
            slots=slots,
            xi_entries=xi_entries,
            service_cols=cols,
            service_params=params,
            window=(kappa, horizon),
        )
        logger.debug(
            f"Built window [{kappa}, {kappa + horizon}): {problem.n_cols} columns, "
            f"{len(problem.rows)} rows, {len(slots)} slots, {len(xi_entries)} order flags"
        )
        return problem

    # ---- checks ----

    def _check_window(self, kappa: int, horizon: int, forecast: DemandProfile) -> None:
        if kappa < 0 or horizon < 1:
            raise ParameterError(f"Invalid window kappa={kappa}, N={horizon}")
        if kappa + horizon > self.tt.n_steps:
            raise RangeError(
                f"Window [{kappa}, {kappa + horizon}) extends past the timetable's {self.tt.n_steps} steps"
            )
        missing = sorted(set(self.tt.phase) - set(forecast.per_interval))
        if missing:
            raise RangeError(f"No demand for platforms {', '.join(missing)}")
        if forecast.horizon_len < kappa + horizon + 1:
            raise RangeError(
                f"Demand covers {forecast.horizon_len} intervals, window needs {kappa + horizon + 1}"
            )

    def _check_start(self, start: WindowStart) -> None:
        fleet = self.net.fleet
        for z in self.net.depots:
            stock = start.depot_stock.get(z.id)
            if stock is None or stock < 0:
                raise InfeasibleInputError(f"Depot {z.id}: stock {stock} is not a valid unit count")
        for p, n in start.waiting.items():
            if n < 0:
                raise InfeasibleInputError(f"Platform {p}: negative waiting count {n}")
        for key, s in start.applied.items():
            if not fleet.l_min <= s.l <= fleet.l_max:
                raise InfeasibleInputError(f"Applied service {key}: composition {s.l} outside fleet bounds")

    # ---- columns ----

    def _service_columns(self, asm, key, forecast, start, window):
        p, k = key
        kappa, horizon = window
        spec = self.by_id[p]
        fleet = self.net.fleet
        T = self.tt.t_ctrl
        tag = service_tag(p, k)
        d_pre = self.tt.d_pre_at(p, k)
        d_next = self.tt.d_pre_at(p, k + 1)

        c: Dict[str, int] = {}
        c["d"] = asm.add_column(f"d_{tag}", CONTINUOUS, d_pre, d_next - 1, "d", key)
        c["a"] = asm.add_column(f"a_{tag}", CONTINUOUS, d_pre - 4 * T, d_next - 1, "a", key)
        c["tau"] = asm.add_column(f"tau_{tag}", CONTINUOUS, spec.tau_min, 6 * T, "tau", key)
        if k > 0:
            c["h"] = asm.add_column(f"h_{tag}", CONTINUOUS, spec.h_min, 6 * T, "h", key)
        if spec.succ is not None:
            c["r"] = asm.add_column(f"r_{tag}", CONTINUOUS, spec.r_min, spec.r_max, "r", key)
        else:
            c["r_turn"] = asm.add_column(f"rturn_{tag}", CONTINUOUS, spec.r_turn_min, spec.r_turn_max, "r_turn", key)
        c["l"] = asm.add_column(f"l_{tag}", INTEGER, fleet.l_min, fleet.l_max, "l", key)
        if k == kappa:
            waiting = float(start.waiting.get(p, 0.0))
            c["n"] = asm.add_column(f"n_{tag}", CONTINUOUS, waiting, waiting, "n", key)
        else:
            c["n"] = asm.add_column(f"n_{tag}", CONTINUOUS, 0.0, INF, "n", key)
        c["n_depart"] = asm.add_column(f"ndep_{tag}", CONTINUOUS, 0.0, INF, "n_depart", key)
        c["n_after"] = asm.add_column(f"nafter_{tag}", CONTINUOUS, 0.0, INF, "n_after", key)

        in_window = lambda s: kappa <= s[1] < kappa + horizon
        trans_terms: List[Tuple[ServiceKey, float]] = []
        for q, kq in self.tt.transfer_sources(p, k):
            feeder = self._line_pred(q, kq)
            if feeder is not None and in_window(feeder):
                trans_terms.append((feeder, self.tt.beta.get(q, {}).get(p, 0.0)))
        if trans_terms:
            c["n_trans"] = asm.add_column(f"ntrans_{tag}", CONTINUOUS, 0.0, INF, "n_trans", key)

        feeder = self._line_pred(p, k)
        arrive_const = 0.0
        if feeder is not None and not in_window(feeder):
            arrive_const = float(start.departed.get(feeder, 0.0))
        params = {
            "d_pre": float(d_pre),
            "d_pre_next": float(d_next),
            "rho": forecast.rate(p, k + 1),
            "rho_prev": forecast.rate(p, k),
            "sigma": float(spec.sigma),
            "t_cons": spec.t_cons,
            "c_max": float(fleet.c_max),
            "E_energy": spec.E_energy,
            "E_add": spec.E_add,
            "trans_const": float(start.transfer_in.get(key, 0.0)),
            "arrive_const": arrive_const,
        }
        return c, params, trans_terms

    def _line_pred(self, p: str, k: int) -> Optional[ServiceKey]:
        """Service that carries passengers into (p, k); None at a line's first platform."""
        pred = self.tt.circ_pred(p, k)
        if pred is None or pred[2]:
            return None
        return pred[0], pred[1]

    def _slot_columns(self, asm, key, y_max, sigma_zero_slots) -> Optional[SlotCols]:
        spec = self.by_id[key[0]]
        if y_max <= 0 or (spec.sigma == 0 and not sigma_zero_slots):
            return None
        tag = service_tag(*key)
        y = asm.add_column(f"y_{tag}", INTEGER, -y_max, y_max, "y", key)
        _, o, gamma = encode_abs(asm, y, y_max, tag)
        _, eta = encode_indicator(asm, o, 0.0, float(y_max), self.epsilon, tag)
        return SlotCols(key=key, y=y, o=o, gamma=gamma, eta=eta, adjustable=spec.sigma == 1)

    # ---- rows ----

    def _timing_rows(self, asm, key, cols, slots, params, start: WindowStart) -> None:
        p, k = key
        spec = self.by_id[p]
        fleet = self.net.fleet
        c = cols[key]
        tag = service_tag(p, k)

        asm.add_row([(c["d"], 1.0), (c["a"], -1.0), (c["tau"], -1.0)], "eq", 0.0, f"dwell:{tag}")

        if "h" in c:
            prev = (p, k - 1)
            if prev in cols:
                asm.add_row([(c["a"], 1.0), (c["h"], -1.0), (cols[prev]["d"], -1.0)], "eq", 0.0, f"headway:{tag}")
            else:
                applied = start.applied.get(prev)
                d_prev = applied.d if applied is not None else self.tt.d_pre_at(*prev)
                asm.add_row([(c["a"], 1.0), (c["h"], -1.0)], "eq", d_prev, f"headway:{tag}")

        pred = self.tt.circ_pred(p, k)
        l_terms: List[Tuple[int, float]] = [(c["l"], 1.0)]
        if pred is None:
            asm.add_row([(c["a"], 1.0)], "eq", params[key]["d_pre"] - self.net.timetable.dwell_regular,
                         f"arrive_start:{tag}")
            l_const = float(fleet.l_regular)
        else:
            q, kq, turn = pred
            qkey = (q, kq)
            run_role = "r_turn" if turn else "r"
            if qkey in cols:
                qc = cols[qkey]
                asm.add_row([(c["a"], 1.0), (qc["d"], -1.0), (qc[run_role], -1.0)], "eq", 0.0,
                             f"{'turn' if turn else 'run'}:{tag}")
                l_terms.append((qc["l"], -1.0))
                l_const = 0.0
            else:
                applied = start.applied.get(qkey)
                if applied is not None and applied.arrival_next is not None:
                    arrive, l_const = applied.arrival_next, float(applied.l)
                else:
                    qspec = self.by_id[q]
                    nominal_run = qspec.r_turn_avg if turn else qspec.r_avg
                    arrive, l_const = self.tt.d_pre_at(q, kq) + nominal_run, float(fleet.l_regular)
                asm.add_row([(c["a"], 1.0)], "eq", arrive, f"arrive_fixed:{tag}")

        slot = slots.get(key)
        if slot is not None and slot.adjustable:
            l_terms.append((slot.y, -1.0))
            asm.add_row([(c["tau"], 1.0), (slot.eta, -spec.t_cons)], "ge", spec.tau_min, f"dwell_ext:{tag}")
        asm.add_row(l_terms, "eq", l_const, f"compose:{tag}")

    def _passenger_rows(self, asm, key, cols, params, trans_terms) -> None:
        p, k = key
        c = cols[key]
        par = params[key]
        tag = service_tag(p, k)
        rho = par["rho"]

        after = [(c["n_after"], 1.0), (c["n"], -1.0), (c["d"], -rho), (c["n_depart"], 1.0)]
        rhs = -rho * par["d_pre"]
        if "n_trans" in c:
            after.append((c["n_trans"], -1.0))
            # expected share; the plant moves floor(beta * n_depart)
            terms = [(c["n_trans"], 1.0)] + [(cols[src]["n_depart"], -beta) for src, beta in trans_terms]
            asm.add_row(terms, "eq", par["trans_const"], f"transfer:{tag}")
        else:
            rhs += par["trans_const"]
        asm.add_row(after, "eq", rhs, f"pax_after:{tag}")
        asm.add_row([(c["n_depart"], 1.0), (c["l"], -par["c_max"])], "le", 0.0, f"capacity:{tag}")

        nxt = (p, k + 1)
        if nxt in cols:
            asm.add_row(
                [(cols[nxt]["n"], 1.0), (c["n_after"], -1.0), (c["d"], rho)],
                "eq", rho * par["d_pre_next"], f"pax_next:{tag}",
            )

    def _objective_terms(self, asm, key, cols, slots, params, weights: ObjectiveWeights) -> None:
        c = cols[key]
        par = params[key]
        T = float(self.tt.t_ctrl)
        w1, w2 = weights.w1, weights.w2

        asm.add_bilinear(w1, AffineExpr((c["n"],), (1.0,)), AffineExpr((c["d"],), (1.0,), -par["d_pre"]))
        asm.add_bilinear(w1, AffineExpr((c["n_after"],), (1.0,)), AffineExpr((c["d"],), (-1.0,), par["d_pre_next"]))
        asm.add_cost(c["n"], surrogate=w1 * weights.w3 * T)
        asm.add_cost(c["n_after"], surrogate=w1 * T)
        if weights.delay_tiebreak:
            asm.add_cost(c["d"], surrogate=weights.delay_tiebreak)
            asm.const_lin -= weights.delay_tiebreak * par["d_pre"]

        energy = w2 * par["E_energy"]
        asm.add_cost(c["l"], surrogate=energy, true=energy)
        slot = slots.get(key)
        if slot is not None and slot.adjustable:
            change = w2 * par["E_add"]
            asm.add_cost(slot.eta, surrogate=change, true=change)

    def _depot_rows(self, asm, keys, cols, slots, start: WindowStart, y_max: int) -> List[XiEntry]:
        T = self.tt.t_ctrl
        entries: List[XiEntry] = []
        for z in self.net.depots:
            members = [
                s for s in keys
                if s in slots and slots[s].adjustable and self.by_id[s[0]].depot_id == z.id
            ]
            if not members:
                continue
            stock = float(start.depot_stock[z.id])
            own: Dict[ServiceKey, List[XiEntry]] = {s: [] for s in members}
            for s in members:
                p, k = s
                d_pre, d_next = self.tt.d_pre_at(p, k), self.tt.d_pre_at(p, k + 1)
                for s2 in members:
                    if s2[0] == p:
                        continue
                    p2, k2 = s2
                    # roll time of the platform the units come from
                    t_roll = self.by_id[p2].t_roll
                    d_pre2, d_next2 = self.tt.d_pre_at(p2, k2), self.tt.d_pre_at(p2, k2 + 1)
                    m_a = d_pre - (d_next2 - 1) - t_roll
                    M_a = (d_next - 1) - d_pre2 - t_roll
                    name = f"p{p}_k{k}_q{p2}_j{k2}"
                    xkey = (p, k, p2, k2)
                    _, xi = encode_order(asm, cols[s]["d"], cols[s2]["d"], t_roll, m_a, M_a,
                                         self.epsilon, name, xkey)
                    _, w = encode_product(asm, xi, slots[s2].y, y_max, name, xkey)
                    entry = XiEntry(
                        key=xkey, xi=xi, w=w, y_other=slots[s2].y,
                        d_col=cols[s]["d"], d_other_col=cols[s2]["d"],
                        d_pre=d_pre, d_pre_next=d_next, d_pre_other=d_pre2, d_pre_other_next=d_next2,
                        t_roll=t_roll, m_a=m_a, M_a=M_a,
                    )
                    own[s].append(entry)
                    entries.append(entry)
            for s in members:
                p, k = s
                terms = [(slots[(p, j)].y, 1.0) for (q, j) in members if q == p and j <= k]
                terms += [(e.w, 1.0) for e in own[s]]
                asm.add_row(terms, "le", stock, f"depot:{z.id}:{service_tag(p, k)}")
            draw = [(slots[s].o, 0.5) for s in members] + [(slots[s].y, 0.5) for s in members]
            asm.add_row(draw, "le", stock, f"depot_draw:{z.id}")
        return entries


def build_problem(
    net: Network,
    tt: TimetableTemplate,
    scenario: DemandScenario,
    window: Tuple[int, int],
    weights: ObjectiveWeights,
    mode: str = NONLINEAR,
    start: Optional[WindowStart] = None,
    sigma_zero_slots: bool = False,
) -> StandardFormProblem:
    """Build a window using the scenario's expected rates as the forecast."""
    return ProblemBuilder(net, tt).build(
        scenario.base, window, weights, mode=mode, start=start, sigma_zero_slots=sigma_zero_slots
    )


# ============ Decoding & Checks ============

def slot_assignment(problem: StandardFormProblem, key: ServiceKey, y: int) -> Dict[int, float]:
    """Fix y of one slot together with the sign and change flags it implies."""
    slot = problem.slots[key]
    return {
        slot.y: float(y),
        slot.gamma: 1.0 if y >= 0 else 0.0,
        slot.eta: 1.0 if y != 0 else 0.0,
    }


def implied_flags(problem: StandardFormProblem, assignment: Dict[int, float]) -> Dict[int, float]:
    """Add gamma and eta for every slot whose y is fixed in the assignment."""
    full = dict(assignment)
    for key, slot in problem.slots.items():
        if slot.y in assignment:
            full.update(slot_assignment(problem, key, int(round(assignment[slot.y]))))
    return full


def decode_solution(problem: StandardFormProblem, x: np.ndarray) -> Tuple[DecisionVector, PassengerState]:
    """Read decisions and passenger counts of every in-window service out of a primal point."""
    x = np.asarray(x, dtype=float)
    dv = DecisionVector()
    ps = PassengerState()
    for key, c in problem.service_cols.items():
        par = problem.service_params[key]
        get = lambda role: float(x[c[role]]) if role in c else None
        slot = problem.slots.get(key)
        y = eta = 0
        o = 0.0
        gamma = 1
        if slot is not None:
            y = int(round(x[slot.y]))
            eta = int(round(x[slot.eta]))
            o = float(x[slot.o])
            gamma = int(round(x[slot.gamma]))
        d = get("d")
        tau_add = par["t_cons"] * eta if par["sigma"] else 0.0
        dv.services[key] = ServiceDecision(
            platform=key[0], k=key[1], d=d, a=get("a"), l=int(round(x[c["l"]])),
            y=y, eta=eta, o=o, gamma=gamma, tau=get("tau"), h=get("h"), r=get("r"),
            r_turn=get("r_turn"), tau_add=tau_add,
        )
        n = get("n")
        n_trans = get("n_trans") if "n_trans" in c else par["trans_const"]
        n_depart = get("n_depart")
        ps.services[key] = ServicePassengers(
            n=n,
            n_before=n + par["rho"] * (d - par["d_pre"]) + n_trans,
            n_after=get("n_after"),
            n_depart=n_depart,
            n_arrive=par["arrive_const"],
            n_trans=n_trans,
            cap=par["c_max"] * dv.services[key].l,
        )
    for e in problem.xi_entries:
        dv.xi[e.key] = int(round(x[e.xi]))
    return dv, ps


def check_order_brackets(problem: StandardFormProblem, x: np.ndarray, tol: float = 1e-6) -> None:
    """Raise when a solved point leaves the bracket an order encoding was built with."""
    for e in problem.xi_entries:
        f = x[e.d_col] - x[e.d_other_col] - e.t_roll
        if f < e.m_a - tol or f > e.M_a + tol:
            raise EncodingBoundError(
                f"Order flag {e.key}: d difference {f:.3f} outside [{e.m_a}, {e.M_a}]"
            )


def check_assignment(problem: StandardFormProblem, x: np.ndarray, tol: Optional[float] = None) -> List[Tuple[str, float]]:
    """Every violated row, bound and integrality tag of a point; empty when feasible."""
    tol = settings.feas_tol * 10 if tol is None else tol
    x = np.asarray(x, dtype=float)
    bad = problem.row_violations(x, tol)
    for j in problem.integrality_violations(x, settings.int_tol):
        bad.append((f"integrality:{problem.columns[j].name}", float(abs(x[j] - round(x[j])))))
    return bad


# ============ Objective ============

def eval_objective(
    dv: DecisionVector,
    ps: PassengerState,
    weights: ObjectiveWeights,
    mode: str,
    net: Network,
    tt: TimetableTemplate,
    keys: Optional[Iterable[ServiceKey]] = None,
) -> float:
    """
    Cost of decisions and passenger counts.

    Args:
        dv: Decisions per service
        ps: Passenger counts per service
        weights: Objective weights
        mode: nonlinear (true cost) or linearized (surrogate)
        net: Network the services run on
        tt: Timetable giving predetermined departures
        keys: Restrict to these services; all of dv when omitted
    """
    T = float(tt.t_ctrl)
    total = 0.0
    for key in (dv.services if keys is None else keys):
        s = dv.services[key]
        pax = ps.services[key]
        spec = net.platform(key[0])
        d_pre = tt.d_pre_at(*key)
        d_next = tt.d_pre_at(key[0], key[1] + 1)
        if mode == NONLINEAR:
            j_pass = pax.n * (s.d - d_pre) + pax.n_after * (d_next - s.d)
        elif mode == LINEARIZED:
            j_pass = weights.w3 * T * pax.n + T * pax.n_after
            total += weights.delay_tiebreak * (s.d - d_pre)
        else:
            raise ParameterError(f"Unknown objective mode: {mode}")
        j_cost = s.l * spec.E_energy + (s.eta * spec.E_add if spec.sigma == 1 else 0.0)
        total += weights.w1 * j_pass + weights.w2 * j_cost
    return total


def compute_w3(history: Sequence[Tuple[float, float, float]]) -> float:
    """
    Mean ratio of observed delay to remaining interval over historical departures.

    Args:
        history: (d_bar, d_pre, d_pre_next) per departure

    Returns:
        w3 for the linearized objective
    """
    if not history:
        raise ParameterError("compute_w3 needs at least one historical departure")
    ratios = []
    for d_bar, d_pre, d_next in history:
        if d_bar < d_pre:
            raise RangeError(f"Historical departure {d_bar} precedes its predetermined time {d_pre}")
        if d_next - d_bar <= 0:
            logger.warning(f"Rejected w3 entry: departure {d_bar} at or after next slot {d_next}")
            continue
        ratios.append((d_bar - d_pre) / (d_next - d_bar))
    if not ratios:
        raise ParameterError("Every historical departure was rejected")
    return float(np.mean(ratios))


# ============ MPS Export ============

MPS_HEADER = [
    "* Rail rescheduling window, surrogate (linear) objective",
    "* d_p{pid}_k{k} departure, a_ arrival, tau_ dwell, h_ headway",
    "* r_ running time, rturn_ turnaround, l_ composition",
    "* y_ units to/from depot, o_ |y|, gamma_ sign of y, eta_ composition change",
    "* xi_p{pid}_k{k}_q{pid}_j{k} departure order, w_ order times y",
    "* n_ waiting, ndep_ boarding, nafter_ left behind, ntrans_ transfers",
]


def export_mps(problem: StandardFormProblem, path: Path, name: str = "RAILSCHED") -> Path:
    """Write the surrogate problem in free MPS for cross-checking with other solvers."""
    eq = [r for r in problem.rows if r.sense == "eq"]
    le = [r for r in problem.rows if r.sense != "eq"]
    row_names = [f"E{i}" for i in range(len(eq))] + [f"L{i}" for i in range(len(le))]
    A = sparse.vstack([problem.A_eq, problem.A_ub]).tocsc()
    rhs = np.concatenate([problem.b_eq, problem.b_ub])

    lines = list(MPS_HEADER)
    lines.append(f"* objective constant {problem.const_lin!r}")
    lines += [f"NAME {name}", "ROWS", " N COST"]
    lines += [f" E {n}" for n in row_names[:len(eq)]]
    lines += [f" L {n}" for n in row_names[len(eq):]]
    lines.append("COLUMNS")
    in_int = False
    for j, col in enumerate(problem.columns):
        is_int = col.kind != CONTINUOUS
        if is_int and not in_int:
            lines.append(" MARKER 'MARKER' 'INTORG'")
        elif not is_int and in_int:
            lines.append(" MARKER 'MARKER' 'INTEND'")
        in_int = is_int
        if problem.c_lin[j] != 0.0:
            lines.append(f" {col.name} COST {problem.c_lin[j]!r}")
        start, end = A.indptr[j], A.indptr[j + 1]
        for i, v in zip(A.indices[start:end], A.data[start:end]):
            lines.append(f" {col.name} {row_names[i]} {float(v)!r}")
    if in_int:
        lines.append(" MARKER 'MARKER' 'INTEND'")
    lines.append("RHS")
    if problem.const_lin != 0.0:
        lines.append(f" RHS COST {-problem.const_lin!r}")
    for i, v in enumerate(rhs):
        if v != 0.0:
            lines.append(f" RHS {row_names[i]} {float(v)!r}")
    lines.append("BOUNDS")
    for j, col in enumerate(problem.columns):
        lb, ub = problem.lb[j], problem.ub[j]
        if lb == ub:
            lines.append(f" FX BND {col.name} {float(lb)!r}")
            continue
        if np.isfinite(lb):
            lines.append(f" LO BND {col.name} {float(lb)!r}")
        else:
            lines.append(f" MI BND {col.name}")
        if np.isfinite(ub):
            lines.append(f" UP BND {col.name} {float(ub)!r}")
        else:
            lines.append(f" PL BND {col.name}")
    lines.append("ENDATA")
    path = write_text(Path(path), "\n".join(lines) + "\n")
    logger.info(f"Exported {problem.n_cols} columns and {len(problem.rows)} rows to {path}")
    return path
