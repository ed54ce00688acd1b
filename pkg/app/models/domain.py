"""
Rail Rescheduling Engine - Domain Containers
Timetable, demand, decision and passenger records shared by the services.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

ServiceKey = Tuple[str, int]
XiKey = Tuple[str, int, str, int]


# ============ Timetable ============

@dataclass(frozen=True)
class CircLink:
    """Circulation predecessor of a platform: the platform the train comes from."""
    platform: str
    shift: int
    turnaround: bool


@dataclass
class TimetableTemplate:
    """Predetermined timetable on equal control intervals.

    Service k of every platform departs inside control step k, so a window of
    steps [kappa, kappa + N) holds services k in the same range at every platform.
    """
    t_ctrl: int
    n_steps: int
    phase: Dict[str, int]
    links: Dict[str, Optional[CircLink]]
    chi: Dict[ServiceKey, Dict[str, int]] = field(default_factory=dict)
    beta: Dict[str, Dict[str, float]] = field(default_factory=dict)
    epoch: int = 0

    @property
    def d_pre(self) -> Dict[str, np.ndarray]:
        return {
            p: self.phase[p] + self.t_ctrl * np.arange(self.n_steps, dtype=np.int64)
            for p in self.phase
        }

    @property
    def horizon_end(self) -> int:
        return self.epoch + self.n_steps * self.t_ctrl

    def d_pre_at(self, p: str, k: int) -> int:
        """Predetermined departure of service k, extrapolated outside the table."""
        return self.epoch + self.phase[p] + k * self.t_ctrl

    def step_start(self, kappa: int) -> int:
        return self.epoch + kappa * self.t_ctrl

    def circ_pred(self, p: str, k: int) -> Optional[Tuple[str, int, bool]]:
        """Service the train of (p, k) ran before, or None for a chain start."""
        link = self.links.get(p)
        if link is None:
            return None
        kq = k - link.shift
        if kq < 0:
            return None
        return link.platform, kq, link.turnaround

    def circ_succ(self, q: str, kq: int) -> Optional[Tuple[str, int, bool]]:
        for p, link in self.links.items():
            if link is not None and link.platform == q:
                k = kq + link.shift
                if k < self.n_steps:
                    return p, k, link.turnaround
        return None

    @property
    def service_link(self) -> Dict[str, Dict[int, int]]:
        """Turnaround linkage keyed by the receiving first platform: k -> terminal service."""
        table: Dict[str, Dict[int, int]] = {}
        for p, link in self.links.items():
            if link is None or not link.turnaround:
                continue
            table[p] = {k: k - link.shift for k in range(link.shift, self.n_steps)}
        return table

    def chain_of(self, p: str, k: int) -> ServiceKey:
        """First service of the train chain that (p, k) belongs to."""
        cur = (p, k)
        while True:
            prev = self.circ_pred(*cur)
            if prev is None:
                return cur
            cur = (prev[0], prev[1])

    def chain_starts(self) -> List[ServiceKey]:
        starts = []
        for p in sorted(self.phase):
            for k in range(self.n_steps):
                if self.circ_pred(p, k) is None:
                    starts.append((p, k))
        return starts

    def chi_target(self, q: str, kq: int, p: str) -> Optional[int]:
        return self.chi.get((q, kq), {}).get(p)

    def transfer_sources(self, p: str, k: int) -> List[ServiceKey]:
        return sorted(src for src, targets in self.chi.items() if targets.get(p) == k)


# ============ Demand ============

@dataclass
class DemandProfile:
    """Piecewise-constant arrivals stored as passengers per interval.

    Interval j of platform p covers (start[p] + j*t_ctrl, start[p] + (j+1)*t_ctrl];
    interval k+1 is the one between departures k and k+1.
    """
    t_ctrl: int
    start: Dict[str, float]
    per_interval: Dict[str, np.ndarray]

    @property
    def horizon_len(self) -> int:
        return min(len(v) for v in self.per_interval.values()) if self.per_interval else 0

    @property
    def platform_ids(self) -> List[str]:
        return sorted(self.per_interval)

    def rate(self, p: str, j: int) -> float:
        """Arrival rate in passengers per second of interval j."""
        return float(self.per_interval[p][j]) / self.t_ctrl

    def count(self, p: str, j: int) -> float:
        return float(self.per_interval[p][j])


@dataclass
class DemandScenario:
    base: DemandProfile
    sampled: DemandProfile
    seed: int


# ============ Decisions & Passengers ============

@dataclass
class ServiceDecision:
    """Decisions and derived operation times of one service."""
    platform: str
    k: int
    d: float
    a: float
    l: int
    y: int = 0
    eta: int = 0
    o: float = 0.0
    gamma: int = 1
    tau: float = 0.0
    h: Optional[float] = None
    r: Optional[float] = None
    r_turn: Optional[float] = None
    tau_add: float = 0.0

    @property
    def key(self) -> ServiceKey:
        return self.platform, self.k

    @property
    def arrival_next(self) -> Optional[float]:
        """Arrival time the train reaches its circulation successor."""
        if self.r is not None:
            return self.d + self.r
        if self.r_turn is not None:
            return self.d + self.r_turn
        return None


@dataclass
class DecisionVector:
    services: Dict[ServiceKey, ServiceDecision] = field(default_factory=dict)
    xi: Dict[XiKey, int] = field(default_factory=dict)


@dataclass
class ServicePassengers:
    n: float
    n_before: float
    n_after: float
    n_depart: float
    n_arrive: float
    n_trans: float
    cap: float


@dataclass
class PassengerState:
    services: Dict[ServiceKey, ServicePassengers] = field(default_factory=dict)


@dataclass
class WindowStart:
    """Initial condition of a window: what the plant has already realized."""
    kappa: int
    waiting: Dict[str, float]
    depot_stock: Dict[str, int]
    applied: Dict[ServiceKey, ServiceDecision] = field(default_factory=dict)
    departed: Dict[ServiceKey, float] = field(default_factory=dict)
    transfer_in: Dict[ServiceKey, float] = field(default_factory=dict)


# ============ Closed Loop ============

@dataclass
class PlatformLedger:
    """Cumulative passenger counts of one platform in whole passengers."""
    arrivals: int = 0
    transfers_in: int = 0
    departures: int = 0

    def balance(self, waiting: int) -> int:
        """Zero when every passenger is accounted for."""
        return self.arrivals + self.transfers_in - self.departures - waiting


@dataclass
class MpcState:
    """Everything the controller needs at the start of control step kappa."""
    kappa: int
    waiting: Dict[str, int]
    in_flight: Dict[ServiceKey, int]
    depot_stock: Dict[str, int]
    scenario: DemandScenario
    applied: Dict[ServiceKey, ServiceDecision] = field(default_factory=dict)
    departed: Dict[ServiceKey, int] = field(default_factory=dict)
    transfer_in: Dict[ServiceKey, int] = field(default_factory=dict)
    ledger: Dict[str, PlatformLedger] = field(default_factory=dict)
    plan_y: Dict[ServiceKey, int] = field(default_factory=dict)
    plan_xi: Dict[XiKey, int] = field(default_factory=dict)

    @property
    def fleet_units(self) -> int:
        return sum(self.in_flight.values()) + sum(self.depot_stock.values())

    def window_start(self) -> WindowStart:
        return WindowStart(
            kappa=self.kappa,
            waiting={p: float(n) for p, n in self.waiting.items()},
            depot_stock=dict(self.depot_stock),
            applied=self.applied,
            departed={k: float(v) for k, v in self.departed.items()},
            transfer_in={k: float(v) for k, v in self.transfer_in.items()},
        )


@dataclass
class StepRecord:
    kappa: int
    strategy: str
    objective: float
    window_objective: float
    solve_time_s: float
    fallback_used: bool
    feasible_pre: bool
    feasible: bool
    n_fixed: int = 0
    n_free: int = 0
    flips: int = 0
    gap_vs_benchmark: Optional[float] = None


@dataclass
class EpisodeLog:
    strategy: str
    episode_id: int
    seed: int
    records: List[StepRecord] = field(default_factory=list)
    services: List[ServiceDecision] = field(default_factory=list)

    @property
    def total_objective(self) -> float:
        return float(sum(r.objective for r in self.records))

    @property
    def solve_times(self) -> List[float]:
        return [r.solve_time_s for r in self.records]
