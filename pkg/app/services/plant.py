"""
Rail Rescheduling Engine - Plant Simulator
Applies one control step of decisions to realized demand: boarding, transfers,
depot stock and train compositions, in whole passengers and units.
"""
import logging
import math
from dataclasses import replace
from typing import Dict, Tuple

from app.exceptions import ConsistencyError
from app.models.domain import (
    DemandScenario,
    MpcState,
    PassengerState,
    PlatformLedger,
    ServiceDecision,
    ServiceKey,
    ServicePassengers,
    TimetableTemplate,
)
from app.models.schemas import Network
from app.services.demand import realized_arrivals

logger = logging.getLogger(__name__)


def initial_state(net: Network, tt: TimetableTemplate, scenario: DemandScenario) -> MpcState:
    """Step-0 state: realized interval-0 arrivals waiting, full depots, every train at l_regular."""
    waiting: Dict[str, int] = {}
    ledger: Dict[str, PlatformLedger] = {}
    for p in sorted(tt.phase):
        start = scenario.sampled.start[p]
        n = realized_arrivals(scenario.sampled, p, start, tt.d_pre_at(p, 0))
        waiting[p] = n
        ledger[p] = PlatformLedger(arrivals=n)
    in_flight = {chain: net.fleet.l_regular for chain in tt.chain_starts()}
    return MpcState(
        kappa=0,
        waiting=waiting,
        in_flight=in_flight,
        depot_stock={z.id: z.n_train for z in net.depots},
        scenario=scenario,
        ledger=ledger,
    )


class Plant:
    """Realizes applied decisions against the sampled scenario."""

    def __init__(self, net: Network, tt: TimetableTemplate):
        self.net = net
        self.tt = tt
        self.by_id = {p.id: p for p in net.platforms}
        self._chain: Dict[ServiceKey, ServiceKey] = {}

    def chain_of(self, key: ServiceKey) -> ServiceKey:
        if key not in self._chain:
            self._chain[key] = self.tt.chain_of(*key)
        return self._chain[key]

    def advance(self, state: MpcState, decisions: Dict[ServiceKey, ServiceDecision]) -> Tuple[MpcState, PassengerState]:
        """
        Apply the decisions of one control step.

        Args:
            state: State at the start of the step
            decisions: Decisions of the services departing in this step

        Returns:
            (state of the next step, realized passenger counts of the applied services)
        """
        profile = state.scenario.sampled
        waiting = dict(state.waiting)
        in_flight = dict(state.in_flight)
        depot_stock = dict(state.depot_stock)
        applied = dict(state.applied)
        departed = dict(state.departed)
        transfer_in = dict(state.transfer_in)
        ledger = {p: replace(led) for p, led in state.ledger.items()}
        realized = PassengerState()

        for key in sorted(decisions, key=lambda s: (decisions[s].d, s)):
            s = decisions[key]
            p, k = key
            spec = self.by_id[p]
            d_pre = self.tt.d_pre_at(p, k)
            d_next = self.tt.d_pre_at(p, k + 1)
            if not d_pre <= s.d <= d_next - 1 + 1e-6:
                raise ConsistencyError(f"Service {key}: departure {s.d} outside [{d_pre}, {d_next - 1}]")

            chain = self.chain_of(key)
            inherited = in_flight.get(chain, self.net.fleet.l_regular)
            if s.l != inherited + spec.sigma * s.y:
                raise ConsistencyError(
                    f"Service {key}: composition {s.l} != inherited {inherited} + y {s.y}"
                )
            if spec.sigma and s.y:
                depot_stock[spec.depot_id] -= s.y
                if depot_stock[spec.depot_id] < 0:
                    raise ConsistencyError(f"Depot {spec.depot_id} overdrawn by service {key}")
            in_flight[chain] = s.l

            before_gap = realized_arrivals(profile, p, d_pre, s.d)
            n_trans = transfer_in.pop(key, 0)
            n = waiting[p]
            n_before = n + before_gap + n_trans
            cap = s.l * self.net.fleet.c_max
            n_depart = min(cap, n_before)
            n_after = n_before - n_depart
            after_gap = realized_arrivals(profile, p, s.d, d_next)
            waiting[p] = n_after + after_gap

            led = ledger.setdefault(p, PlatformLedger())
            led.arrivals += before_gap + after_gap
            led.transfers_in += n_trans
            led.departures += n_depart

            self._route_transfers(key, n_depart, applied, waiting, ledger, transfer_in)
            feeder = self._line_pred(key)
            realized.services[key] = ServicePassengers(
                n=float(n), n_before=float(n_before), n_after=float(n_after), n_depart=float(n_depart),
                n_arrive=float(departed.get(feeder, 0)) if feeder else 0.0,
                n_trans=float(n_trans), cap=float(cap),
            )
            applied[key] = s
            departed[key] = n_depart

        for key in decisions:
            if key[0] in ledger and ledger[key[0]].balance(waiting[key[0]]) != 0:
                raise ConsistencyError(f"Passenger ledger of {key[0]} out of balance after {key}")

        nxt = MpcState(
            kappa=state.kappa + 1,
            waiting=waiting,
            in_flight=in_flight,
            depot_stock=depot_stock,
            scenario=state.scenario,
            applied=applied,
            departed=departed,
            transfer_in=transfer_in,
            ledger=ledger,
            plan_y=state.plan_y,
            plan_xi=state.plan_xi,
        )
        logger.debug(
            f"Plant step {state.kappa}: {len(decisions)} departures, "
            f"waiting {sum(waiting.values())}, depot {depot_stock}"
        )
        return nxt, realized

    def _line_pred(self, key: ServiceKey):
        pred = self.tt.circ_pred(*key)
        if pred is None or pred[2]:
            return None
        return pred[0], pred[1]

    def _route_transfers(self, key, n_depart, applied, waiting, ledger, transfer_in) -> None:
        """
        Passengers aboard (p, k) reach the next platform and a share walks to connecting platforms.

        The share is floor(beta * n_depart) whole passengers. The window model
        carries the expected share beta * n_depart instead, so its transfer
        counts can exceed the plant's by less than one passenger per connection.
        """
        succ = self.tt.circ_succ(*key)
        if succ is None or succ[2]:
            return
        q, kq, _ = succ
        for r, kr in sorted(self.tt.chi.get((q, kq), {}).items()):
            beta = self.tt.beta.get(q, {}).get(r, 0.0)
            moved = math.floor(beta * n_depart + 1e-9)
            if moved <= 0:
                continue
            target = (r, kr)
            # the connecting train already left: they wait for the next one
            if target in applied:
                waiting[r] += moved
                ledger.setdefault(r, PlatformLedger()).transfers_in += moved
            else:
                transfer_in[target] = transfer_in.get(target, 0) + moved


def plant_advance(
    state: MpcState,
    decisions: Dict[ServiceKey, ServiceDecision],
    net: Network,
    tt: TimetableTemplate,
) -> Tuple[MpcState, PassengerState]:
    return Plant(net, tt).advance(state, decisions)
