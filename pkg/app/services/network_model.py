"""
Rail Rescheduling Engine - Network Model
Platform topology, predetermined timetable and rolling-stock linkage.
"""
import logging
import math
from collections import OrderedDict
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from app.exceptions import ParameterError
from app.knowledge.operating_defaults import running_time_bounds, turnaround_bounds
from app.models.domain import CircLink, ServiceKey, TimetableTemplate
from app.models.schemas import (
    Network,
    NetworkFile,
    PlatformSpec,
    ValidationReport,
)
from app.storage import load_model

logger = logging.getLogger(__name__)


def segment_running_time(length_m: float, a_acc: float, a_dec: float, v_cruise: float) -> float:
    """
    Running time of a trapezoidal speed profile.

    Args:
        length_m: Segment length in metres
        a_acc: Acceleration, m/s^2
        a_dec: Deceleration, m/s^2
        v_cruise: Cruise speed, m/s

    Returns:
        Time in seconds; a triangular profile when the segment is too short to reach v_cruise
    """
    if min(length_m, a_acc, a_dec, v_cruise) <= 0:
        raise ParameterError(
            f"Running time needs positive inputs, got L={length_m}, a={a_acc}, b={a_dec}, v={v_cruise}"
        )
    ramp = v_cruise ** 2 / (2 * a_acc) + v_cruise ** 2 / (2 * a_dec)
    if length_m >= ramp:
        return v_cruise / a_acc + v_cruise / a_dec + (length_m - ramp) / v_cruise
    v_peak = math.sqrt(2 * length_m * a_acc * a_dec / (a_acc + a_dec))
    return v_peak / a_acc + v_peak / a_dec


# ============ Loading ============

class NetworkLoader:
    """Reads network files and derives links, running times and turnaround bands."""

    def load(self, path: Path) -> Network:
        spec = load_model(Path(path), NetworkFile)
        net = self.resolve(spec)
        logger.info(
            f"Loaded network {path}: {len(net.platforms)} platforms, "
            f"{len(net.lines)} lines, {len(net.depots)} depots"
        )
        return net

    def resolve(self, spec: NetworkFile) -> Network:
        platforms = self._derive_links(spec)
        platforms = self._fill_running_times(platforms, spec)
        platforms = self._close_loops(platforms, spec)
        return Network(
            lines=spec.lines,
            platforms=platforms,
            depots=spec.depots,
            transfers=spec.transfers,
            timetable=spec.timetable,
            fleet=spec.fleet,
            kinematics=spec.kinematics,
        )

    def _derive_links(self, spec: NetworkFile) -> List[PlatformSpec]:
        groups: Dict[Tuple[str, str], List[PlatformSpec]] = OrderedDict()
        for p in spec.platforms:
            groups.setdefault((p.line_id, p.direction), []).append(p)
        linked = {}
        for members in groups.values():
            for i, p in enumerate(members):
                linked[p.id] = p.model_copy(update={
                    "pred": members[i - 1].id if i > 0 else None,
                    "succ": members[i + 1].id if i + 1 < len(members) else None,
                })
        return [linked[p.id] for p in spec.platforms]

    def _fill_running_times(self, platforms: List[PlatformSpec], spec: NetworkFile) -> List[PlatformSpec]:
        by_id = {p.id: p for p in platforms}
        kin = spec.kinematics
        out = []
        for p in platforms:
            update = {}
            if p.succ is not None:
                r_avg = p.r_avg
                if r_avg is None:
                    length = abs(by_id[p.succ].km - p.km)
                    r_avg = segment_running_time(length, kin.a_acc, kin.a_dec, kin.v_cruise)
                    update["r_avg"] = r_avg
                low, high = running_time_bounds(r_avg)
                if p.r_min is None:
                    update["r_min"] = low
                if p.r_max is None:
                    update["r_max"] = high
            out.append(p.model_copy(update=update) if update else p)
        return out

    def _close_loops(self, platforms: List[PlatformSpec], spec: NetworkFile) -> List[PlatformSpec]:
        """Raise terminal turnaround times so each circulation loop spans whole control intervals."""
        tt = spec.timetable
        by_id = {p.id: p for p in platforms}
        for line in spec.lines:
            loop = circulation_order(platforms, line.id, line.directions)
            if not loop:
                continue
            terminals = [pid for pid in loop if by_id[pid].succ is None]
            nominal = 0.0
            for pid in loop:
                p = by_id[pid]
                if p.succ is not None:
                    nominal += p.r_avg + tt.dwell_regular
                else:
                    nominal += (p.r_turn_avg or tt.turnaround_regular) + tt.dwell_regular
            explicit = all(by_id[pid].r_turn_avg is not None for pid in terminals)
            layover = 0.0 if explicit else math.ceil(nominal / tt.t_ctrl - 1e-9) * tt.t_ctrl - nominal
            for pid in terminals:
                p = by_id[pid]
                r_turn_avg = p.r_turn_avg if p.r_turn_avg is not None else (
                    tt.turnaround_regular + layover / len(terminals)
                )
                low, high = turnaround_bounds(r_turn_avg)
                by_id[pid] = p.model_copy(update={
                    "r_turn_avg": r_turn_avg,
                    "r_turn_min": p.r_turn_min if p.r_turn_min is not None else low,
                    "r_turn_max": p.r_turn_max if p.r_turn_max is not None else high,
                })
        return [by_id[p.id] for p in platforms]


def circulation_order(platforms: List[PlatformSpec], line_id: str, directions: List[str]) -> List[str]:
    """Platform ids of a line in the order one train visits them."""
    order = []
    for direction in directions:
        order += [p.id for p in platforms if p.line_id == line_id and p.direction == direction]
    return order


# ============ Timetable ============

def build_timetable(net: Network) -> TimetableTemplate:
    """Generate the predetermined timetable and circulation links from nominal times."""
    spec = net.timetable
    T = spec.t_ctrl
    phase: Dict[str, int] = {}
    links: Dict[str, Optional[CircLink]] = {p.id: None for p in net.platforms}
    for line in net.lines:
        loop = circulation_order(net.platforms, line.id, line.directions)
        if not loop:
            continue
        u = float(spec.first_departure)
        times = {}
        for i, pid in enumerate(loop):
            if i > 0:
                prev = net.platform(loop[i - 1])
                u += _leg_time(prev, spec.dwell_regular)
            times[pid] = int(round(u))
        last = net.platform(loop[-1])
        closing = int(round(u + _leg_time(last, spec.dwell_regular)))
        for i, pid in enumerate(loop):
            phase[pid] = times[pid] % T
            prev_id = loop[i - 1]
            prev = net.platform(prev_id)
            arrive_step = (closing if i == 0 else times[pid]) // T
            links[pid] = CircLink(
                platform=prev_id,
                shift=arrive_step - times[prev_id] // T,
                turnaround=prev.succ is None,
            )
    tt = TimetableTemplate(
        t_ctrl=T,
        n_steps=spec.n_steps,
        phase=phase,
        links=links,
        beta=net.beta(),
    )
    tt.chi = build_transfer_flags(tt, net)
    return tt


def _leg_time(p: PlatformSpec, dwell: float) -> float:
    if p.succ is not None:
        return p.r_avg + dwell
    return p.r_turn_avg + dwell


def build_transfer_flags(tt: TimetableTemplate, net: Network) -> Dict[ServiceKey, Dict[str, int]]:
    """
    Transfer connections from predetermined times.

    Service (q, kq) feeds service (p, kp) when
    d_pre[p][kp-1] < d_pre[q][kq] + t_trans(q) <= d_pre[p][kp].
    """
    chi: Dict[ServiceKey, Dict[str, int]] = {}
    for t in net.transfers:
        q, p = t.from_platform, t.to_platform
        if q not in tt.phase or p not in tt.phase:
            continue
        t_trans = net.platform(q).t_trans
        for kq in range(tt.n_steps):
            arrive = tt.d_pre_at(q, kq) + t_trans
            kp = math.ceil((arrive - tt.epoch - tt.phase[p]) / tt.t_ctrl - 1e-12)
            if 0 <= kp < tt.n_steps:
                chi.setdefault((q, kq), {})[p] = kp
    return chi


# ============ Validation ============

def validate_network(net: Network, tt: Optional[TimetableTemplate] = None) -> ValidationReport:
    """List every broken network invariant; an empty report means the network is usable."""
    report = ValidationReport()
    by_id = {p.id: p for p in net.platforms}
    depot_ids = {z.id for z in net.depots}

    for p in net.platforms:
        if (p.sigma == 1) != (p.depot_id is not None):
            report.add("sigma_depot", p.id, f"Platform {p.id}: sigma={p.sigma} but depot_id={p.depot_id}")
        if p.depot_id is not None and p.depot_id not in depot_ids:
            report.add("unknown_depot", p.id, f"Platform {p.id} refers to unknown depot {p.depot_id}")
        if p.tau_min <= 0:
            report.add("tau_min", p.id, f"Platform {p.id}: tau_min must be positive")
        if p.h_min <= 0:
            report.add("h_min", p.id, f"Platform {p.id}: h_min must be positive")
        if p.succ is not None:
            if p.r_avg is None or p.r_min is None or p.r_max is None:
                report.add("running_time", p.id, f"Platform {p.id}: running times missing")
            elif not (p.r_min <= p.r_avg <= p.r_max):
                report.add("running_time", p.id, f"Platform {p.id}: need r_min <= r_avg <= r_max")
            if p.succ not in by_id or by_id[p.succ].pred != p.id:
                report.add("link", p.id, f"Platform {p.id}: succ/pred links disagree")
        else:
            if p.r_turn_min is None or p.r_turn_max is None or p.r_turn_min > p.r_turn_max:
                report.add("turnaround", p.id, f"Terminal {p.id}: turnaround bounds missing or inverted")
        if p.pred is not None and (p.pred not in by_id or by_id[p.pred].succ != p.id):
            report.add("link", p.id, f"Platform {p.id}: pred/succ links disagree")

    for line in net.lines:
        for direction in line.directions:
            members = [p for p in net.platforms if p.line_id == line.id and p.direction == direction]
            if not members:
                report.add("empty_direction", line.id, f"Line {line.id} has no {direction} platforms")
                continue
            firsts = [p for p in members if p.pred is None]
            if len(firsts) != 1:
                report.add("connectivity", line.id,
                           f"Line {line.id} {direction}: expected one first platform, found {len(firsts)}")
                continue
            seen = []
            cur = firsts[0]
            while cur is not None and cur.id not in seen and len(seen) <= len(members):
                seen.append(cur.id)
                cur = by_id.get(cur.succ) if cur.succ else None
            if sorted(seen) != sorted(m.id for m in members):
                skipped = sorted(set(m.id for m in members) - set(seen))
                report.add("connectivity", line.id,
                           f"Line {line.id} {direction}: succ chain misses {', '.join(skipped)}")

    for z in net.depots:
        if z.n_train < 0:
            report.add("depot_stock", z.id, f"Depot {z.id}: negative n_train")
        for pid in z.platform_ids:
            p = by_id.get(pid)
            if p is None or p.sigma != 1 or p.depot_id != z.id:
                report.add("depot_platform", z.id, f"Depot {z.id}: platform {pid} is not linked back")

    fleet = net.fleet
    if not (1 <= fleet.l_min <= fleet.l_regular <= fleet.l_max):
        report.add("fleet", "fleet", "Need 1 <= l_min <= l_regular <= l_max")
    if fleet.c_max <= 0:
        report.add("fleet", "fleet", "c_max must be positive")

    totals: Dict[str, float] = {}
    for t in net.transfers:
        if t.from_platform not in by_id or t.to_platform not in by_id:
            report.add("transfer", t.from_platform, f"Transfer {t.from_platform}->{t.to_platform}: unknown platform")
        if not (0.0 <= t.beta <= 1.0):
            report.add("beta", t.from_platform, f"Transfer {t.from_platform}->{t.to_platform}: beta outside [0, 1]")
        totals[t.from_platform] = totals.get(t.from_platform, 0.0) + t.beta
    for q, total in totals.items():
        if total > 1.0 + 1e-12:
            report.add("beta", q, f"Transfers out of {q} sum to {total:.3f} > 1")

    if tt is not None:
        for p, d in tt.d_pre.items():
            gaps = set(int(g) for g in (d[1:] - d[:-1]))
            if gaps and gaps != {tt.t_ctrl}:
                report.add("timetable", p, f"Platform {p}: departures not spaced by t_ctrl")
    return report
