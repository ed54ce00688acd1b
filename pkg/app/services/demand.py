"""
Rail Rescheduling Engine - Demand
Piecewise-constant demand profiles, Poisson scenarios and interval integration.
"""
import logging
import math
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import pandas as pd

from app.exceptions import NetworkFileError, ParameterError, RangeError
from app.models.domain import DemandProfile, DemandScenario, TimetableTemplate
from app.storage import read_csv, write_csv

logger = logging.getLogger(__name__)

POISSON_EXACT_BELOW = 30.0
DEMAND_COLUMNS = ["platform_id", "interval_index", "rate_pax_per_s"]


def profile_from_rates(
    tt: TimetableTemplate,
    rates: Dict[str, np.ndarray],
) -> DemandProfile:
    """Attach per-interval rates (pax/s) to the timetable's intervals."""
    per_interval = {}
    for p, r in rates.items():
        r = np.asarray(r, dtype=float)
        if np.any(r < 0):
            raise ParameterError(f"Negative arrival rate at platform {p}")
        per_interval[p] = r * tt.t_ctrl
    start = {p: float(tt.d_pre_at(p, -1)) for p in rates}
    return DemandProfile(t_ctrl=tt.t_ctrl, start=start, per_interval=per_interval)


def build_peak_profile(
    tt: TimetableTemplate,
    base_rates: Dict[str, float],
    peak_start: int,
    peak_end: int,
    peak_factor: float = 2.0,
) -> DemandProfile:
    """
    Synthetic profile: constant off-peak rate per platform, multiplied inside a peak window.

    Args:
        tt: Timetable the intervals belong to
        base_rates: Off-peak rate per platform, pax/s
        peak_start: First interval index of the peak
        peak_end: Interval index after the peak
        peak_factor: Multiplier applied inside the peak
    """
    n = tt.n_steps + 1
    rates = {}
    for p, base in base_rates.items():
        r = np.full(n, float(base))
        r[peak_start:peak_end] *= peak_factor
        rates[p] = r
    return profile_from_rates(tt, rates)


def _poisson_draws(rng: np.random.Generator, means: np.ndarray) -> np.ndarray:
    counts = np.zeros_like(means)
    small = means < POISSON_EXACT_BELOW
    if np.any(small):
        counts[small] = rng.poisson(means[small])
    if np.any(~small):
        large = means[~small]
        counts[~small] = np.maximum(0.0, np.round(rng.normal(large, np.sqrt(large))))
    return counts


def sample_scenario(base: DemandProfile, t_ctrl: int, seed: int) -> DemandScenario:
    """
    Draw realized interval counts, independently Poisson with mean base rate times t_ctrl.

    Args:
        base: Expected-rate profile
        t_ctrl: Interval length, s
        seed: Seed of the generator; equal seeds give equal scenarios

    Returns:
        Scenario with integer counts per interval in `sampled`
    """
    rng = np.random.default_rng(seed)
    sampled = {}
    for p in base.platform_ids:
        means = np.asarray(base.per_interval[p], dtype=float) * (t_ctrl / base.t_ctrl)
        sampled[p] = _poisson_draws(rng, means)
    profile = DemandProfile(t_ctrl=t_ctrl, start=dict(base.start), per_interval=sampled)
    return DemandScenario(base=base, sampled=profile, seed=seed)


def cumulative_arrivals(profile: DemandProfile, p: str, t: float) -> float:
    """Expected arrivals at platform p from the start of interval 0 until time t."""
    if p not in profile.per_interval:
        raise RangeError(f"No demand for platform {p}")
    counts = profile.per_interval[p]
    offset = t - profile.start[p]
    span = len(counts) * profile.t_ctrl
    if offset < -1e-9 or offset > span + 1e-9:
        raise RangeError(
            f"Time {t} outside demand horizon [{profile.start[p]}, {profile.start[p] + span}] at {p}"
        )
    offset = min(max(offset, 0.0), span)
    j = min(int(offset // profile.t_ctrl), len(counts) - 1)
    inside = offset - j * profile.t_ctrl
    return float(np.sum(counts[:j])) + float(counts[j]) * inside / profile.t_ctrl


def arrivals_between(profile: DemandProfile, p: str, t1: float, t2: float) -> float:
    """Integral of the piecewise-constant rate over [t1, t2)."""
    if t2 < t1:
        raise RangeError(f"Need t1 <= t2, got {t1} > {t2}")
    return cumulative_arrivals(profile, p, t2) - cumulative_arrivals(profile, p, t1)


def realized_arrivals(profile: DemandProfile, p: str, t1: float, t2: float) -> int:
    """Whole passengers arriving in [t1, t2) when interval counts are integers."""
    if t2 < t1:
        raise RangeError(f"Need t1 <= t2, got {t1} > {t2}")
    upper = math.floor(cumulative_arrivals(profile, p, t2) + 1e-9)
    lower = math.floor(cumulative_arrivals(profile, p, t1) + 1e-9)
    return int(upper - lower)


# ============ Files ============

class DemandStore:
    """CSV persistence of demand profiles and sampled scenarios."""

    def load_profile(self, path: Path, tt: TimetableTemplate) -> DemandProfile:
        frame = read_csv(path, DEMAND_COLUMNS)
        n = tt.n_steps + 1
        rates: Dict[str, np.ndarray] = {}
        for p in sorted(frame["platform_id"].astype(str).unique()):
            if p not in tt.phase:
                raise NetworkFileError(f"Demand file {path} names unknown platform {p}")
            rates[p] = np.zeros(n)
        for row in frame.itertuples(index=False):
            j = int(row.interval_index)
            if not 0 <= j < n:
                raise NetworkFileError(f"Demand file {path}: interval {j} outside 0..{n - 1}")
            rates[str(row.platform_id)][j] = float(row.rate_pax_per_s)
        for p in tt.phase:
            rates.setdefault(p, np.zeros(n))
        logger.info(f"Loaded demand {path}: {len(frame)} cells")
        return profile_from_rates(tt, rates)

    def save_profile(self, profile: DemandProfile, path: Path) -> Path:
        records = [
            {"platform_id": p, "interval_index": j, "rate_pax_per_s": profile.rate(p, j)}
            for p in profile.platform_ids
            for j in range(len(profile.per_interval[p]))
        ]
        return write_csv(pd.DataFrame.from_records(records, columns=DEMAND_COLUMNS), path)

    def save_scenario(self, scenario: DemandScenario, path: Path) -> Path:
        records = [
            {
                "platform_id": p,
                "interval_index": j,
                "rate_pax_per_s": scenario.sampled.rate(p, j),
                "count": int(scenario.sampled.count(p, j)),
                "seed": scenario.seed,
            }
            for p in scenario.sampled.platform_ids
            for j in range(len(scenario.sampled.per_interval[p]))
        ]
        columns = DEMAND_COLUMNS + ["count", "seed"]
        return write_csv(pd.DataFrame.from_records(records, columns=columns), path)

    def load_scenario(self, path: Path, base: DemandProfile) -> DemandScenario:
        frame = read_csv(path, DEMAND_COLUMNS + ["count", "seed"])
        counts = {p: np.zeros_like(v) for p, v in base.per_interval.items()}
        for row in frame.itertuples(index=False):
            counts[str(row.platform_id)][int(row.interval_index)] = float(row.count)
        seed: Optional[int] = int(frame["seed"].iloc[0]) if len(frame) else 0
        sampled = DemandProfile(t_ctrl=base.t_ctrl, start=dict(base.start), per_interval=counts)
        return DemandScenario(base=base, sampled=sampled, seed=seed)
