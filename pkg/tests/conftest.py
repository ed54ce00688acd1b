"""
Shared toy networks and fixtures.
"""
from typing import Dict, List, Optional, Sequence

import numpy as np
import pytest

from app.models.domain import DemandScenario, TimetableTemplate
from app.models.schemas import Network, NetworkFile, ObjectiveWeights, SolverConfig
from app.services.demand import profile_from_rates, sample_scenario
from app.services.network_model import NetworkLoader, build_timetable


def line_platforms(stations: Sequence[str], spacing: float = 1200.0, depot_station: Optional[str] = None,
                   depot_id: str = "Z1", line_id: str = "L1") -> List[Dict]:
    """Up platforms in station order, then down platforms back to the first station."""
    platforms = []
    for direction, order, suffix in (("up", list(stations), "U"), ("down", list(reversed(stations)), "D")):
        for s in order:
            entry = {
                "id": f"{s}{suffix}",
                "station_id": s,
                "line_id": line_id,
                "direction": direction,
                "km": spacing * list(stations).index(s),
            }
            if s == depot_station:
                entry.update(sigma=1, depot_id=depot_id)
            platforms.append(entry)
    return platforms


def shuttle_data(stations: Sequence[str] = ("A", "B"), n_train: int = 6, n_steps: int = 12,
                 fleet: Optional[Dict] = None, transfers: Optional[List[Dict]] = None) -> Dict:
    """Bidirectional line with a depot behind both platforms of the first station."""
    return {
        "lines": [{"id": "L1", "directions": ["up", "down"]}],
        "platforms": line_platforms(stations, depot_station=stations[0]),
        "depots": [{"id": "Z1", "platform_ids": [f"{stations[0]}U", f"{stations[0]}D"], "n_train": n_train}],
        "transfers": transfers or [],
        "timetable": {"t_ctrl": 240, "n_steps": n_steps},
        "fleet": fleet or {},
    }


def loop_data(n_train: int = 6, n_steps: int = 10, fleet: Optional[Dict] = None,
              transfers: Optional[List[Dict]] = None) -> Dict:
    """Two platforms run in one direction: A (depot-linked) then terminal B turning back to A."""
    return {
        "lines": [{"id": "L1", "directions": ["up"]}],
        "platforms": [
            {"id": "A", "station_id": "SA", "line_id": "L1", "direction": "up", "km": 0.0,
             "sigma": 1, "depot_id": "Z1"},
            {"id": "B", "station_id": "SB", "line_id": "L1", "direction": "up", "km": 1200.0},
        ],
        "depots": [{"id": "Z1", "platform_ids": ["A"], "n_train": n_train}],
        "transfers": transfers or [],
        "timetable": {"t_ctrl": 240, "n_steps": n_steps},
        "fleet": fleet or {},
    }


def network_from(data: Dict) -> Network:
    return NetworkLoader().resolve(NetworkFile.model_validate(data))


def flat_scenario(tt: TimetableTemplate, rates: Dict[str, float], seed: int = 0,
                  sampled: bool = True) -> DemandScenario:
    """Constant-rate profile; sampled counts, or the expected counts themselves."""
    profile = profile_from_rates(tt, {p: np.full(tt.n_steps + 1, float(rates.get(p, 0.0))) for p in tt.phase})
    if sampled:
        return sample_scenario(profile, tt.t_ctrl, seed)
    return DemandScenario(base=profile, sampled=profile, seed=seed)


@pytest.fixture
def loop_net() -> Network:
    return network_from(loop_data())


@pytest.fixture
def loop_tt(loop_net) -> TimetableTemplate:
    return build_timetable(loop_net)


@pytest.fixture
def shuttle_net() -> Network:
    return network_from(shuttle_data())


@pytest.fixture
def shuttle_tt(shuttle_net) -> TimetableTemplate:
    return build_timetable(shuttle_net)


@pytest.fixture
def weights() -> ObjectiveWeights:
    return ObjectiveWeights()


@pytest.fixture
def solver() -> SolverConfig:
    return SolverConfig(time_limit_s=60.0, early_term_window_s=60.0)


def cheap_change_data(**kwargs) -> Dict:
    """loop_data where a composition change at A costs almost nothing and fits in the regular dwell."""
    data = loop_data(**kwargs)
    data["platforms"][0].update(E_add=0.01, t_cons=20.0)
    return data


def no_depot_data(**kwargs) -> Dict:
    """loop_data without any depot access."""
    data = loop_data(**kwargs)
    for p in data["platforms"]:
        p.pop("sigma", None)
        p.pop("depot_id", None)
    data["depots"] = []
    return data
