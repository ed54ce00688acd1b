import re

import numpy as np
import pytest
import yaml

from app.exceptions import PairingError, ParameterError, RangeError
from app.models.domain import EpisodeLog, ServiceDecision, StepRecord
from app.models.schemas import ExperimentConfig
from app.services.demand import DemandStore, build_peak_profile
from app.services import harness
from app.services.harness import (
    compute_metrics,
    diagram_frame,
    export_diagram,
    fit_w3,
    line_trips,
    metrics_frame,
    pool_size,
    run_batch,
    scenario_seed,
    signed_gap,
    strategy_seed,
    write_comparison,
)
from app.services.network_model import build_timetable
from conftest import loop_data, network_from, shuttle_data


def _log(strategy, objectives, episode_id=0, seed=0, pre=None, times=None):
    pre = pre or [True] * len(objectives)
    times = times or [0.1] * len(objectives)
    records = [
        StepRecord(kappa=k, strategy=strategy, objective=v, window_objective=v, solve_time_s=t,
                   fallback_used=not ok, feasible_pre=ok, feasible=True)
        for k, (v, ok, t) in enumerate(zip(objectives, pre, times))
    ]
    return EpisodeLog(strategy=strategy, episode_id=episode_id, seed=seed, records=records)


# ============ Metrics ============

def test_signed_gap():
    assert signed_gap(120.0, 100.0) == pytest.approx(0.2)
    assert signed_gap(80.0, 100.0) == pytest.approx(-0.2)
    assert signed_gap(-80.0, -100.0) == pytest.approx(0.2)
    assert signed_gap(0.0, 0.0) == 0.0
    assert np.isnan(signed_gap(1.0, 0.0))


def test_zero_benchmark_episodes_are_left_out_of_gap_statistics():
    bench = [_log("benchmark", [0.0, 0.0], episode_id=0), _log("benchmark", [50.0, 50.0], episode_id=1)]
    runs = [_log("milp", [1.0, 0.0], episode_id=0), _log("milp", [55.0, 55.0], episode_id=1)]
    row = compute_metrics({"milp": runs}, bench).row("milp")
    assert row.instances == 2
    assert row.gap_mean == row.gap_max == row.gap_min == pytest.approx(0.1)
    assert np.isnan(runs[0].records[0].gap_vs_benchmark)
    assert runs[0].records[1].gap_vs_benchmark == 0.0


def test_all_gaps_undefined_gives_nan_row():
    bench = [_log("benchmark", [0.0])]
    row = compute_metrics({"milp": [_log("milp", [2.0])]}, bench).row("milp")
    assert row.instances == 1
    assert np.isnan(row.gap_mean)


def test_benchmark_against_itself_has_zero_gap():
    bench = [_log("benchmark", [10.0, 12.0, 9.0], episode_id=i) for i in range(3)]
    table = compute_metrics({"benchmark": bench}, bench)
    row = table.row("benchmark")
    assert row.instances == 3
    assert row.gap_max == row.gap_mean == row.gap_min == 0.0
    assert row.feasibility_pre == row.feasibility_post == 100.0


def test_episode_and_step_gaps():
    bench = [_log("benchmark", [100.0, 100.0])]
    other = [_log("milp", [130.0, 110.0])]
    episode = compute_metrics({"milp": other}, bench).row("milp")
    assert episode.instances == 1
    assert episode.gap_mean == pytest.approx(0.2)
    step = compute_metrics({"milp": other}, bench, level="step").row("milp")
    assert step.instances == 2
    assert step.gap_max == pytest.approx(0.3)
    assert step.gap_min == pytest.approx(0.1)
    assert other[0].records[0].gap_vs_benchmark == pytest.approx(0.3)
    with pytest.raises(ParameterError):
        compute_metrics({"milp": other}, bench, level="window")


def test_feasibility_counts_fallback_steps():
    bench = [_log("benchmark", [1.0] * 10)]
    pre = [True] * 9 + [False]
    table = compute_metrics({"learning_lp": [_log("learning_lp", [1.0] * 10, pre=pre)]}, bench)
    row = table.row("learning_lp")
    assert row.feasibility_pre == pytest.approx(90.0)
    assert row.feasibility_post == pytest.approx(100.0)


def test_timing_statistics():
    bench = [_log("benchmark", [1.0, 1.0, 1.0])]
    table = compute_metrics({"milp": [_log("milp", [1.0, 1.0, 1.0], times=[0.5, 1.5, 1.0])]}, bench)
    row = table.row("milp")
    assert (row.time_min, row.time_mean, row.time_max) == pytest.approx((0.5, 1.0, 1.5))


def test_unpaired_episodes_are_rejected():
    bench = [_log("benchmark", [1.0, 1.0], episode_id=0)]
    with pytest.raises(PairingError):
        compute_metrics({"milp": [_log("milp", [1.0, 1.0], episode_id=1)]}, bench)
    with pytest.raises(PairingError):
        compute_metrics({"milp": [_log("milp", [1.0, 1.0], seed=5)]}, bench)
    with pytest.raises(PairingError):
        compute_metrics({"milp": [_log("milp", [1.0])]}, bench)


def test_metrics_ignore_episode_order():
    bench = [_log("benchmark", [10.0 + i, 11.0], episode_id=i) for i in range(4)]
    runs = [_log("milp", [12.0 + i, 11.5], episode_id=i) for i in range(4)]
    a = metrics_frame(compute_metrics({"milp": runs}, bench))
    b = metrics_frame(compute_metrics({"milp": list(reversed(runs))}, list(reversed(bench))))
    assert a.equals(b)


def test_seeds_are_stable_and_distinct():
    assert scenario_seed(0, 1) == scenario_seed(0, 1)
    assert len({scenario_seed(0, e) for e in range(20)}) == 20
    assert scenario_seed(0, 1) != scenario_seed(1, 1)
    assert strategy_seed(0, 1, 0) != strategy_seed(0, 1, 1)


def test_w3_from_benchmark_departures(loop_tt):
    d = loop_tt.d_pre_at("A", 0) + 60.0
    log = EpisodeLog(strategy="benchmark", episode_id=0, seed=0,
                     services=[ServiceDecision(platform="A", k=0, d=d, a=d - 30.0, l=2)])
    assert fit_w3([log], loop_tt) == pytest.approx(1.0 / 3.0)


# ============ Diagrams ============

def _three_station_services(l_first=2):
    net = network_from(shuttle_data(stations=("A", "B", "C")))
    tt = build_timetable(net)
    dwell = net.timetable.dwell_regular
    services = []
    for p in tt.phase:
        for k in range(tt.n_steps):
            d = float(tt.d_pre_at(p, k))
            services.append(ServiceDecision(platform=p, k=k, d=d, a=d - dwell, l=2))
    services[[s.key for s in services].index(("AU", 0))].l = l_first
    return net, tt, services


def test_trips_follow_the_circulation():
    net, tt, services = _three_station_services()
    trips = line_trips(services, net, tt, "L1")
    first = trips[0]
    assert [s.platform for s in first] == ["AU", "BU", "CU"]
    frame = diagram_frame(trips, net, "L1")
    points = frame[frame["trip_id"] == 0]
    assert len(points) == 6
    assert list(points["event"]) == ["arrival", "departure"] * 3
    assert np.all(np.diff(points["time_s"].to_numpy()) >= 0)
    assert list(points["km"]) == [0.0, 0.0, 1200.0, 1200.0, 2400.0, 2400.0]


def _stroke_widths(svg: str, trip: int):
    pattern = re.compile(rf'<g id="trip{trip}_seg(\d+)">\s*<path[^>]*?stroke-width:\s*([\d.]+)')
    return {int(i): float(w) for i, w in pattern.findall(svg)}


def test_diagram_width_follows_composition(tmp_path):
    net, tt, services = _three_station_services(l_first=4)
    for s in services:
        if s.key != ("AU", 0):
            s.l = 1
    csv_path, svg_path = export_diagram(services, net, tt, "L1", tmp_path / "diagram")
    assert csv_path.exists()
    widths = _stroke_widths(svg_path.read_text(), 0)
    # first dwell and run carry 4 units, the dwell at B carries 1
    assert widths[0] / widths[2] == pytest.approx(4.0)
    assert widths[1] == pytest.approx(widths[0])


def test_diagram_files_are_reproducible(tmp_path):
    net, tt, services = _three_station_services()
    _, first = export_diagram(services, net, tt, "L1", tmp_path / "a" / "diagram")
    _, second = export_diagram(services, net, tt, "L1", tmp_path / "b" / "diagram")
    assert first.read_bytes() == second.read_bytes()


def test_unknown_line_is_rejected(tmp_path):
    net, tt, services = _three_station_services()
    with pytest.raises(RangeError):
        export_diagram(services, net, tt, "L9", tmp_path / "diagram")


# ============ Batch ============

def _write_experiment(tmp_path):
    data = loop_data(n_steps=8)
    (tmp_path / "net.yaml").write_text(yaml.safe_dump(data))
    tt = build_timetable(network_from(data))
    DemandStore().save_profile(build_peak_profile(tt, {"A": 0.2, "B": 0.05}, 3, 5), tmp_path / "demand.csv")
    return ExperimentConfig(
        network="net.yaml", demand="demand.csv", strategies=["benchmark", "fallback_only"],
        seeds=[0], episodes=2, steps=3, horizon=2, benchmark_time_limit_s=60.0, time_limit_s=60.0,
    )


def test_batch_run_and_comparison(tmp_path):
    exp = _write_experiment(tmp_path)
    logs = run_batch(exp, tmp_path, threads=1)
    assert set(logs) == {"benchmark", "fallback_only"}
    assert [log.episode_id for log in logs["benchmark"]] == [0, 1]
    assert all(len(log.records) == 3 for log in logs["fallback_only"])
    # both strategies see the same demand per episode
    assert [log.seed for log in logs["benchmark"]] == [log.seed for log in logs["fallback_only"]]

    table = compute_metrics(logs, logs["benchmark"])
    assert table.row("benchmark").gap_max == 0.0
    assert table.row("fallback_only").instances == 2
    out = tmp_path / "out"
    write_comparison(out, logs, table, None, exp, {"master": exp.seeds})
    assert (out / "metrics.csv").exists()
    assert (out / "timing.csv").exists()
    assert (out / "manifest.txt").exists()
    assert (out / "episodes" / "fallback_only_ep1.csv").exists()


def test_pool_size_is_capped_by_the_environment(monkeypatch, tmp_path):
    monkeypatch.setattr(harness, "settings", harness.settings.model_copy(update={"threads": 2}))
    exp = _write_experiment(tmp_path)
    assert pool_size(exp) == 2
    assert pool_size(exp.model_copy(update={"threads": 8})) == 2
    assert pool_size(exp.model_copy(update={"threads": 1})) == 1
    # the command-line flag overrides both
    assert pool_size(exp.model_copy(update={"threads": 8}), override=5) == 5
