"""
Rail Rescheduling Engine - Experiment Harness
Seeded batch runs across strategies, metric tables against the benchmark,
w3 fitting and time-distance diagrams.
"""
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np
import pandas as pd

from app.config import get_settings
from app.exceptions import PairingError, ParameterError, RangeError
from app.models.domain import DemandProfile, EpisodeLog, ServiceDecision, ServiceKey, TimetableTemplate
from app.models.schemas import (
    ExperimentConfig,
    MetricsRow,
    MetricsTable,
    Network,
    ObjectiveWeights,
    ScorerHyper,
    SolverConfig,
    StrategyConfig,
)
from app.services.demand import DemandStore, sample_scenario
from app.services.learning import (
    StateLayout,
    ensemble_hypers,
    load_dataset,
    load_policy,
    save_scorer,
    train_scorer,
)
from app.services.mpc_controller import MpcController, applied_history, save_episode
from app.services.network_model import NetworkLoader, build_timetable, circulation_order
from app.services.plant import initial_state
from app.services.resched_model import compute_w3
from app.storage import load_model, write_csv, write_manifest

logger = logging.getLogger(__name__)
settings = get_settings()

METRICS_COLUMNS = ["strategy", "instances", "gap_max", "gap_mean", "gap_min", "feasibility_pre", "feasibility_post"]
TIMING_COLUMNS = ["strategy", "instances", "time_max", "time_mean", "time_min"]
DIAGRAM_COLUMNS = ["line_id", "trip_id", "point_index", "time_s", "km", "event", "platform_id", "l"]
WEIGHT_SUFFIX = ".weights"
LINE_WIDTH_PER_UNIT = 0.8


# ============ Stack ============

@dataclass(frozen=True)
class Stack:
    net: Network
    tt: TimetableTemplate
    store: DemandStore
    base: DemandProfile


@lru_cache(maxsize=8)
def load_stack(network_path: str, demand_path: str) -> Stack:
    """Network, timetable and base demand; cached per worker process."""
    net = NetworkLoader().load(Path(network_path))
    tt = build_timetable(net)
    store = DemandStore()
    return Stack(net=net, tt=tt, store=store, base=store.load_profile(Path(demand_path), tt))


def load_experiment(path: Path) -> Tuple[ExperimentConfig, Path]:
    """Experiment file and the directory its relative paths resolve against."""
    path = Path(path)
    return load_model(path, ExperimentConfig), path.parent


def resolve(base_dir: Path, relative: Optional[str]) -> Optional[Path]:
    if relative is None:
        return None
    p = Path(relative)
    return p if p.is_absolute() else base_dir / p


def scenario_seed(master_seed: int, episode: int) -> int:
    """First word of SeedSequence([master_seed, episode])."""
    return int(np.random.SeedSequence([master_seed, episode]).generate_state(1)[0])


def strategy_seed(master_seed: int, episode: int, strategy_index: int) -> int:
    return int(np.random.SeedSequence([master_seed, episode, strategy_index]).generate_state(1)[0])


def strategy_config(exp: ExperimentConfig, kind: str) -> StrategyConfig:
    limit = exp.benchmark_time_limit_s if kind == "benchmark" else exp.time_limit_s
    return StrategyConfig(
        kind=kind,
        time_limit_s=limit,
        horizon=exp.horizon,
        action_steps=exp.action_steps,
        top_k=settings.top_k,
    )


def ensemble_paths(ensemble_dir: Optional[Path]) -> List[Path]:
    if ensemble_dir is None or not Path(ensemble_dir).is_dir():
        return []
    return sorted(Path(ensemble_dir).glob(f"*{WEIGHT_SUFFIX}"))


# ============ Batch Runs ============

@dataclass
class EpisodeJob:
    """Everything a worker needs to run one episode on its own."""
    network_path: str
    demand_path: str
    kind: str
    strategy: StrategyConfig
    weights: ObjectiveWeights
    solver: SolverConfig
    steps: int
    episode_id: int
    scenario_seed: int
    weight_paths: List[str] = field(default_factory=list)


def run_job(job: EpisodeJob) -> EpisodeLog:
    stack = load_stack(job.network_path, job.demand_path)
    scenario = sample_scenario(stack.base, stack.tt.t_ctrl, job.scenario_seed)
    policy = None
    if job.strategy.is_learning:
        policy = load_policy([Path(p) for p in job.weight_paths], stack.net, stack.tt,
                             job.strategy.horizon, job.strategy.action_steps, job.strategy.top_k)
    controller = MpcController(stack.net, stack.tt, job.weights, job.strategy, job.solver, policy)
    steps = min(job.steps, stack.tt.n_steps)
    return controller.run_episode(initial_state(stack.net, stack.tt, scenario), steps, job.episode_id)


def episode_instances(exp: ExperimentConfig) -> List[Tuple[int, int, int]]:
    """(episode_id, master seed, episode index) in a fixed order."""
    out = []
    for seed in exp.seeds:
        for e in range(exp.episodes):
            out.append((len(out), seed, e))
    return out


def run_seeds(exp: ExperimentConfig) -> Dict[str, List[int]]:
    """Master seeds and the scenario seed of every episode, as recorded in manifests."""
    return {
        "master_seeds": list(exp.seeds),
        "scenario_seeds": [scenario_seed(seed, e) for _, seed, e in episode_instances(exp)],
    }


def build_jobs(exp: ExperimentConfig, base_dir: Path, kind: str, weights: ObjectiveWeights) -> List[EpisodeJob]:
    strategy = strategy_config(exp, kind)
    weight_paths = [str(p) for p in ensemble_paths(resolve(base_dir, exp.ensemble_dir))]
    if strategy.is_learning and not weight_paths:
        raise ParameterError(f"Strategy {kind} needs trained weights in ensemble_dir")
    engine = exp.lp_engine or settings.lp_engine
    index = exp.strategies.index(kind) if kind in exp.strategies else len(exp.strategies)
    jobs = []
    for episode_id, seed, e in episode_instances(exp):
        solver = SolverConfig.from_settings(settings, lp_engine=engine, seed=strategy_seed(seed, e, index))
        jobs.append(EpisodeJob(
            network_path=str(resolve(base_dir, exp.network)),
            demand_path=str(resolve(base_dir, exp.demand)),
            kind=kind,
            strategy=strategy,
            weights=weights,
            solver=solver,
            steps=exp.steps,
            episode_id=episode_id,
            scenario_seed=scenario_seed(seed, e),
            weight_paths=weight_paths,
        ))
    return jobs


def pool_size(exp: ExperimentConfig, override: Optional[int] = None) -> int:
    """
    Worker count for a batch.

    An explicit override (the --threads flag) wins; otherwise the experiment's
    own value is capped by RAILSCHED_THREADS.
    """
    if override:
        return max(1, override)
    if exp.threads:
        return min(exp.threads, settings.worker_count)
    return settings.worker_count


def run_jobs(jobs: Sequence[EpisodeJob], threads: int = 1) -> List[EpisodeLog]:
    """Run episodes on a bounded process pool; results keep the job order."""
    if threads <= 1 or len(jobs) <= 1:
        return [run_job(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(run_job, jobs))


def run_batch(
    exp: ExperimentConfig,
    base_dir: Path,
    strategies: Optional[Sequence[str]] = None,
    threads: Optional[int] = None,
    weights: Optional[ObjectiveWeights] = None,
) -> Dict[str, List[EpisodeLog]]:
    threads = pool_size(exp, threads)
    weights = weights or exp.weights
    logs = {}
    for kind in strategies or exp.strategies:
        logger.info(f"Running {kind}: {len(exp.seeds) * exp.episodes} episode(s) on {threads} worker(s)")
        logs[kind] = run_jobs(build_jobs(exp, base_dir, kind, weights), threads)
    return logs


def fit_w3(bench_logs: Sequence[EpisodeLog], tt: TimetableTemplate) -> float:
    """w3 from the departures the benchmark applied."""
    history = []
    for log in bench_logs:
        history += applied_history(log.services, tt)
    w3 = compute_w3(history)
    logger.info(f"Fitted w3 = {w3:.6g} from {len(history)} departures")
    return w3


# ============ Metrics ============

def signed_gap(value: float, bench: float) -> float:
    """(value - bench) / |bench|; NaN when the benchmark is 0 and the value is not."""
    if bench == 0.0:
        return 0.0 if value == 0.0 else float("nan")
    return (value - bench) / abs(bench)


def _pair(logs: Sequence[EpisodeLog], bench: Sequence[EpisodeLog], strategy: str) -> List[Tuple[EpisodeLog, EpisodeLog]]:
    by_id = {(b.episode_id, b.seed): b for b in bench}
    ids = {(log.episode_id, log.seed) for log in logs}
    if ids != set(by_id) or len(ids) != len(logs):
        raise PairingError(f"Episodes of {strategy} do not match the benchmark episodes")
    pairs = []
    for log in sorted(logs, key=lambda lg: lg.episode_id):
        b = by_id[(log.episode_id, log.seed)]
        if [r.kappa for r in log.records] != [r.kappa for r in b.records]:
            raise PairingError(f"Episode {log.episode_id} of {strategy} covers different steps than the benchmark")
        pairs.append((log, b))
    return pairs


def compute_metrics(
    logs: Dict[str, Sequence[EpisodeLog]],
    bench: Sequence[EpisodeLog],
    level: str = "episode",
) -> MetricsTable:
    """
    Gap, time and feasibility per strategy against the benchmark episodes.

    Every step record gets its step-level gap. The table aggregates gaps of
    whole episodes (`level="episode"`) or of single steps (`level="step"`).
    Fallback steps stay in the gap statistics.
    """
    if level not in ("episode", "step"):
        raise ParameterError(f"Unknown metrics level: {level}")
    table = MetricsTable()
    for strategy in logs:
        pairs = _pair(logs[strategy], bench, strategy)
        gaps, times, pre, post = [], [], [], []
        for log, b in pairs:
            for r, rb in zip(log.records, b.records):
                r.gap_vs_benchmark = signed_gap(r.objective, rb.objective)
                times.append(r.solve_time_s)
                pre.append(r.feasible_pre)
                post.append(r.feasible)
                if level == "step":
                    gaps.append(r.gap_vs_benchmark)
            if level == "episode":
                gaps.append(signed_gap(log.total_objective, b.total_objective))
        if not gaps:
            raise PairingError(f"No instances to compare for {strategy}")
        defined = [g for g in gaps if not np.isnan(g)]
        if len(defined) < len(gaps):
            logger.warning(f"{strategy}: {len(gaps) - len(defined)} gap(s) undefined against a zero benchmark objective")
        if not defined:
            defined = [float("nan")]
        table.rows.append(MetricsRow(
            strategy=strategy,
            instances=len(gaps),
            gap_max=float(np.max(defined)),
            gap_mean=float(np.mean(defined)),
            gap_min=float(np.min(defined)),
            time_max=float(np.max(times)),
            time_mean=float(np.mean(times)),
            time_min=float(np.min(times)),
            feasibility_pre=100.0 * float(np.mean(pre)),
            feasibility_post=100.0 * float(np.mean(post)),
        ))
    return table


def metrics_frame(table: MetricsTable) -> pd.DataFrame:
    return pd.DataFrame([r.model_dump(include=set(METRICS_COLUMNS)) for r in table.rows], columns=METRICS_COLUMNS)


def timing_frame(table: MetricsTable) -> pd.DataFrame:
    return pd.DataFrame([r.model_dump(include=set(TIMING_COLUMNS)) for r in table.rows], columns=TIMING_COLUMNS)


def write_comparison(
    out_dir: Path,
    logs: Dict[str, Sequence[EpisodeLog]],
    table: MetricsTable,
    step_table: Optional[MetricsTable],
    exp: ExperimentConfig,
    seeds: Dict,
) -> Path:
    """metrics.csv, timing.csv, per-episode files and the manifest."""
    out_dir = Path(out_dir)
    write_csv(metrics_frame(table), out_dir / "metrics.csv")
    write_csv(timing_frame(table), out_dir / "timing.csv")
    if step_table is not None:
        write_csv(metrics_frame(step_table), out_dir / "metrics_steps.csv")
    for strategy_logs in logs.values():
        for log in strategy_logs:
            save_episode(log, out_dir / "episodes")
    write_manifest(out_dir / "manifest.txt", exp.model_dump(), seeds)
    return out_dir / "metrics.csv"


# ============ Diagrams ============

def line_trips(services: Sequence[ServiceDecision], net: Network, tt: TimetableTemplate,
               line_id: str) -> List[List[ServiceDecision]]:
    """Applied services of a line grouped into trips from a direction's first platform to its terminal."""
    line = next((ln for ln in net.lines if ln.id == line_id), None)
    if line is None:
        raise RangeError(f"Unknown line: {line_id}")
    on_line = {p.id for p in net.platforms if p.line_id == line_id}
    applied: Dict[ServiceKey, ServiceDecision] = {s.key: s for s in services if s.platform in on_line}
    trips = []
    for direction in line.directions:
        order = [pid for pid in circulation_order(net.platforms, line_id, [direction])]
        if not order:
            continue
        first = order[0]
        for key in sorted(k for k in applied if k[0] == first):
            trip = [applied[key]]
            cur = key
            while True:
                succ = tt.circ_succ(*cur)
                if succ is None or succ[2] or (succ[0], succ[1]) not in applied:
                    break
                cur = (succ[0], succ[1])
                trip.append(applied[cur])
            trips.append(trip)
    return trips


def diagram_frame(trips: List[List[ServiceDecision]], net: Network, line_id: str) -> pd.DataFrame:
    rows = []
    for trip_id, trip in enumerate(trips):
        points = []
        for s in trip:
            km = net.platform(s.platform).km
            points.append((s.a, km, "arrival", s.platform, s.l))
            points.append((s.d, km, "departure", s.platform, s.l))
        points.sort(key=lambda pt: (pt[0], pt[2] != "arrival"))
        for i, (t, km, event, pid, units) in enumerate(points):
            rows.append({"line_id": line_id, "trip_id": trip_id, "point_index": i, "time_s": t, "km": km,
                         "event": event, "platform_id": pid, "l": units})
    return pd.DataFrame(rows, columns=DIAGRAM_COLUMNS)


def export_diagram(services: Sequence[ServiceDecision], net: Network, tt: TimetableTemplate,
                   line_id: str, out_stem: Path) -> Tuple[Path, Path]:
    """
    Time-distance diagram of a line: a polyline per trip with width proportional to composition.

    Returns:
        (CSV of polyline points, SVG rendering)
    """
    trips = line_trips(services, net, tt, line_id)
    frame = diagram_frame(trips, net, line_id)
    out_stem = Path(out_stem)
    csv_path = write_csv(frame, out_stem.with_suffix(".csv"))

    plt.rcParams["svg.hashsalt"] = "railsched"
    fig, ax = plt.subplots(figsize=(10, 5))
    for trip_id, group in frame.groupby("trip_id", sort=True):
        units = group["l"].to_numpy()
        t = group["time_s"].to_numpy()
        km = group["km"].to_numpy()
        for i in range(len(group) - 1):
            ax.plot(t[i:i + 2], km[i:i + 2], color="tab:blue", linewidth=LINE_WIDTH_PER_UNIT * units[i],
                    solid_capstyle="butt", gid=f"trip{trip_id}_seg{i}")
    ax.set_xlabel("time (s)")
    ax.set_ylabel("position (m)")
    ax.set_title(f"Line {line_id}")
    svg_path = out_stem.with_suffix(".svg")
    svg_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(svg_path, format="svg", metadata={"Date": None})
    plt.close(fig)
    logger.info(f"Diagram of line {line_id}: {len(trips)} trip(s) -> {svg_path}")
    return csv_path, svg_path


# ============ Ensemble Training ============

@dataclass
class TrainJob:
    dataset_path: str
    layout: StateLayout
    hyper: ScorerHyper
    seed: int
    out_path: str


def run_train_job(job: TrainJob) -> Tuple[str, List[float]]:
    frame = load_dataset(Path(job.dataset_path), job.layout)
    model, normalizer, report = train_scorer(frame, job.layout, job.hyper, job.seed)
    save_scorer(model, normalizer, job.layout, job.seed, Path(job.out_path))
    return job.out_path, report.moving_average


def train_ensemble(
    dataset_path: Path,
    layout: StateLayout,
    base: ScorerHyper,
    master_seed: int,
    out_dir: Path,
    threads: int = 1,
) -> List[Path]:
    """Train one scorer per grid point as independent jobs and write the loss curves."""
    out_dir = Path(out_dir)
    jobs = [
        TrainJob(str(dataset_path), layout, hyper, strategy_seed(master_seed, i, 0),
                 str(out_dir / f"scorer_{i:02d}{WEIGHT_SUFFIX}"))
        for i, hyper in enumerate(ensemble_hypers(base))
    ]
    if threads <= 1:
        results = [run_train_job(job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_train_job, jobs))
    curves = pd.DataFrame({f"scorer_{i:02d}": pd.Series(curve) for i, (_, curve) in enumerate(results)})
    curves.insert(0, "iteration", np.arange(len(curves)))
    write_csv(curves, out_dir / "training_loss.csv")
    return [Path(path) for path, _ in results]
