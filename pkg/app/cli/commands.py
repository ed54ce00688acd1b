"""
Rail Rescheduling Engine - CLI Commands
One handler per subcommand; every handler reads an experiment file plus flag overrides.
"""
import argparse
import logging
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

from pydantic import ValidationError

from app.config import get_settings
from app.exceptions import NetworkFileError, ParameterError, RailSchedError, RangeError
from app.knowledge.operating_defaults import STRATEGIES
from app.models.schemas import ExperimentConfig, ScorerHyper
from app.services import harness
from app.services.demand import sample_scenario
from app.services.learning import StateLayout, generate_dataset, load_policy, save_dataset
from app.services.mpc_controller import (
    MpcController,
    episode_summary,
    save_episode,
    services_frame,
    services_from_frame,
)
from app.services.network_model import validate_network
from app.services.plant import initial_state
from app.services.presolve import format_mask
from app.services.resched_model import export_mps
from app.storage import read_csv, write_csv, write_manifest, write_text, write_yaml

logger = logging.getLogger(__name__)
settings = get_settings()

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2

VALIDATION_ERRORS = (ParameterError, RangeError, NetworkFileError, ValidationError)


class UsageError(Exception):
    """Unknown subcommand or flag."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# ============ Shared ============

def _experiment(args) -> Tuple[ExperimentConfig, Path]:
    exp, base_dir = harness.load_experiment(Path(args.config))
    overrides = {}
    for name in ("steps", "horizon", "episodes"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if getattr(args, "seed", None) is not None:
        overrides["seeds"] = [args.seed]
    if getattr(args, "lp_engine", None):
        overrides["lp_engine"] = args.lp_engine
    if overrides:
        exp = ExperimentConfig.model_validate({**exp.model_dump(), **overrides})
    return exp, base_dir


def _stack(exp: ExperimentConfig, base_dir: Path) -> harness.Stack:
    return harness.load_stack(str(harness.resolve(base_dir, exp.network)), str(harness.resolve(base_dir, exp.demand)))


def _threads(args, exp: ExperimentConfig) -> int:
    return harness.pool_size(exp, getattr(args, "threads", None))


def _out_dir(args, exp: ExperimentConfig, base_dir: Path) -> Path:
    return Path(args.out) if getattr(args, "out", None) else harness.resolve(base_dir, exp.output_dir)


def _manifest(out_dir: Path, exp: ExperimentConfig, command: str, seeds: Optional[Dict] = None) -> Path:
    """manifest.txt next to a command's outputs."""
    config = {"command": command, **exp.model_dump()}
    return write_manifest(Path(out_dir) / "manifest.txt", config, seeds or harness.run_seeds(exp))


# ============ Handlers ============

def net_validate(args) -> int:
    """Validate the network and its timetable."""
    exp, base_dir = _experiment(args)
    stack = _stack(exp, base_dir)
    report = validate_network(stack.net, stack.tt)
    for v in report.violations:
        print(f"{v.code}\t{v.subject}\t{v.message}")
    if not report.ok:
        logger.error(f"Network has {len(report.violations)} violation(s)")
        return EXIT_VALIDATION
    print("ok")
    return EXIT_OK


def demand_sample(args) -> int:
    """Sample one demand scenario and write it as CSV."""
    exp, base_dir = _experiment(args)
    stack = _stack(exp, base_dir)
    seed = harness.scenario_seed(exp.seeds[0], args.episode)
    scenario = sample_scenario(stack.base, stack.tt.t_ctrl, seed)
    out = Path(args.out) if args.out else _out_dir(args, exp, base_dir) / f"scenario_{seed}.csv"
    stack.store.save_scenario(scenario, out)
    _manifest(out.parent, exp, "demand sample", {"master_seeds": exp.seeds, "scenario_seeds": [seed]})
    print(out)
    return EXIT_OK


def solve_open(args) -> int:
    """Open-loop solve of one window from the step-0 state; writes decisions, summary and mask."""
    exp, base_dir = _experiment(args)
    stack = _stack(exp, base_dir)
    strategy = harness.strategy_config(exp, args.strategy)
    policy = None
    if strategy.is_learning:
        paths = harness.ensemble_paths(harness.resolve(base_dir, exp.ensemble_dir))
        policy = load_policy(paths, stack.net, stack.tt, strategy.horizon, strategy.action_steps, strategy.top_k)
    solver = harness.build_jobs(exp, base_dir, args.strategy, exp.weights)[0].solver
    scenario = sample_scenario(stack.base, stack.tt.t_ctrl, harness.scenario_seed(exp.seeds[0], 0))
    controller = MpcController(stack.net, stack.tt, exp.weights, strategy, solver, policy)
    if policy is not None:
        policy.reset()
    state = initial_state(stack.net, stack.tt, scenario)
    problem, mask = controller.build_window(state)
    _, record, dv = controller.step(state)

    out_dir = _out_dir(args, exp, base_dir)
    stem = f"open_{args.strategy}"
    write_csv(services_frame(sorted(dv.services.values(), key=lambda s: (s.d, s.key))), out_dir / f"{stem}.csv")
    write_yaml(out_dir / f"{stem}.yaml", {
        "strategy": args.strategy,
        "seed": scenario.seed,
        "window": list(problem.window),
        "window_objective": float(record.window_objective),
        "applied_objective": float(record.objective),
        "fallback_used": record.fallback_used,
        "fixed_integers": record.n_fixed,
        "free_integers": record.n_free,
    })
    write_text(out_dir / f"{stem}_mask.txt", format_mask(problem, mask))
    if args.mps:
        export_mps(problem, Path(args.mps))
    _manifest(out_dir, exp, f"solve open {args.strategy}",
              {"master_seeds": exp.seeds, "scenario_seeds": [scenario.seed]})
    logger.info(f"Open-loop {args.strategy}: J={record.window_objective:.6g} in {record.solve_time_s:.3f} s")
    print(out_dir / f"{stem}.csv")
    return EXIT_OK


def mpc_run(args) -> int:
    """Closed-loop episodes of one strategy."""
    exp, base_dir = _experiment(args)
    logs = harness.run_batch(exp, base_dir, [args.strategy], _threads(args, exp))
    out_dir = _out_dir(args, exp, base_dir)
    for log in logs[args.strategy]:
        save_episode(log, out_dir / "episodes")
        summary = episode_summary(log)
        print(f"episode {log.episode_id}: J={summary['total_objective']:.6g}, "
              f"fallback steps {summary['fallback_steps']}")
    _manifest(out_dir, exp, f"mpc run {args.strategy}")
    return EXIT_OK


def data_gen(args) -> int:
    """Label benchmark-visited states with every candidate's objective."""
    exp, base_dir = _experiment(args)
    stack = _stack(exp, base_dir)
    budget = args.budget or exp.dataset_budget
    layout = StateLayout.from_network(stack.net, exp.horizon, exp.action_steps)
    instances = harness.episode_instances(exp)
    steps = min(exp.steps, stack.tt.n_steps)
    n_episodes = -(-budget // steps)
    scenarios = []
    for i in range(n_episodes):
        _, seed, e = instances[i % len(instances)]
        # cycle past the configured episodes with fresh episode indices
        e += (i // len(instances)) * exp.episodes
        scenarios.append(sample_scenario(stack.base, stack.tt.t_ctrl, harness.scenario_seed(seed, e)))
    frame = generate_dataset(
        stack.net, stack.tt, scenarios, exp.weights, layout, budget, steps,
        harness.strategy_config(exp, "benchmark"),
        harness.build_jobs(exp, base_dir, "benchmark", exp.weights)[0].solver,
        label_mode=exp.label_mode,
    )
    out = Path(args.out) if args.out else harness.resolve(base_dir, exp.dataset or "dataset.csv")
    save_dataset(frame, out)
    _manifest(out.parent, exp, "data gen",
              {"master_seeds": exp.seeds, "scenario_seeds": [s.seed for s in scenarios]})
    print(out)
    return EXIT_OK


def train(args) -> int:
    """Train the scorer ensemble on a dataset."""
    exp, base_dir = _experiment(args)
    stack = _stack(exp, base_dir)
    dataset = Path(args.dataset) if args.dataset else harness.resolve(base_dir, exp.dataset or "dataset.csv")
    layout = StateLayout.from_network(stack.net, exp.horizon, exp.action_steps)
    hyper = ScorerHyper(
        iterations=args.iterations or exp.train_iterations,
        learning_rate=settings.learning_rate,
    )
    out_dir = Path(args.out) if args.out else harness.resolve(base_dir, exp.ensemble_dir or "ensemble")
    paths = harness.train_ensemble(dataset, layout, hyper, exp.seeds[0], out_dir, _threads(args, exp))
    _manifest(out_dir, exp, "train", {
        "master_seeds": exp.seeds,
        "member_seeds": [harness.strategy_seed(exp.seeds[0], i, 0) for i in range(len(paths))],
    })
    for p in paths:
        print(p)
    return EXIT_OK


def eval_compare(args) -> int:
    """Run the benchmark and every other strategy on shared scenarios and tabulate gaps."""
    exp, base_dir = _experiment(args)
    threads = _threads(args, exp)
    weights = exp.weights
    bench = harness.run_batch(exp, base_dir, ["benchmark"], threads)["benchmark"]
    if exp.fit_w3:
        stack = _stack(exp, base_dir)
        w3 = harness.fit_w3(bench, stack.tt)
        if w3 > 0:
            weights = weights.model_copy(update={"w3": w3})
        else:
            logger.warning(f"Fitted w3 = {w3}; keeping the configured w3 = {weights.w3}")
    others = [s for s in exp.strategies if s != "benchmark"]
    logs = {"benchmark": bench, **harness.run_batch(exp, base_dir, others, threads, weights)}
    table = harness.compute_metrics(logs, bench, level="episode")
    step_table = harness.compute_metrics(logs, bench, level="step")
    seeds = harness.run_seeds(exp)
    out_dir = _out_dir(args, exp, base_dir)
    path = harness.write_comparison(out_dir, logs, table, step_table, exp, seeds)
    for row in table.rows:
        print(f"{row.strategy}: gap mean {100 * row.gap_mean:.2f}%, time mean {row.time_mean:.3f} s, "
              f"feasible {row.feasibility_pre:.1f}% / {row.feasibility_post:.1f}%")
    print(path)
    return EXIT_OK


def export_diagram(args) -> int:
    """Time-distance diagram of one line from an applied-services CSV."""
    exp, base_dir = _experiment(args)
    stack = _stack(exp, base_dir)
    services = services_from_frame(read_csv(Path(args.episode)))
    out = Path(args.out) if args.out else _out_dir(args, exp, base_dir) / f"diagram_{args.line}"
    csv_path, svg_path = harness.export_diagram(services, stack.net, stack.tt, args.line, out)
    _manifest(out.parent, exp, f"export diagram {args.line}")
    print(csv_path)
    print(svg_path)
    return EXIT_OK


# ============ Parser ============

COMMANDS: Dict[Tuple[str, str], Callable] = {
    ("net", "validate"): net_validate,
    ("demand", "sample"): demand_sample,
    ("solve", "open"): solve_open,
    ("mpc", "run"): mpc_run,
    ("data", "gen"): data_gen,
    ("train", None): train,
    ("eval", "compare"): eval_compare,
    ("export", "diagram"): export_diagram,
}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="Experiment file (YAML)")
    p.add_argument("--seed", type=int, help="Master seed, replaces the file's seed list")
    p.add_argument("--threads", type=int, help="Worker pool size")
    p.add_argument("--steps", type=int)
    p.add_argument("--horizon", type=int)
    p.add_argument("--episodes", type=int)
    p.add_argument("--lp-engine", dest="lp_engine", choices=["simplex", "highs"])
    p.add_argument("--out", help="Output file or directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="railsched", description="MPC train rescheduling engine")
    groups = parser.add_subparsers(dest="group", parser_class=_Parser)
    groups.required = True

    net = groups.add_parser("net").add_subparsers(dest="action", parser_class=_Parser)
    _common(net.add_parser("validate"))

    demand = groups.add_parser("demand").add_subparsers(dest="action", parser_class=_Parser)
    p = demand.add_parser("sample")
    _common(p)
    p.add_argument("--episode", type=int, default=0)

    solve = groups.add_parser("solve").add_subparsers(dest="action", parser_class=_Parser)
    p = solve.add_parser("open")
    _common(p)
    p.add_argument("--strategy", required=True)
    p.add_argument("--mps", help="Also write the window problem in MPS format")

    mpc = groups.add_parser("mpc").add_subparsers(dest="action", parser_class=_Parser)
    p = mpc.add_parser("run")
    _common(p)
    p.add_argument("--strategy", required=True)

    data = groups.add_parser("data").add_subparsers(dest="action", parser_class=_Parser)
    p = data.add_parser("gen")
    _common(p)
    p.add_argument("--budget", type=int)

    p = groups.add_parser("train")
    _common(p)
    p.add_argument("--dataset")
    p.add_argument("--iterations", type=int)

    ev = groups.add_parser("eval").add_subparsers(dest="action", parser_class=_Parser)
    _common(ev.add_parser("compare"))

    export = groups.add_parser("export").add_subparsers(dest="action", parser_class=_Parser)
    p = export.add_parser("diagram")
    _common(p)
    p.add_argument("--episode", required=True, help="Applied-services CSV of an episode")
    p.add_argument("--line", required=True)
    return parser


def cli_dispatch(argv: Optional[List[str]] = None) -> int:
    """Parse and run one subcommand; 0 on success, 1 on validation errors, 2 on runtime errors."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        key = (args.group, getattr(args, "action", None))
        handler = COMMANDS.get(key)
        if handler is None:
            raise UsageError(f"{parser.format_usage()}railsched: error: missing subcommand for {args.group}")
        if getattr(args, "strategy", None) is not None and args.strategy not in STRATEGIES:
            raise ParameterError(f"Unknown strategy: {args.strategy}")
        return handler(args)
    except UsageError as e:
        print(str(e))
        return EXIT_VALIDATION
    except VALIDATION_ERRORS as e:
        logger.error(str(e))
        return EXIT_VALIDATION
    except RailSchedError as e:
        logger.error(f"{type(e).__name__}: {str(e)}")
        return EXIT_RUNTIME
    except Exception as e:
        logger.exception(f"Unexpected failure: {str(e)}")
        return EXIT_RUNTIME
