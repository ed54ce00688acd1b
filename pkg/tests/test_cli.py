import pytest
import yaml

from app.cli.commands import EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION, cli_dispatch
from app.models.schemas import ScorerHyper
from app.services.demand import DemandStore, build_peak_profile
from app.services.learning import Normalizer, StateLayout, build_scorer, save_scorer
from app.services.network_model import build_timetable
from conftest import loop_data, network_from


@pytest.fixture
def experiment(tmp_path):
    data = loop_data(n_steps=8)
    (tmp_path / "net.yaml").write_text(yaml.safe_dump(data))
    tt = build_timetable(network_from(data))
    DemandStore().save_profile(build_peak_profile(tt, {"A": 0.2, "B": 0.05}, 3, 5), tmp_path / "demand.csv")
    config = {
        "network": "net.yaml",
        "demand": "demand.csv",
        "strategies": ["benchmark", "milp", "fallback_only"],
        "seeds": [0],
        "episodes": 1,
        "steps": 3,
        "horizon": 2,
        "output_dir": "out",
        "ensemble_dir": "ensemble",
        "benchmark_time_limit_s": 60.0,
        "time_limit_s": 60.0,
    }
    path = tmp_path / "experiment.yaml"
    path.write_text(yaml.safe_dump(config))
    return path


def test_network_validation_passes(experiment, capsys):
    assert cli_dispatch(["net", "validate", "--config", str(experiment)]) == EXIT_OK
    assert capsys.readouterr().out.strip().endswith("ok")


@pytest.mark.parametrize("argv", [
    ["teleport"],
    ["net"],
    ["net", "validate"],
    ["solve", "open", "--config", "x.yaml"],
])
def test_usage_errors_exit_with_validation_code(argv):
    assert cli_dispatch(argv) == EXIT_VALIDATION


def test_unknown_strategy_is_rejected(experiment):
    argv = ["solve", "open", "--config", str(experiment), "--strategy", "psychic"]
    assert cli_dispatch(argv) == EXIT_VALIDATION


def test_missing_experiment_file(tmp_path):
    assert cli_dispatch(["net", "validate", "--config", str(tmp_path / "absent.yaml")]) == EXIT_VALIDATION


def test_open_loop_solve_is_reproducible(experiment, tmp_path):
    outputs = []
    for run in ("a", "b"):
        out = tmp_path / run
        argv = ["solve", "open", "--config", str(experiment), "--strategy", "milp", "--seed", "7", "--out", str(out)]
        assert cli_dispatch(argv) == EXIT_OK
        outputs.append({name: (out / name).read_bytes()
                        for name in ("open_milp.csv", "open_milp.yaml", "open_milp_mask.txt")})
    assert outputs[0] == outputs[1]
    summary = yaml.safe_load(outputs[0]["open_milp.yaml"])
    assert summary["window"] == [0, 2]
    assert summary["fallback_used"] is False


def test_open_loop_solve_exports_mps(experiment, tmp_path):
    mps = tmp_path / "window.mps"
    argv = ["solve", "open", "--config", str(experiment), "--strategy", "fallback_only",
            "--out", str(tmp_path / "o"), "--mps", str(mps)]
    assert cli_dispatch(argv) == EXIT_OK
    assert "ENDATA" in mps.read_text()


def test_demand_sample_writes_a_scenario(experiment, tmp_path):
    out = tmp_path / "scenario.csv"
    argv = ["demand", "sample", "--config", str(experiment), "--episode", "1", "--out", str(out)]
    assert cli_dispatch(argv) == EXIT_OK
    assert out.exists()


def test_weights_for_another_layout_fail_at_runtime(experiment, tmp_path, shuttle_net):
    layout = StateLayout.from_network(shuttle_net, horizon=2)
    model = build_scorer(layout.input_dim, layout.n_candidates, ScorerHyper(hidden=8), seed=0)
    save_scorer(model, Normalizer.identity(layout.input_dim), layout, 0, tmp_path / "ensemble" / "m0.weights")
    argv = ["solve", "open", "--config", str(experiment), "--strategy", "learning_lp", "--out", str(tmp_path / "o")]
    assert cli_dispatch(argv) == EXIT_RUNTIME


def test_learning_strategy_without_weights(experiment, tmp_path):
    argv = ["mpc", "run", "--config", str(experiment), "--strategy", "learning_lp", "--out", str(tmp_path / "o")]
    assert cli_dispatch(argv) == EXIT_VALIDATION


def test_closed_loop_run_writes_episodes(experiment, tmp_path, capsys):
    out = tmp_path / "runs"
    argv = ["mpc", "run", "--config", str(experiment), "--strategy", "fallback_only", "--threads", "1",
            "--out", str(out)]
    assert cli_dispatch(argv) == EXIT_OK
    assert (out / "episodes" / "fallback_only_ep0.csv").exists()
    assert "episode 0" in capsys.readouterr().out
    manifest = (out / "manifest.txt").read_text()
    assert "config_hash: " in manifest
    assert "scenario_seeds" in manifest
    assert "mpc run fallback_only" in manifest


def test_dataset_and_training_runs_leave_manifests(experiment, tmp_path):
    dataset = tmp_path / "labels" / "dataset.csv"
    argv = ["data", "gen", "--config", str(experiment), "--budget", "2", "--out", str(dataset)]
    assert cli_dispatch(argv) == EXIT_OK
    assert dataset.exists()
    assert (dataset.parent / "manifest.txt").exists()

    ensemble = tmp_path / "ens"
    argv = ["train", "--config", str(experiment), "--dataset", str(dataset), "--iterations", "5",
            "--threads", "1", "--out", str(ensemble)]
    assert cli_dispatch(argv) == EXIT_OK
    assert list(ensemble.glob("*.weights"))
    manifest = (ensemble / "manifest.txt").read_text()
    assert "member_seeds" in manifest


def test_comparison_metrics_are_byte_identical_per_seed(experiment, tmp_path):
    outputs = []
    for run in ("a", "b"):
        out = tmp_path / run
        argv = ["eval", "compare", "--config", str(experiment), "--seed", "3", "--threads", "1", "--out", str(out)]
        assert cli_dispatch(argv) == EXIT_OK
        outputs.append(((out / "metrics.csv").read_bytes(), (out / "metrics_steps.csv").read_bytes()))
    assert outputs[0] == outputs[1]
    assert b"fallback_only" in outputs[0][0]
