import numpy as np
import pandas as pd
import pytest
import torch

from app.exceptions import DimensionError, ParameterError, TrainingDivergedError
from app.models.schemas import ScorerHyper, StrategyConfig
from app.services import learning
from app.services.harness import signed_gap
from app.services.learning import (
    EnsembleMember,
    Episode,
    LearnedPolicy,
    Normalizer,
    StateLayout,
    build_scorer,
    dataset_columns,
    encode_state,
    ensemble_hypers,
    ensemble_infer,
    enumerate_candidates,
    episode_loss,
    generate_dataset,
    load_policy,
    load_scorer,
    normalized_targets,
    save_scorer,
    screen_candidates,
    state_columns,
    train_scorer,
)
from app.services.mpc_controller import MpcController
from app.services.network_model import build_timetable
from app.services.plant import initial_state
from conftest import flat_scenario, network_from, shuttle_data

RATES = {"A": 0.25, "B": 0.05}


def _loop_layout(net):
    return StateLayout.from_network(net, horizon=1)


def _synthetic_frame(layout, episodes=2, steps=3, seed=0):
    """Random states and per-candidate objectives, a couple of candidates infeasible."""
    rng = np.random.default_rng(seed)
    rows = []
    for e in range(episodes):
        for t in range(steps):
            row = {c: v for c, v in zip(state_columns(layout), rng.uniform(0.0, 50.0, layout.input_dim))}
            objectives = rng.uniform(100.0, 200.0, layout.n_candidates)
            feasible = np.ones(layout.n_candidates, dtype=int)
            feasible[-2:] = 0
            best = int(np.argmin(np.where(feasible > 0, objectives, np.inf)))
            row.update(candidate_index=best, objective=objectives[best], feasible=1)
            for c in range(layout.n_candidates):
                row[f"objective_{c}"] = objectives[c] if feasible[c] else np.nan
                row[f"feasible_{c}"] = feasible[c]
            row.update(episode_id=e, step_id=t)
            rows.append(row)
    return pd.DataFrame(rows, columns=dataset_columns(layout))


# ============ State Encoding ============

def test_layout_dimensions(shuttle_net):
    layout = StateLayout.from_network(shuttle_net, horizon=3)
    assert layout.input_dim == 4 + 4 * 3 + 1
    assert layout.slots == (("AD", 0), ("AU", 0))
    assert layout.n_candidates == 7 ** 2


def test_state_vector_layout(loop_net, loop_tt):
    layout = StateLayout.from_network(loop_net, horizon=2)
    state = initial_state(loop_net, loop_tt, flat_scenario(loop_tt, RATES))
    vec = encode_state(state, loop_tt, layout).vector
    assert vec.shape == (layout.input_dim,)
    assert list(vec[:2]) == [state.waiting["A"], state.waiting["B"]]
    assert vec[2:4] == pytest.approx([0.25, 0.25])
    assert vec[-1] == 6.0


def test_rates_past_the_timetable_are_zero(loop_net, loop_tt):
    layout = StateLayout.from_network(loop_net, horizon=3)
    state = initial_state(loop_net, loop_tt, flat_scenario(loop_tt, RATES))
    state.kappa = loop_tt.n_steps - 1
    vec = encode_state(state, loop_tt, layout).vector
    assert list(vec[2:5]) == [0.25, 0.0, 0.0]


def test_zero_state_normalizes_to_zero(loop_net, loop_tt):
    layout = _loop_layout(loop_net)
    state = initial_state(loop_net, loop_tt, flat_scenario(loop_tt, {}))
    state.depot_stock["Z1"] = 0
    vec = encode_state(state, loop_tt, layout).vector
    np.testing.assert_array_equal(Normalizer.identity(layout.input_dim).apply(vec), np.zeros(layout.input_dim))


def test_fitted_normalizer_standardizes_columns():
    matrix = np.array([[1.0, 5.0, 2.0], [3.0, 5.0, 4.0], [5.0, 5.0, 9.0]])
    norm = Normalizer.fit(matrix)
    out = norm.apply(matrix)
    np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(out[:, [0, 2]].std(axis=0), 1.0)
    np.testing.assert_array_equal(out[:, 1], 0.0)
    with pytest.raises(DimensionError):
        norm.apply(np.zeros(4))


def test_platform_file_order_does_not_change_the_encoding():
    data = shuttle_data()
    reordered = shuttle_data()
    # down platforms listed first; order within a direction is the running order
    reordered["platforms"] = reordered["platforms"][2:] + reordered["platforms"][:2]
    vectors = []
    for d in (data, reordered):
        net = network_from(d)
        tt = build_timetable(net)
        layout = StateLayout.from_network(net, horizon=2)
        state = initial_state(net, tt, flat_scenario(tt, {"AU": 0.2, "BU": 0.1, "BD": 0.3, "AD": 0.05}, seed=3))
        vectors.append(encode_state(state, tt, layout).vector)
    np.testing.assert_array_equal(vectors[0], vectors[1])


def test_state_from_another_network_is_rejected(loop_net, shuttle_net, shuttle_tt):
    layout = _loop_layout(loop_net)
    state = initial_state(shuttle_net, shuttle_tt, flat_scenario(shuttle_tt, {}))
    with pytest.raises(DimensionError):
        encode_state(state, shuttle_tt, layout)


# ============ Candidates ============

def test_candidates_are_lexicographic(shuttle_net):
    layout = StateLayout.from_network(shuttle_net, horizon=1)
    cands = enumerate_candidates(layout)
    assert cands.shape == (49, 2)
    assert list(cands[0]) == [-3, -3]
    assert list(cands[1]) == [-3, -2]
    assert list(cands[7]) == [-2, -3]
    assert list(cands[-1]) == [3, 3]


def test_screening_keeps_compositions_in_bounds(loop_net, loop_tt):
    layout = _loop_layout(loop_net)
    state = initial_state(loop_net, loop_tt, flat_scenario(loop_tt, RATES))
    cands = enumerate_candidates(layout)
    allowed = screen_candidates(cands, state, loop_tt, layout, loop_net.fleet.l_regular)
    # trains start with 2 units, compositions stay in 1..4
    assert [int(c[0]) for c, ok in zip(cands, allowed) if ok] == [-1, 0, 1, 2]


# ============ Scorer ============

def test_scorer_shapes():
    model = build_scorer(5, 7, ScorerHyper(hidden=8), seed=0)
    scores, (h, c) = model(torch.zeros(1, 5, dtype=torch.float64))
    assert scores.shape == (1, 7)
    assert h.shape == c.shape == (1, 8)
    assert model.unroll(torch.zeros(4, 5, dtype=torch.float64)).shape == (4, 7)
    with pytest.raises(DimensionError):
        model(torch.zeros(1, 6, dtype=torch.float64))


def _episode(steps=4, dim=5, n_cand=3, seed=0):
    rng = np.random.default_rng(seed)
    mask = np.ones((steps, n_cand))
    mask[:, 2] = 0.0
    return Episode(0, rng.normal(size=(steps, dim)), rng.normal(size=(steps, n_cand)), mask)


def test_gradients_match_finite_differences():
    model = build_scorer(5, 3, ScorerHyper(hidden=4), seed=1)
    episode = _episode()
    model.zero_grad()
    episode_loss(model, episode, output_masking=True).backward()
    params = list(model.parameters())
    flat = [(i, j) for i, p in enumerate(params) for j in range(p.numel())]
    picks = np.random.default_rng(2).choice(len(flat), size=50, replace=False)
    h = 1e-6
    for pick in picks:
        i, j = flat[pick]
        p = params[i].data.view(-1)
        orig = p[j].item()
        with torch.no_grad():
            p[j] = orig + h
            up = episode_loss(model, episode, True).item()
            p[j] = orig - h
            down = episode_loss(model, episode, True).item()
            p[j] = orig
        numeric = (up - down) / (2 * h)
        analytic = params[i].grad.view(-1)[j].item()
        assert analytic == pytest.approx(numeric, rel=1e-4, abs=1e-7)


def test_masked_candidates_get_no_gradient():
    model = build_scorer(5, 3, ScorerHyper(hidden=4), seed=1)
    model.zero_grad()
    episode_loss(model, _episode(), output_masking=True).backward()
    assert torch.all(model.fc2.weight.grad[2] == 0)
    assert model.fc2.bias.grad[2].item() == 0.0
    model.zero_grad()
    episode_loss(model, _episode(), output_masking=False).backward()
    assert model.fc2.bias.grad[2].item() != 0.0


def test_targets_are_standardized_per_sample():
    objectives = np.array([[10.0, 20.0, 30.0, np.nan]])
    feasible = np.array([[True, True, True, False]])
    targets, mask = normalized_targets(objectives, feasible, penalty=3.0)
    assert targets[0, :3].mean() == pytest.approx(0.0)
    assert targets[0, :3].std() == pytest.approx(1.0)
    assert targets[0, 3] == 3.0
    assert list(mask[0]) == [1.0, 1.0, 1.0, 0.0]


# ============ Training ============

def test_small_dataset_is_memorized(loop_net):
    layout = _loop_layout(loop_net)
    frame = _synthetic_frame(layout)
    hyper = ScorerHyper(hidden=24, learning_rate=1e-2, iterations=600)
    model, normalizer, report = train_scorer(frame, layout, hyper, seed=0)
    assert not model.training
    assert len(report.losses) == 600
    assert len(report.moving_average) == 600
    episodes = learning.episodes_from_frame(frame, layout, normalizer, hyper.infeasible_penalty)
    with torch.no_grad():
        losses = [episode_loss(model, e, True).item() for e in episodes]
    assert max(losses) < 0.05


def test_training_is_deterministic_per_seed(loop_net):
    layout = _loop_layout(loop_net)
    frame = _synthetic_frame(layout)
    hyper = ScorerHyper(hidden=8, iterations=30)
    a, _, _ = train_scorer(frame, layout, hyper, seed=5)
    b, _, _ = train_scorer(frame, layout, hyper, seed=5)
    for (name, ta), (_, tb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(ta, tb), name


def test_divergence_is_reported(loop_net):
    layout = _loop_layout(loop_net)
    frame = _synthetic_frame(layout)
    with pytest.raises(TrainingDivergedError):
        train_scorer(frame, layout, ScorerHyper(hidden=8, learning_rate=1e6, iterations=50), seed=0)


def test_empty_dataset_is_rejected(loop_net):
    layout = _loop_layout(loop_net)
    frame = pd.DataFrame(columns=dataset_columns(layout))
    with pytest.raises(ParameterError):
        train_scorer(frame, layout, ScorerHyper(hidden=8, iterations=5), seed=0,
                     normalizer=Normalizer.identity(layout.input_dim))


# ============ Weight Files ============

def test_weight_file_round_trip(tmp_path, loop_net):
    layout = _loop_layout(loop_net)
    model = build_scorer(layout.input_dim, layout.n_candidates, ScorerHyper(hidden=8), seed=3)
    model.eval()
    norm = Normalizer(np.arange(layout.input_dim, dtype=float), np.full(layout.input_dim, 2.0))
    path = save_scorer(model, norm, layout, seed=3, path=tmp_path / "scorer.bin")
    loaded, loaded_norm, header = load_scorer(path, layout)
    assert header.seed == 3
    np.testing.assert_array_equal(loaded_norm.center, norm.center)
    x = torch.ones(1, layout.input_dim, dtype=torch.float64)
    with torch.no_grad():
        assert torch.equal(model(x)[0], loaded(x)[0])


def test_weight_file_for_another_layout_is_rejected(tmp_path, loop_net, shuttle_net):
    layout = _loop_layout(loop_net)
    model = build_scorer(layout.input_dim, layout.n_candidates, ScorerHyper(hidden=8), seed=3)
    path = save_scorer(model, Normalizer.identity(layout.input_dim), layout, 3, tmp_path / "scorer.bin")
    with pytest.raises(DimensionError):
        load_scorer(path, StateLayout.from_network(shuttle_net, horizon=1))


def test_truncated_weight_file_is_rejected(tmp_path, loop_net):
    layout = _loop_layout(loop_net)
    model = build_scorer(layout.input_dim, layout.n_candidates, ScorerHyper(hidden=8), seed=3)
    path = save_scorer(model, Normalizer.identity(layout.input_dim), layout, 3, tmp_path / "scorer.bin")
    blob = path.read_bytes()
    path.write_bytes(blob[:-16])
    with pytest.raises(DimensionError):
        load_scorer(path, layout)


# ============ Inference ============

def _window(loop_net, loop_tt, weights, solver, stock=6):
    controller = MpcController(loop_net, loop_tt, weights, StrategyConfig(kind="milp", horizon=2), solver)
    state = initial_state(loop_net, loop_tt, flat_scenario(loop_tt, RATES))
    state.depot_stock["Z1"] = stock
    problem, mask = controller.build_window(state)
    return state, problem, mask


def _members(layout, n=2):
    return [
        EnsembleMember(build_scorer(layout.input_dim, layout.n_candidates, ScorerHyper(hidden=4), seed=i).eval(),
                       Normalizer.identity(layout.input_dim))
        for i in range(n)
    ]


def test_exhausted_ensemble_returns_none(loop_net, loop_tt, weights, solver):
    layout = _loop_layout(loop_net)
    cands = enumerate_candidates(layout)
    members = _members(layout)
    scores = [np.zeros(len(cands)), np.zeros(len(cands))]

    state, problem, mask = _window(loop_net, loop_tt, weights, solver)
    none_allowed = np.zeros(len(cands), dtype=bool)
    assert ensemble_infer(members, scores, problem, mask, state, layout, cands, none_allowed, solver) is None

    # an empty depot cannot supply units
    state, problem, mask = _window(loop_net, loop_tt, weights, solver, stock=0)
    draws = cands[:, 0] > 0
    assert ensemble_infer(members, scores, problem, mask, state, layout, cands, draws, solver) is None


def test_later_member_takes_over(loop_net, loop_tt, weights, solver):
    layout = _loop_layout(loop_net)
    cands = enumerate_candidates(layout)
    state, problem, mask = _window(loop_net, loop_tt, weights, solver, stock=0)
    allowed = np.ones(len(cands), dtype=bool)
    greedy = -cands[:, 0].astype(float)          # prefers the largest draws
    keep = np.abs(cands[:, 0]).astype(float)     # prefers keeping the composition
    result = ensemble_infer(_members(layout), [greedy, keep], problem, mask, state, layout, cands, allowed,
                            solver, top_k=3)
    assert result is not None
    assert result.member == 1
    assert int(cands[result.candidate][0]) == 0
    assert result.solves == 4


def test_policy_refuses_scorers_in_training_mode(loop_net, loop_tt):
    layout = _loop_layout(loop_net)
    members = _members(layout, n=1)
    members[0].model.train()
    policy = LearnedPolicy(members, layout, loop_tt, loop_net.fleet.l_regular)
    state = initial_state(loop_net, loop_tt, flat_scenario(loop_tt, RATES))
    with pytest.raises(ParameterError):
        policy.scores(state)


def test_learned_strategy_runs_an_episode(tmp_path, loop_net, loop_tt, weights, solver):
    layout = _loop_layout(loop_net)
    paths = []
    for i, member in enumerate(_members(layout)):
        paths.append(save_scorer(member.model, member.normalizer, layout, i, tmp_path / f"m{i}.bin"))
    policy = load_policy(paths, loop_net, loop_tt, horizon=1)
    controller = MpcController(loop_net, loop_tt, weights, StrategyConfig(kind="learning_lp", horizon=2),
                               solver, policy)
    log = controller.run_episode(initial_state(loop_net, loop_tt, flat_scenario(loop_tt, RATES)), steps=3)
    assert len(log.records) == 3
    assert all(r.feasible for r in log.records)


# ============ Dataset ============

def test_dataset_stops_at_budget(monkeypatch, loop_net, loop_tt, weights, solver):
    calls = []

    def fake_evaluate(problem, mask, assignment, config, label_mode):
        calls.append(assignment)
        return float(len(calls)), True

    monkeypatch.setattr(learning, "evaluate_candidate", fake_evaluate)
    layout = _loop_layout(loop_net)
    scenarios = [flat_scenario(loop_tt, RATES, seed=s) for s in (0, 1)]
    frame = generate_dataset(loop_net, loop_tt, scenarios, weights, layout, budget=3, steps=2,
                             strategy=StrategyConfig(kind="fallback_only", horizon=2), solver=solver)
    assert list(frame.columns) == dataset_columns(layout)
    assert len(frame) == 3
    assert list(frame["episode_id"]) == [0, 0, 1]
    assert list(frame["step_id"]) == [0, 1, 0]
    assert frame["feasible"].all()
    assert int(frame[[f"feasible_{c}" for c in range(layout.n_candidates)]].to_numpy().sum()) == len(calls)


def test_dataset_budget_is_checked(loop_net, loop_tt, weights, solver):
    layout = _loop_layout(loop_net)
    scenarios = [flat_scenario(loop_tt, RATES)]
    strategy = StrategyConfig(kind="fallback_only", horizon=2)
    with pytest.raises(ParameterError):
        generate_dataset(loop_net, loop_tt, scenarios, weights, layout, 5, 2, strategy, solver)
    with pytest.raises(ParameterError):
        generate_dataset(loop_net, loop_tt, scenarios, weights, layout, 0, 2, strategy, solver)


# ============ Acceptance Scale ============

@pytest.mark.slow
def test_trained_ensemble_is_faster_and_close_to_the_benchmark(loop_net, loop_tt, weights, solver):
    layout = StateLayout.from_network(loop_net, horizon=2)
    benchmark = StrategyConfig(kind="benchmark", horizon=2)
    scenarios = [flat_scenario(loop_tt, RATES, seed=s) for s in range(10)]
    frame = generate_dataset(loop_net, loop_tt, scenarios, weights, layout, budget=60, steps=6,
                             strategy=benchmark, solver=solver)
    members = []
    for i, hyper in enumerate(ensemble_hypers(ScorerHyper(iterations=300))):
        model, normalizer, _ = train_scorer(frame, layout, hyper, seed=i)
        members.append(EnsembleMember(model, normalizer))
    policy = LearnedPolicy(members, layout, loop_tt, loop_net.fleet.l_regular)
    learned = MpcController(loop_net, loop_tt, weights, StrategyConfig(kind="learning_lp", horizon=2),
                            solver, policy)
    exact = MpcController(loop_net, loop_tt, weights, benchmark, solver)

    gaps, pre, learned_times, exact_times = [], [], [], []
    for seed in range(100, 105):
        scenario = flat_scenario(loop_tt, RATES, seed=seed)
        a = learned.run_episode(initial_state(loop_net, loop_tt, scenario), steps=6, episode_id=seed)
        b = exact.run_episode(initial_state(loop_net, loop_tt, scenario), steps=6, episode_id=seed)
        gaps.append(signed_gap(a.total_objective, b.total_objective))
        pre.extend(r.feasible_pre for r in a.records)
        learned_times.extend(a.solve_times)
        exact_times.extend(b.solve_times)

    assert np.mean(pre) >= 0.9
    assert np.nanmean(gaps) <= 0.10
    assert np.mean(learned_times) < np.mean(exact_times)
