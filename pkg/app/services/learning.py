"""
Rail Rescheduling Engine - Learned Integer Proposals
State encoding, candidate enumeration, solver-labelled datasets, recurrent
scorers and sequential ensemble inference.
"""
import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn as nn

from app.config import get_settings
from app.exceptions import DimensionError, ParameterError, RailSchedError, TrainingDivergedError
from app.knowledge.operating_defaults import DROPOUT_GRID, EXPERIMENT_SCALE
from app.models.domain import MpcState, ServiceKey, TimetableTemplate
from app.models.problem import NONLINEAR, StandardFormProblem
from app.models.schemas import (
    Network,
    ObjectiveWeights,
    ScorerHyper,
    SolverConfig,
    StrategyConfig,
    WeightHeader,
)
from app.services.mip_core import polish_nlp
from app.services.mpc_controller import MpcController
from app.services.plant import initial_state
from app.services.presolve import PresolveMask, Reconciled, complete_assignment, reconcile_xi
from app.services.resched_model import check_assignment
from app.storage import read_csv, write_csv

logger = logging.getLogger(__name__)
settings = get_settings()

WEIGHT_FORMAT_VERSION = 1
DTYPE = torch.float64


# ============ State Encoding ============

@dataclass(frozen=True)
class StateLayout:
    """Dimension map of the learning state and the candidate slots of one network."""
    platform_order: Tuple[str, ...]
    depot_order: Tuple[str, ...]
    horizon: int
    slots: Tuple[Tuple[str, int], ...]
    y_max: int
    l_min: int
    l_max: int

    @classmethod
    def from_network(cls, net: Network, horizon: int, action_steps: int = 1) -> "StateLayout":
        if horizon < 1 or action_steps < 1:
            raise ParameterError(f"Invalid horizon {horizon} or action steps {action_steps}")
        adjustable = sorted(p.id for p in net.platforms if p.sigma == 1)
        return cls(
            platform_order=tuple(net.platform_ids),
            depot_order=tuple(net.depot_ids),
            horizon=horizon,
            slots=tuple((p, j) for j in range(action_steps) for p in adjustable),
            y_max=net.fleet.y_max,
            l_min=net.fleet.l_min,
            l_max=net.fleet.l_max,
        )

    @property
    def input_dim(self) -> int:
        P = len(self.platform_order)
        return P + P * self.horizon + len(self.depot_order)

    @property
    def slot_labels(self) -> List[str]:
        return [f"{p}@{j}" for p, j in self.slots]

    @property
    def n_candidates(self) -> int:
        return (2 * self.y_max + 1) ** len(self.slots)


@dataclass
class LearningState:
    vector: np.ndarray
    layout: StateLayout


def encode_state(state: MpcState, tt: TimetableTemplate, layout: StateLayout) -> LearningState:
    """
    Raw state vector: waiting counts, forecast rates over the window, depot stock.

    Rates are zero-padded past the timetable so the length is fixed per layout.
    """
    if set(state.waiting) != set(layout.platform_order) or set(state.depot_stock) != set(layout.depot_order):
        raise DimensionError("State platforms or depots do not match the learning layout")
    forecast = state.scenario.base
    steps = [state.kappa + j for j in range(layout.horizon)]
    n_vec = [float(state.waiting[p]) for p in layout.platform_order]
    rho_vec = []
    for p in layout.platform_order:
        for k in steps:
            rho_vec.append(forecast.rate(p, k + 1) if k < tt.n_steps and k + 1 < forecast.horizon_len else 0.0)
    depot_vec = [float(state.depot_stock[z]) for z in layout.depot_order]
    return LearningState(vector=np.array(n_vec + rho_vec + depot_vec, dtype=float), layout=layout)


@dataclass
class Normalizer:
    """Per-feature affine map (x - center) / scale."""
    center: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, matrix: np.ndarray, zero_center: bool = True) -> "Normalizer":
        matrix = np.asarray(matrix, dtype=float)
        center = matrix.mean(axis=0) if zero_center else np.zeros(matrix.shape[1])
        scale = matrix.std(axis=0)
        scale = np.where(scale > 1e-12, scale, 1.0)
        return cls(center=center, scale=scale)

    @classmethod
    def identity(cls, dim: int) -> "Normalizer":
        return cls(center=np.zeros(dim), scale=np.ones(dim))

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.center.shape[0]:
            raise DimensionError(f"State length {x.shape[-1]} does not match normalizer length {self.center.shape[0]}")
        return (x - self.center) / self.scale


# ============ Candidates ============

def enumerate_candidates(layout: StateLayout) -> np.ndarray:
    """Every y vector over the slots, lexicographic in slot order then value."""
    values = range(-layout.y_max, layout.y_max + 1)
    grid = list(itertools.product(values, repeat=len(layout.slots)))
    return np.array(grid, dtype=int).reshape(len(grid), len(layout.slots))


def inherited_composition(state: MpcState, tt: TimetableTemplate, key: ServiceKey, l_regular: int) -> int:
    return state.in_flight.get(tt.chain_of(*key), l_regular)


def screen_candidates(candidates: np.ndarray, state: MpcState, tt: TimetableTemplate,
                      layout: StateLayout, l_regular: int) -> np.ndarray:
    """Mask of candidates whose compositions stay inside the fleet bounds."""
    ok = np.ones(len(candidates), dtype=bool)
    for i, (p, j) in enumerate(layout.slots):
        k = state.kappa + j
        if k >= tt.n_steps:
            ok &= candidates[:, i] == 0
            continue
        l_inh = inherited_composition(state, tt, (p, k), l_regular)
        new = l_inh + candidates[:, i]
        ok &= (new >= layout.l_min) & (new <= layout.l_max)
    return ok


def candidate_y(candidate: np.ndarray, state: MpcState, layout: StateLayout) -> Dict[ServiceKey, int]:
    return {(p, state.kappa + j): int(v) for (p, j), v in zip(layout.slots, candidate)}


def candidate_assignment(problem: StandardFormProblem, mask: PresolveMask, candidate: np.ndarray,
                         state: MpcState, layout: StateLayout) -> Dict[int, float]:
    """Full integer assignment; slots after the action steps keep their composition."""
    y_values = {key: y for key, y in candidate_y(candidate, state, layout).items() if key in problem.slots}
    return complete_assignment(problem, mask, y_values)


def evaluate_candidate(
    problem: StandardFormProblem,
    mask: PresolveMask,
    assignment: Dict[int, float],
    config: SolverConfig,
    label_mode: str = NONLINEAR,
) -> Tuple[float, bool]:
    """(objective, feasible) of one integer assignment; solve failures count as infeasible."""
    try:
        rec = reconcile_xi(problem, assignment, config, mask)
        if rec is None:
            return float("nan"), False
        if label_mode == NONLINEAR:
            pol = polish_nlp(problem, rec.assignment, rec.result.primal, config)
            return pol.objective, True
        return rec.result.objective, True
    except RailSchedError as exc:
        logger.debug(f"Candidate solve failed: {exc}")
        return float("nan"), False


# ============ Dataset ============

def state_columns(layout: StateLayout) -> List[str]:
    return [f"state_{i}" for i in range(layout.input_dim)]


def dataset_columns(layout: StateLayout) -> List[str]:
    per_cand = []
    for c in range(layout.n_candidates):
        per_cand += [f"objective_{c}", f"feasible_{c}"]
    return state_columns(layout) + ["candidate_index", "objective", "feasible"] + per_cand + ["episode_id", "step_id"]


def generate_dataset(
    net: Network,
    tt: TimetableTemplate,
    scenarios: Sequence,
    weights: ObjectiveWeights,
    layout: StateLayout,
    budget: int,
    steps: int,
    strategy: StrategyConfig,
    solver: Optional[SolverConfig] = None,
    label_mode: str = NONLINEAR,
) -> pd.DataFrame:
    """
    Label states visited by `strategy` with the objective of every candidate.

    One row per sample: the raw state, the best feasible candidate with its
    objective, then the objective and feasibility of each candidate. Episodes
    run over the scenarios in order until `budget` samples exist.
    """
    if budget < 1:
        raise ParameterError(f"Dataset budget must be positive, got {budget}")
    if len(scenarios) * steps < budget:
        raise ParameterError(f"{len(scenarios)} episodes of {steps} steps cannot yield {budget} samples")
    solver = solver or SolverConfig.from_settings(settings)
    controller = MpcController(net, tt, weights, strategy, solver)
    candidates = enumerate_candidates(layout)
    rows = []
    for episode_id, scenario in enumerate(scenarios):
        state = initial_state(net, tt, scenario)
        for step_id in range(steps):
            if len(rows) >= budget:
                break
            rows.append(_label_state(controller, state, candidates, layout, label_mode, episode_id, step_id))
            state, _, _ = controller.step(state)
        logger.info(f"Dataset: episode {episode_id} done, {len(rows)}/{budget} samples")
        if len(rows) >= budget:
            break
    return pd.DataFrame(rows, columns=dataset_columns(layout))


def _label_state(controller, state: MpcState, candidates: np.ndarray, layout: StateLayout,
                 label_mode: str, episode_id: int, step_id: int) -> Dict:
    problem, mask = controller.build_window(state)
    ok = screen_candidates(candidates, state, controller.tt, layout, controller.net.fleet.l_regular)
    row: Dict = {f"state_{i}": v for i, v in enumerate(encode_state(state, controller.tt, layout).vector)}
    objectives = np.full(len(candidates), np.nan)
    feasible = np.zeros(len(candidates), dtype=bool)
    for c in np.flatnonzero(ok):
        assignment = candidate_assignment(problem, mask, candidates[c], state, layout)
        objectives[c], feasible[c] = evaluate_candidate(problem, mask, assignment, controller.solver, label_mode)
    best = int(np.nanargmin(np.where(feasible, objectives, np.nan))) if feasible.any() else -1
    row["candidate_index"] = best
    row["objective"] = objectives[best] if best >= 0 else np.nan
    row["feasible"] = int(feasible.any())
    for c in range(len(candidates)):
        row[f"objective_{c}"] = objectives[c]
        row[f"feasible_{c}"] = int(feasible[c])
    row["episode_id"] = episode_id
    row["step_id"] = step_id
    return row


def save_dataset(frame: pd.DataFrame, path: Path) -> Path:
    return write_csv(frame, path)


def load_dataset(path: Path, layout: StateLayout) -> pd.DataFrame:
    return read_csv(path, columns=dataset_columns(layout))


@dataclass
class Episode:
    """Consecutive samples of one episode: states, targets and loss mask."""
    episode_id: int
    states: np.ndarray
    targets: np.ndarray
    mask: np.ndarray


def normalized_targets(objectives: np.ndarray, feasible: np.ndarray, penalty: float) -> Tuple[np.ndarray, np.ndarray]:
    """Per-sample zero-mean unit-spread objectives; infeasible entries get `penalty`."""
    targets = np.full(objectives.shape, penalty, dtype=float)
    for i in range(objectives.shape[0]):
        f = feasible[i]
        if not f.any():
            continue
        vals = objectives[i, f]
        spread = vals.std()
        targets[i, f] = (vals - vals.mean()) / (spread if spread > 1e-12 else 1.0)
    return targets, feasible.astype(float)


def episodes_from_frame(frame: pd.DataFrame, layout: StateLayout, normalizer: Normalizer,
                        penalty: float) -> List[Episode]:
    if frame.empty:
        raise ParameterError("Training needs a non-empty dataset")
    n_cand = layout.n_candidates
    obj_cols = [f"objective_{c}" for c in range(n_cand)]
    feas_cols = [f"feasible_{c}" for c in range(n_cand)]
    episodes = []
    for episode_id, group in frame.sort_values(["episode_id", "step_id"]).groupby("episode_id", sort=True):
        states = normalizer.apply(group[state_columns(layout)].to_numpy(dtype=float))
        objectives = group[obj_cols].to_numpy(dtype=float)
        feasible = group[feas_cols].to_numpy(dtype=float) > 0.5
        targets, mask = normalized_targets(objectives, feasible, penalty)
        episodes.append(Episode(int(episode_id), states, targets, mask))
    return episodes


# ============ Recurrent Scorer ============

class RecurrentScorer(nn.Module):
    """Input projection, LSTM cell carried across steps, one score per candidate."""

    def __init__(self, input_dim: int, n_candidates: int, hyper: ScorerHyper):
        super().__init__()
        self.input_dim = input_dim
        self.n_candidates = n_candidates
        self.hyper = hyper
        self.fc1 = nn.Linear(input_dim, hyper.hidden)
        self.cell = nn.LSTMCell(hyper.hidden, hyper.hidden)
        self.dropout = nn.Dropout(hyper.dropout)
        self.fc2 = nn.Linear(hyper.hidden, n_candidates)
        self.to(DTYPE)

    def reset_parameters(self) -> None:
        """Uniform in +-1/sqrt(fan-in) for every weight and bias."""
        fan_in = {
            "fc1": self.input_dim,
            "cell": self.hyper.hidden,
            "fc2": self.hyper.hidden,
        }
        with torch.no_grad():
            for name, param in self.named_parameters():
                bound = 1.0 / np.sqrt(fan_in[name.split(".")[0]])
                param.uniform_(-bound, bound)

    def initial_state(self, batch: int = 1) -> Tuple[torch.Tensor, torch.Tensor]:
        zeros = torch.zeros(batch, self.hyper.hidden, dtype=DTYPE)
        return zeros, zeros.clone()

    def forward(self, x: torch.Tensor, hc: Optional[Tuple[torch.Tensor, torch.Tensor]] = None):
        """One step: x is (batch, input_dim); returns (scores, (h, c))."""
        if x.shape[-1] != self.input_dim:
            raise DimensionError(f"Scorer expects {self.input_dim} inputs, got {x.shape[-1]}")
        hc = hc if hc is not None else self.initial_state(x.shape[0])
        h, c = self.cell(self.fc1(x), hc)
        return self.fc2(self.dropout(h)), (h, c)

    def unroll(self, states: torch.Tensor) -> torch.Tensor:
        """Scores of a whole episode, (steps, input_dim) -> (steps, n_candidates)."""
        hc = None
        out = []
        for t in range(states.shape[0]):
            scores, hc = self(states[t:t + 1], hc)
            out.append(scores)
        return torch.cat(out, dim=0)


def build_scorer(input_dim: int, n_candidates: int, hyper: ScorerHyper, seed: int) -> RecurrentScorer:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = RecurrentScorer(input_dim, n_candidates, hyper)
        model.reset_parameters()
    return model


def episode_loss(model: RecurrentScorer, episode: Episode, output_masking: bool) -> torch.Tensor:
    """Mean squared error over the loss-masked scores of one episode."""
    scores = model.unroll(torch.as_tensor(episode.states, dtype=DTYPE))
    targets = torch.as_tensor(episode.targets, dtype=DTYPE)
    if output_masking:
        weight = torch.as_tensor(episode.mask, dtype=DTYPE)
    else:
        weight = torch.ones_like(targets)
    total = weight.sum()
    if total.item() == 0:
        return (scores * 0.0).sum()
    return (weight * (scores - targets) ** 2).sum() / total


@dataclass
class TrainingReport:
    losses: List[float] = field(default_factory=list)
    moving_average: List[float] = field(default_factory=list)
    window: int = 1000

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else float("nan")


def train_scorer(
    frame: pd.DataFrame,
    layout: StateLayout,
    hyper: ScorerHyper,
    seed: int,
    normalizer: Optional[Normalizer] = None,
) -> Tuple[RecurrentScorer, Normalizer, TrainingReport]:
    """
    Fit one scorer to a labelled dataset.

    Each iteration unrolls one episode with the hidden state carried across its
    steps and takes one Adam step on the masked squared error.

    Args:
        frame: Dataset rows
        layout: Layout the dataset was generated with
        hyper: Scorer hyperparameters
        seed: Seed of the initial weights and the episode order
        normalizer: State normalization; fitted on the dataset when omitted

    Returns:
        (trained scorer in eval mode, normalizer, training report)
    """
    normalizer = normalizer or Normalizer.fit(frame[state_columns(layout)].to_numpy(dtype=float))
    episodes = episodes_from_frame(frame, layout, normalizer, hyper.infeasible_penalty)
    model = build_scorer(layout.input_dim, layout.n_candidates, hyper, seed)
    model.train()
    optimizer = torch.optim.Adam(model.parameters(), lr=hyper.learning_rate)
    scheduler = (
        torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=hyper.iterations)
        if hyper.lr_schedule else None
    )
    order = np.random.default_rng(seed)
    report = TrainingReport(window=settings.moving_average_window)

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed + 1)
        for it in range(hyper.iterations):
            episode = episodes[int(order.integers(len(episodes)))]
            optimizer.zero_grad()
            loss = episode_loss(model, episode, hyper.output_masking)
            value = float(loss.item())
            if not np.isfinite(value) or value > settings.divergence_loss:
                raise TrainingDivergedError(
                    f"Loss {value:.3g} at iteration {it} (episode {episode.episode_id}, "
                    f"hidden {hyper.hidden}, lr {hyper.learning_rate})"
                )
            loss.backward()
            optimizer.step()
            if scheduler is not None:
                scheduler.step()
            report.losses.append(value)
            if it % 500 == 0:
                logger.debug(f"Training iteration {it}: loss {value:.6g}")

    report.moving_average = (
        pd.Series(report.losses).rolling(report.window, min_periods=1).mean().tolist()
    )
    model.eval()
    logger.info(
        f"Trained scorer (hidden {hyper.hidden}, dropout {hyper.dropout}) for {hyper.iterations} "
        f"iterations: final loss {report.final_loss:.6g}"
    )
    return model, normalizer, report


DESK_GRID = [(h, d) for h in EXPERIMENT_SCALE["desk"]["hidden_sizes"] for d in DROPOUT_GRID]


def ensemble_hypers(base: ScorerHyper, grid: Iterable[Tuple[int, float]] = DESK_GRID) -> List[ScorerHyper]:
    return [base.model_copy(update={"hidden": h, "dropout": d}) for h, d in grid]


# ============ Weight Files ============

def save_scorer(model: RecurrentScorer, normalizer: Normalizer, layout: StateLayout,
                seed: int, path: Path) -> Path:
    """JSON header line, then every tensor as row-major little-endian float64."""
    state = model.state_dict()
    header = WeightHeader(
        version=WEIGHT_FORMAT_VERSION,
        input_dim=layout.input_dim,
        n_candidates=layout.n_candidates,
        hyper=model.hyper,
        seed=seed,
        norm_center=[float(v) for v in normalizer.center],
        norm_scale=[float(v) for v in normalizer.scale],
        platform_order=list(layout.platform_order),
        depot_order=list(layout.depot_order),
        horizon=layout.horizon,
        slots=layout.slot_labels,
        y_max=layout.y_max,
        tensors=[{"name": name, "shape": list(t.shape)} for name, t in state.items()],
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(header.model_dump_json().encode("utf-8") + b"\n")
        for t in state.values():
            f.write(t.detach().cpu().numpy().astype("<f8").tobytes(order="C"))
    return path


def load_scorer(path: Path, layout: Optional[StateLayout] = None) -> Tuple[RecurrentScorer, Normalizer, WeightHeader]:
    with open(path, "rb") as f:
        header = WeightHeader.model_validate(json.loads(f.readline().decode("utf-8")))
        blob = f.read()
    if header.version != WEIGHT_FORMAT_VERSION:
        raise DimensionError(f"Unsupported weight file version {header.version}")
    if layout is not None:
        if (header.input_dim != layout.input_dim or header.n_candidates != layout.n_candidates
                or header.platform_order != list(layout.platform_order)
                or header.depot_order != list(layout.depot_order)
                or header.slots != layout.slot_labels):
            raise DimensionError(f"Weights in {path} were trained on a different network layout")
    model = RecurrentScorer(header.input_dim, header.n_candidates, header.hyper)
    values = np.frombuffer(blob, dtype="<f8")
    state, offset = {}, 0
    for spec in header.tensors:
        size = int(np.prod(spec["shape"])) if spec["shape"] else 1
        if offset + size > values.size:
            raise DimensionError(f"Weight file {path} is truncated")
        state[spec["name"]] = torch.from_numpy(values[offset:offset + size].copy()).reshape(spec["shape"])
        offset += size
    model.load_state_dict(state)
    model.eval()
    normalizer = Normalizer(np.array(header.norm_center), np.array(header.norm_scale))
    return model, normalizer, header


# ============ Inference ============

@dataclass
class EnsembleMember:
    model: RecurrentScorer
    normalizer: Normalizer


@dataclass
class Inference:
    member: int
    candidate: int
    reconciled: Reconciled
    solves: int


def ensemble_infer(
    members: Sequence[EnsembleMember],
    scores: Sequence[np.ndarray],
    problem: StandardFormProblem,
    mask: PresolveMask,
    state: MpcState,
    layout: StateLayout,
    candidates: np.ndarray,
    allowed: np.ndarray,
    config: SolverConfig,
    top_k: int = 3,
) -> Optional[Inference]:
    """
    Try each member's top-K allowed candidates in order of ascending score.

    Returns:
        First candidate whose fixed-integer LP is feasible and passes the full
        constraint check, or None when every member is exhausted
    """
    if len(scores) != len(members):
        raise DimensionError("One score vector per ensemble member is required")
    solves = 0
    for i, s in enumerate(scores):
        if s.shape[-1] != len(candidates):
            raise DimensionError(f"Member {i} scores {s.shape[-1]} candidates, layout has {len(candidates)}")
        ranked = [int(c) for c in np.argsort(s, kind="stable") if allowed[c]][:top_k]
        for c in ranked:
            assignment = candidate_assignment(problem, mask, candidates[c], state, layout)
            solves += 1
            rec = reconcile_xi(problem, assignment, config, mask)
            if rec is None or check_assignment(problem, rec.result.primal):
                continue
            logger.debug(f"Member {i} candidate {c} accepted after {solves} solve(s)")
            return Inference(member=i, candidate=c, reconciled=rec, solves=solves)
    return None


class LearnedPolicy:
    """
    Ordered ensemble with each member's hidden state carried across an episode.

    Every member advances its hidden state at every step so that later members
    see the same history whether or not earlier members succeeded.
    """

    def __init__(self, members: Sequence[EnsembleMember], layout: StateLayout,
                 tt: TimetableTemplate, l_regular: int, top_k: int = 3):
        if not members:
            raise ParameterError("A learned policy needs at least one scorer")
        for m in members:
            if m.model.input_dim != layout.input_dim or m.model.n_candidates != layout.n_candidates:
                raise DimensionError("Scorer dimensions do not match the learning layout")
        self.members = list(members)
        self.layout = layout
        self.tt = tt
        self.l_regular = l_regular
        self.top_k = top_k
        self.candidates = enumerate_candidates(layout)
        self._hidden: List = [None] * len(self.members)
        self.last: Optional[Inference] = None

    def reset(self) -> None:
        self._hidden = [None] * len(self.members)
        self.last = None

    def scores(self, state: MpcState) -> List[np.ndarray]:
        raw = encode_state(state, self.tt, self.layout).vector
        out = []
        with torch.no_grad():
            for i, m in enumerate(self.members):
                if m.model.training:
                    raise ParameterError("Scorer is in training mode during inference")
                x = torch.as_tensor(m.normalizer.apply(raw)[None, :], dtype=DTYPE)
                s, self._hidden[i] = m.model(x, self._hidden[i])
                out.append(s[0].numpy())
        return out

    def propose(self, state: MpcState, problem: StandardFormProblem, mask: PresolveMask,
                config: SolverConfig) -> Optional[Reconciled]:
        allowed = screen_candidates(self.candidates, state, self.tt, self.layout, self.l_regular)
        self.last = ensemble_infer(
            self.members, self.scores(state), problem, mask, state, self.layout,
            self.candidates, allowed, config, self.top_k,
        )
        return self.last.reconciled if self.last is not None else None


def load_policy(weight_paths: Sequence[Path], net: Network, tt: TimetableTemplate,
                horizon: int, action_steps: int = 1, top_k: int = 3) -> LearnedPolicy:
    layout = StateLayout.from_network(net, horizon, action_steps)
    members = []
    for path in weight_paths:
        model, normalizer, _ = load_scorer(path, layout)
        members.append(EnsembleMember(model, normalizer))
    return LearnedPolicy(members, layout, tt, net.fleet.l_regular, top_k)
