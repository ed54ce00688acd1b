"""
Rail Rescheduling Engine - Pydantic Schemas
File-facing and report-facing types.
"""
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from typing import Any, Optional, List, Dict, Literal

from app.knowledge.operating_defaults import (
    PLATFORM_DEFAULTS,
    FLEET_DEFAULTS,
    KINEMATICS,
    LEARNING_STRATEGIES,
    NONLINEAR_STRATEGIES,
    OBJECTIVE_WEIGHTS,
    REGULAR_TIMES,
    STRATEGIES,
    TRANSFER_RATE,
)


# ============ Network Schemas ============

class LineSpec(BaseModel):
    """A line and the order its directions are run in circulation."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    id: str
    directions: List[str] = Field(default_factory=lambda: ["up", "down"])


class PlatformSpec(BaseModel):
    """One platform of a line, listed in line order in the network file."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    id: str
    station_id: str
    line_id: str
    direction: str
    km: float = Field(0.0, description="Station position along the line, metres")
    sigma: int = Field(0, ge=0, le=1, description="Composition can be changed here")
    depot_id: Optional[str] = None
    pred: Optional[str] = Field(None, description="Derived from line order")
    succ: Optional[str] = Field(None, description="Derived from line order")
    h_min: float = PLATFORM_DEFAULTS["h_min"]
    tau_min: float = PLATFORM_DEFAULTS["tau_min"]
    t_cons: float = PLATFORM_DEFAULTS["t_cons"]
    t_roll: float = PLATFORM_DEFAULTS["t_roll"]
    t_trans: float = PLATFORM_DEFAULTS["t_trans"]
    r_avg: Optional[float] = None
    r_min: Optional[float] = None
    r_max: Optional[float] = None
    r_turn_avg: Optional[float] = None
    r_turn_min: Optional[float] = None
    r_turn_max: Optional[float] = None
    E_energy: float = PLATFORM_DEFAULTS["E_energy"]
    E_add: float = PLATFORM_DEFAULTS["E_add"]

    @property
    def is_terminal(self) -> bool:
        return self.succ is None


class DepotSpec(BaseModel):
    """Depot and the platforms it serves."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    id: str
    platform_ids: List[str]
    n_train: int


class TransferSpec(BaseModel):
    """Share of arrivals at one platform that walk to another."""
    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)

    from_platform: str = Field(..., alias="from")
    to_platform: str = Field(..., alias="to")
    beta: float = TRANSFER_RATE


class TimetableSpec(BaseModel):
    """Parameters of the predetermined timetable generator."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    t_ctrl: int = Field(240, gt=0, description="Control step length, s")
    n_steps: int = Field(48, gt=0)
    first_departure: int = Field(30, ge=0)
    dwell_regular: float = REGULAR_TIMES["dwell"]
    turnaround_regular: float = REGULAR_TIMES["turnaround"]


class FleetLimits(BaseModel):
    """Rolling stock limits shared by every service."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    c_max: int = FLEET_DEFAULTS["c_max"]
    l_min: int = FLEET_DEFAULTS["l_min"]
    l_max: int = FLEET_DEFAULTS["l_max"]
    l_regular: int = FLEET_DEFAULTS["l_regular"]

    @property
    def y_max(self) -> int:
        return self.l_max - self.l_min


class KinematicsSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    a_acc: float = KINEMATICS["a_acc"]
    a_dec: float = KINEMATICS["a_dec"]
    v_cruise: float = KINEMATICS["v_cruise"]


class NetworkFile(BaseModel):
    """Top-level layout of a network file."""
    model_config = ConfigDict(extra="forbid")

    lines: List[LineSpec]
    platforms: List[PlatformSpec]
    depots: List[DepotSpec] = Field(default_factory=list)
    transfers: List[TransferSpec] = Field(default_factory=list)
    timetable: TimetableSpec = Field(default_factory=TimetableSpec)
    fleet: FleetLimits = Field(default_factory=FleetLimits)
    kinematics: KinematicsSpec = Field(default_factory=KinematicsSpec)


class Network(BaseModel):
    """Resolved network: links derived, running times filled in."""
    model_config = ConfigDict(frozen=True)

    lines: List[LineSpec]
    platforms: List[PlatformSpec]
    depots: List[DepotSpec]
    transfers: List[TransferSpec]
    timetable: TimetableSpec
    fleet: FleetLimits
    kinematics: KinematicsSpec

    def platform(self, pid: str) -> PlatformSpec:
        for p in self.platforms:
            if p.id == pid:
                return p
        raise KeyError(pid)

    def depot(self, zid: str) -> DepotSpec:
        for z in self.depots:
            if z.id == zid:
                return z
        raise KeyError(zid)

    @property
    def platform_ids(self) -> List[str]:
        """Canonical platform ordering (sorted ids)."""
        return sorted(p.id for p in self.platforms)

    @property
    def depot_ids(self) -> List[str]:
        return sorted(z.id for z in self.depots)

    def beta(self) -> Dict[str, Dict[str, float]]:
        table: Dict[str, Dict[str, float]] = {}
        for t in self.transfers:
            table.setdefault(t.from_platform, {})[t.to_platform] = t.beta
        return table


# ============ Validation Schemas ============

class Violation(BaseModel):
    """One broken invariant."""
    code: str
    subject: str
    message: str


class ValidationReport(BaseModel):
    """Report produced by network validation."""
    violations: List[Violation] = Field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, code: str, subject: str, message: str) -> None:
        self.violations.append(Violation(code=code, subject=subject, message=message))


# ============ Solver Schemas ============

class SolverConfig(BaseModel):
    """Tolerances, limits and rules for the in-repo solvers."""
    gap_tol: float = Field(1e-6, gt=0)
    feas_tol: float = Field(1e-7, gt=0)
    int_tol: float = Field(1e-6, gt=0)
    time_limit_s: float = Field(240.0, gt=0)
    early_term_window_s: float = Field(10.0, gt=0)
    early_term_min_gap_drop: float = Field(0.005, ge=0)
    branch_rule: Literal["most_fractional"] = "most_fractional"
    node_rule: Literal["best_bound"] = "best_bound"
    lp_engine: Literal["simplex", "highs"] = "simplex"
    max_nodes: int = Field(100000, gt=0)
    simplex_max_iter: int = Field(50000, gt=0)
    polish_max_iter: int = Field(50, gt=0)
    polish_min_step: float = Field(1e-3, gt=0)
    polish_trust_radius: float = Field(60.0, gt=0)
    oracle_cap: int = Field(12, gt=0)
    seed: int = 0

    @classmethod
    def from_settings(cls, settings, **overrides) -> "SolverConfig":
        values = dict(
            gap_tol=settings.gap_tol,
            feas_tol=settings.feas_tol,
            int_tol=settings.int_tol,
            time_limit_s=settings.time_limit_s,
            early_term_window_s=settings.early_term_window_s,
            early_term_min_gap_drop=settings.early_term_min_gap_drop,
            lp_engine=settings.lp_engine,
            max_nodes=settings.max_nodes,
            simplex_max_iter=settings.simplex_max_iter,
            polish_max_iter=settings.polish_max_iter,
            polish_min_step=settings.polish_min_step,
            polish_trust_radius=settings.polish_trust_radius,
            oracle_cap=settings.oracle_cap,
        )
        values.update(overrides)
        return cls(**values)


class ObjectiveWeights(BaseModel):
    """Weights of the passenger and operating cost terms."""
    w1: float = Field(OBJECTIVE_WEIGHTS["w1"], gt=0)
    w2: float = Field(OBJECTIVE_WEIGHTS["w2"], gt=0)
    w3: float = Field(OBJECTIVE_WEIGHTS["w3"], ge=0)
    delay_tiebreak: float = Field(1e-7, ge=0)

    def scaled(self, factor: float) -> "ObjectiveWeights":
        return self.model_copy(update={"w1": self.w1 * factor, "w2": self.w2 * factor})


class StrategyConfig(BaseModel):
    """How integers and continuous variables are obtained at each MPC step."""
    kind: Literal[
        "benchmark", "minlp", "warmstart_minlp", "milp",
        "learning_nlp", "learning_lp", "fallback_only",
    ]
    time_limit_s: float = Field(240.0, gt=0)
    horizon: int = Field(10, ge=1)
    action_steps: int = Field(1, ge=1)
    top_k: int = Field(3, ge=1)

    @property
    def is_learning(self) -> bool:
        return self.kind in LEARNING_STRATEGIES

    @property
    def is_nonlinear(self) -> bool:
        return self.kind in NONLINEAR_STRATEGIES


# ============ Experiment Schemas ============

class ExperimentConfig(BaseModel):
    """Experiment file; paths are relative to the file's directory."""
    model_config = ConfigDict(extra="forbid")

    network: str
    demand: str
    strategies: List[str] = Field(default_factory=lambda: ["benchmark", "milp"])
    seeds: List[int] = Field(default_factory=lambda: [0])
    episodes: int = Field(1, ge=1)
    steps: int = Field(30, ge=1)
    horizon: int = Field(10, ge=1)
    action_steps: int = Field(1, ge=1)
    weights: ObjectiveWeights = Field(default_factory=ObjectiveWeights)
    output_dir: str = "runs"
    benchmark_time_limit_s: float = Field(60.0, gt=0)
    time_limit_s: float = Field(240.0, gt=0)
    lp_engine: Optional[Literal["simplex", "highs"]] = None
    threads: Optional[int] = Field(None, ge=1)
    ensemble_dir: Optional[str] = None
    dataset: Optional[str] = None
    dataset_budget: int = Field(100, ge=1)
    label_mode: Literal["nonlinear", "linearized"] = "nonlinear"
    train_iterations: int = Field(2000, ge=1)
    fit_w3: bool = False

    @field_validator("strategies")
    @classmethod
    def _known_strategies(cls, value: List[str]) -> List[str]:
        unknown = [s for s in value if s not in STRATEGIES]
        if unknown:
            raise ValueError(f"Unknown strategies: {', '.join(unknown)}")
        return value

    @model_validator(mode="after")
    def _seeds_present(self) -> "ExperimentConfig":
        if not self.seeds:
            raise ValueError("At least one seed is required")
        return self


class MetricsRow(BaseModel):
    """Gap, time and feasibility statistics of one strategy."""
    strategy: str
    instances: int
    gap_max: float
    gap_mean: float
    gap_min: float
    time_max: float
    time_mean: float
    time_min: float
    feasibility_pre: float = Field(..., description="Percent of steps solved without fallback")
    feasibility_post: float = Field(..., description="Percent of steps solved after fallback")


class MetricsTable(BaseModel):
    rows: List[MetricsRow] = Field(default_factory=list)

    def row(self, strategy: str) -> MetricsRow:
        for r in self.rows:
            if r.strategy == strategy:
                return r
        raise KeyError(strategy)


# ============ Learning Schemas ============

class ScorerHyper(BaseModel):
    """Hyperparameters of one recurrent scorer."""
    hidden: int = Field(64, gt=0)
    dropout: float = Field(0.0, ge=0, lt=1)
    lr_schedule: bool = False
    output_masking: bool = True
    learning_rate: float = Field(1e-3, gt=0)
    iterations: int = Field(2000, ge=1)
    infeasible_penalty: float = 3.0


class WeightHeader(BaseModel):
    """Header line of a weight file."""
    version: int = 1
    input_dim: int
    n_candidates: int
    hyper: ScorerHyper
    seed: int
    norm_center: List[float]
    norm_scale: List[float]
    platform_order: List[str]
    depot_order: List[str]
    horizon: int
    slots: List[str]
    y_max: int
    tensors: List[Dict[str, Any]]
