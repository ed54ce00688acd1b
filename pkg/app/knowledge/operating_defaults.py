"""
Rail Rescheduling Engine - Operating Defaults
Reference operating parameters for urban rail lines and the desk-scale experiment.
"""
from typing import Dict, Any

# ============ Platform Operation ============

PLATFORM_DEFAULTS: Dict[str, float] = {
    "h_min": 120.0,         # minimum departure-arrival headway, s
    "tau_min": 30.0,        # minimum dwell, s
    "t_cons": 60.0,         # composition change time, s
    "t_roll": 240.0,        # depot transfer time between sibling platforms, s
    "t_trans": 120.0,       # average transfer walk time, s
    "E_energy": 1.0,        # per-unit segment energy, cost units
    "E_add": 5.0,           # composition change cost, cost units
}

REGULAR_TIMES: Dict[str, float] = {
    "headway": 180.0,
    "dwell": 60.0,
    "turnaround": 52.9,
}

RUNNING_TIME_BAND = (0.8, 1.2)
TURNAROUND_BAND = (0.5, 2.0)

# ============ Train Kinematics ============

KINEMATICS: Dict[str, float] = {
    "a_acc": 0.75,          # m/s^2
    "a_dec": 0.7,           # m/s^2
    "v_cruise": 70.0 / 3.6,  # m/s
}

# ============ Fleet ============

FLEET_DEFAULTS: Dict[str, int] = {
    "c_max": 400,
    "l_min": 1,
    "l_max": 4,
    "l_regular": 2,
}

TRANSFER_RATE = 0.10

# ============ Objective Weights ============

OBJECTIVE_WEIGHTS: Dict[str, float] = {
    "w1": 1e-4,
    "w2": 1e-1,
    "w3": 1e-1,
}

# ============ Experiment Scale ============

EXPERIMENT_SCALE: Dict[str, Dict[str, Any]] = {
    "full": {
        "horizon": 40,
        "t_ctrl": 240,
        "steps_per_episode": 30,
        "benchmark_time_limit_s": 600.0,
        "time_limit_s": 240.0,
        "ensemble_size": 15,
        "hidden_sizes": [512, 1024],
    },
    "desk": {
        "horizon": 10,
        "t_ctrl": 240,
        "steps_per_episode": 30,
        "benchmark_time_limit_s": 60.0,
        "time_limit_s": 240.0,
        "ensemble_size": 4,
        "hidden_sizes": [64, 128],
    },
}

DROPOUT_GRID = [0.0, 0.5]

STRATEGIES = [
    "benchmark",
    "minlp",
    "warmstart_minlp",
    "milp",
    "learning_nlp",
    "learning_lp",
    "fallback_only",
]

LEARNING_STRATEGIES = {"learning_nlp", "learning_lp"}
NONLINEAR_STRATEGIES = {"benchmark", "minlp", "warmstart_minlp", "learning_nlp"}


def running_time_bounds(r_avg: float) -> tuple[float, float]:
    """Running-time band around the average segment time."""
    low, high = RUNNING_TIME_BAND
    return low * r_avg, high * r_avg


def turnaround_bounds(r_turn_avg: float) -> tuple[float, float]:
    """Turnaround band around the average turnaround time."""
    low, high = TURNAROUND_BAND
    return low * r_turn_avg, high * r_turn_avg

