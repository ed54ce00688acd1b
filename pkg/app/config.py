"""
Rail Rescheduling Engine - Configuration
"""
from pydantic_settings import BaseSettings
from functools import lru_cache


class Settings(BaseSettings):
    """Application settings loaded from environment variables."""

    # Solver Configuration
    lp_engine: str = "simplex"  # "simplex" or "highs"
    gap_tol: float = 1e-6
    feas_tol: float = 1e-7
    int_tol: float = 1e-6
    time_limit_s: float = 240.0
    early_term_window_s: float = 10.0
    early_term_min_gap_drop: float = 0.005
    max_nodes: int = 100000
    simplex_max_iter: int = 50000
    oracle_cap: int = 12

    # Encoding Constants
    epsilon: float = 1e-6

    # NLP Polish
    polish_max_iter: int = 50
    polish_min_step: float = 1e-3
    polish_trust_radius: float = 60.0

    # MPC Settings
    top_k: int = 3

    # Learning Settings
    learning_rate: float = 1e-3
    divergence_loss: float = 1e6
    moving_average_window: int = 1000

    # Harness Settings
    threads: int = 1

    # Logging
    log_level: str = "INFO"

    class Config:
        env_prefix = "RAILSCHED_"
        env_file = ".env"
        env_file_encoding = "utf-8"

    @property
    def worker_count(self) -> int:
        """Bounded worker pool size for batch runs."""
        return max(1, self.threads)


@lru_cache()
def get_settings() -> Settings:
    """Get cached settings instance."""
    return Settings()
