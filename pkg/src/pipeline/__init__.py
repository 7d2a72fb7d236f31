"""Training and sweep workflows."""
from src.pipeline.training_run import (
    TrainingRun,
    RunResult,
    SeedResult,
    train_run,
    train_step,
    prepare_store,
    resolve_model_config
)
from src.pipeline.sweep import (
    SweepChild,
    run_sweep,
    plan_sweep
)

__all__ = [
    "TrainingRun",
    "RunResult",
    "SeedResult",
    "train_run",
    "train_step",
    "prepare_store",
    "resolve_model_config",
    "SweepChild",
    "run_sweep",
    "plan_sweep"
]
