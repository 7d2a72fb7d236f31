"""Data models for the ICL laboratory."""
from src.models.config import (
    ConvEmbedderConfig,
    EvalConfig,
    EvalTask,
    ExperimentConfig,
    ModelConfig,
    ProbeConfig,
    Recipe,
    StoreConfig,
    SweepConfig,
    SyntheticSpec,
    TrainConfig,
    TrainingMix,
    ZipfSpec,
)
from src.models.episode import Episode, ExemplarRef, Provenance, Suite
from src.models.trace import AttentionTrace, token_roles

__all__ = [
    "ConvEmbedderConfig", "EvalConfig", "EvalTask", "ExperimentConfig", "ModelConfig",
    "ProbeConfig", "Recipe", "StoreConfig", "SweepConfig", "SyntheticSpec",
    "TrainConfig", "TrainingMix", "ZipfSpec",
    "Episode", "ExemplarRef", "Provenance", "Suite",
    "AttentionTrace", "token_roles",
]
