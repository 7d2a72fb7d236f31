"""Mutable state of one training run (one seed)."""
from dataclasses import dataclass

from src.models.config import ModelConfig
from src.modules.optim import AdamState
from src.modules.transformer import TransformerModel, init_model


@dataclass
class TrainState:
    """
    Everything needed to continue a run bit-identically.

    ``step`` counts completed optimizer updates; step 0 is the untrained model.
    """
    model: TransformerModel
    adam: AdamState
    step: int
    seed: int

    def __str__(self) -> str:
        return f"TrainState(seed {self.seed}, step {self.step})"


def create_initial_state(config: ModelConfig, seed: int) -> TrainState:
    """
    Create the step-0 state of a run.

    Args:
        config: resolved model config (label_vocab set)
        seed: run seed; also seeds parameter initialization

    Returns:
        Initial TrainState
    """
    model = init_model(config, seed)
    return TrainState(model=model, adam=AdamState.zeros_like(model.params), step=0, seed=seed)
