"""Shared fixtures: a small split store, a tiny model and a tiny experiment."""
import sys
from pathlib import Path

import numpy as np
import pytest

# Add repo root to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.models.config import ModelConfig, SyntheticSpec, build_experiment
from src.modules.exemplar_store import gen_synthetic_store, split_holdout
from src.modules.transformer import init_model
from src.utils.settings import reset_settings


@pytest.fixture(autouse=True)
def quiet_settings(monkeypatch):
    """No progress bars, single thread, fresh settings per test."""
    monkeypatch.setenv("ICLFORGE_PROGRESS", "0")
    monkeypatch.setenv("ICLFORGE_THREADS", "1")
    reset_settings()
    yield
    reset_settings()


@pytest.fixture(scope="session")
def small_spec():
    return SyntheticSpec(n_classes=40, n_exemplars=8, kind="gaussian-prototype", vector_dim=8, noise=0.1, seed=3)


@pytest.fixture(scope="session")
def raw_store(small_spec):
    return gen_synthetic_store(small_spec)


@pytest.fixture(scope="session")
def store(raw_store):
    """32 base classes (6 train + 2 validation each) and 8 novel classes."""
    return split_holdout(raw_store, n_novel=8, per_class_split=(6, 2), seed=42)


@pytest.fixture(scope="session")
def model_config():
    return ModelConfig(layers=2, heads=2, embed_dim=16, label_vocab=32, pairs=8, exemplar_shape=(8,))


@pytest.fixture(scope="session")
def model(model_config):
    return init_model(model_config, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_experiment_data(out_dir, **sections):
    """A seconds-long experiment over a 24-class gaussian store."""
    data = {
        "name": "tiny",
        "output_dir": str(out_dir),
        "store": {
            "synthetic": {"kind": "gaussian-prototype", "n_classes": 24, "n_exemplars": 7,
                          "vector_dim": 6, "noise": 0.1, "seed": 5},
            "n_novel": 6,
            "split": [5, 2],
        },
        "model": {"layers": 1, "heads": 2, "embed_dim": 8, "pairs": 8, "exemplar_shape": [6]},
        "recipe": {"variant": "bursty", "query_class_reps": 3, "inst_copy": True},
        "train": {"total_steps": 6, "warmup_steps": 2, "batch_size": 4, "eval_every": 3, "seeds": [0, 1]},
        "eval": {"tasks": ["2w4s"], "suite_size": 16, "suite_seed": 9},
        "probe": {"every": 3, "episodes": 8},
    }
    for key, value in sections.items():
        data[key] = {**data.get(key, {}), **value} if isinstance(value, dict) else value
    return data


@pytest.fixture
def tiny_experiment(tmp_path):
    def make(**sections):
        return build_experiment(tiny_experiment_data(tmp_path / "run", **sections))
    return make
