"""Tests for few-shot and held-out evaluation."""
import math

import numpy as np
import pytest

from src.models.config import EvalTask, ModelConfig, Recipe, SyntheticSpec, TrainConfig, TrainingMix
from src.models.state import create_initial_state
from src.modules.evaluator import evaluate_icl, evaluate_iwl, evaluate_suite, predict
from src.modules.exemplar_store import gen_synthetic_store, split_holdout
from src.modules.sequence_forge import make_icl_suite, make_iwl_suite, sample_training_batch
from src.modules.transformer import init_model
from src.pipeline.training_run import TRAIN_STREAM, train_step
from src.utils.errors import EvalError
from src.utils.rng import RngStream


@pytest.fixture(scope="module")
def icl_suite(store):
    return make_icl_suite(store, EvalTask.parse("2w4s"), 2000, seed=21)


def _within_five_se(acc, p, n):
    return abs(acc - p) <= 5 * math.sqrt(p * (1 - p) / n)


def test_untrained_model_is_at_chance(model, store, icl_suite):
    """An untrained model scores 1/k on restricted k-way suites."""
    result = evaluate_icl(model, store, icl_suite)
    assert result.total == 2000
    assert _within_five_se(result.accuracy, 0.5, 2000)

    four_way = make_icl_suite(store, EvalTask.parse("4w2s"), 2000, seed=22)
    assert _within_five_se(evaluate_icl(model, store, four_way).accuracy, 0.25, 2000)
    print("✓ untrained accuracy at chance")


def test_restricted_argmax_ignores_other_labels(model, store, icl_suite):
    """Boosting labels outside 0..k-1 cannot change a restricted prediction."""
    params = dict(model.params)
    bias = params["head.b"].copy()
    bias[2:] += 100.0
    params["head.b"] = bias
    boosted = model.with_params(params)
    suite = make_icl_suite(store, EvalTask.parse("2w4s"), 300, seed=23)
    base = evaluate_icl(model, store, suite)
    assert evaluate_icl(boosted, store, suite).correct == base.correct
    assert evaluate_icl(boosted, store, suite, restrict=False).correct == 0


def test_iwl_evaluation(model, store):
    suite = make_iwl_suite(store, 200, seed=24)
    result = evaluate_iwl(model, store, suite)
    assert result.split == "iwl-acc"
    assert result.total == 200
    assert 0.0 <= result.accuracy <= 0.2


def test_suite_kind_checks(model, store):
    icl = make_icl_suite(store, EvalTask.parse("2w4s"), 10, seed=25)
    iwl = make_iwl_suite(store, 10, seed=25)
    with pytest.raises(EvalError):
        evaluate_icl(model, store, iwl)
    with pytest.raises(EvalError):
        evaluate_iwl(model, store, icl)
    with pytest.raises(EvalError):
        evaluate_icl(model, store, icl, k=1)
    assert evaluate_suite(model, store, iwl).split == "iwl-acc"
    assert evaluate_suite(model, store, icl).split == "icl-2w4s"


def test_threaded_prediction_matches_serial(model, store, icl_suite):
    episodes = icl_suite.episodes[:700]
    serial = predict(model, store, episodes, restrict_to=2, workers=1)
    threaded = predict(model, store, episodes, restrict_to=2, workers=3)
    np.testing.assert_array_equal(serial, threaded)
    assert serial.shape == (700,)


def test_three_way_chance_calibration(store):
    """Untrained 3-way accuracy lands within two points of 1/3 on a 10k suite."""
    config = ModelConfig(layers=2, heads=2, embed_dim=16, label_vocab=32, pairs=6, exemplar_shape=(8,))
    suite = make_icl_suite(store, EvalTask.parse("3w2s"), 10_000, seed=26, pairs=6)
    result = evaluate_icl(init_model(config, seed=0), store, suite)
    assert result.total == 10_000
    assert abs(result.accuracy - 1 / 3) <= 0.02


def test_iwl_accuracy_after_overfitting_a_tiny_store():
    """Four base classes are memorised within a few hundred steps."""
    tiny = split_holdout(gen_synthetic_store(SyntheticSpec(n_classes=6, n_exemplars=8, vector_dim=8, seed=11)),
                         n_novel=2, per_class_split=(6, 2), seed=0)
    assert tiny.n_base == 4
    config = ModelConfig(layers=1, heads=1, embed_dim=16, label_vocab=4, pairs=3, exemplar_shape=(8,))
    train = TrainConfig(total_steps=400, warmup_steps=30, max_lr=1e-2, batch_size=16, eval_every=400, seeds=[0])
    state = create_initial_state(config, seed=0)
    rng = RngStream(0, TRAIN_STREAM)
    for step in range(1, train.total_steps + 1):
        batch = sample_training_batch(tiny, TrainingMix(p_bursty=0.0), Recipe(variant="standard"), rng,
                                      step=step, batch_size=train.batch_size, pairs=3)
        loss = train_step(state, batch, tiny, train)
    assert loss < 0.5
    result = evaluate_iwl(state.model, tiny, make_iwl_suite(tiny, 200, seed=5, pairs=3))
    assert result.accuracy >= 0.95
