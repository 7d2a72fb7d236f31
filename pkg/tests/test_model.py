"""Tests for the causal transformer: shapes, causality, init and gradients."""
import math

import numpy as np
import pytest

from src.models.config import ConvEmbedderConfig, ModelConfig
from src.models.trace import ROLE_LABEL, ROLE_QUERY, ROLE_SAMPLE
from src.modules.conv_embedder import conv_embed, conv_forward
from src.modules.gradcheck import grad_check
from src.modules.sequence_forge import build_standard, resolve_batch
from src.modules.transformer import (
    embed_episode,
    final_logits,
    forward,
    init_model,
    loss_and_grads,
    param_count,
    param_shapes,
)
from src.utils.errors import ConfigError, DimensionError, LabelRangeError
from src.utils.rng import RngStream


def _batch(store, n, pairs=8, seed=0):
    root = RngStream(seed, 99)
    episodes = [build_standard(store, root.child(i), pairs) for i in range(n)]
    return resolve_batch(store, episodes)


def test_param_count_matches_tensors(model, model_config):
    """The closed form agrees with the initialized tensors."""
    assert model.param_count() == param_count(model_config)
    assert set(model.params) == set(param_shapes(model_config))
    for name, shape in param_shapes(model_config).items():
        assert model.params[name].shape == shape, name


def test_param_count_probe_configuration():
    config = ModelConfig(layers=3, heads=8, embed_dim=64, label_vocab=1600, pairs=8, exemplar_shape=(32,))
    assert param_count(config) == 359680


def test_init_is_deterministic(model_config):
    a, b = init_model(model_config, 5), init_model(model_config, 5)
    for name in a.params:
        np.testing.assert_array_equal(a.params[name], b.params[name])
    c = init_model(model_config, 6)
    assert not np.array_equal(a.params["head.w"], c.params["head.w"])


def test_init_values(model):
    """Unit LayerNorm gains, zero biases and truncated-normal weights."""
    p = model.params
    assert np.all(p["h0.ln1.g"] == 1.0)
    assert np.all(p["h0.attn.bq"] == 0.0)
    assert np.all(p["head.b"] == 0.0)
    assert np.all(np.abs(p["h1.mlp.w1"]) <= 0.04 + 1e-7)
    assert p["h1.mlp.w1"].dtype == np.float32


def test_init_rejects_bad_configs():
    with pytest.raises(ConfigError):
        init_model(ModelConfig(heads=3, embed_dim=16, label_vocab=4), 0)
    with pytest.raises(ConfigError):
        init_model(ModelConfig(embed_dim=16, heads=2), 0)


def test_forward_shapes_and_trace(model, store):
    episode = build_standard(store, RngStream(1, 99), 8)
    x = embed_episode(episode, model, store)
    assert x.shape == (17, 16)
    logits, trace = forward(model, x, capture=True)
    assert logits.shape == (17, 32)
    assert trace.weights.shape == (2, 2, 17, 17)
    assert trace.scores is None
    assert trace.roles[:2] == [ROLE_SAMPLE, ROLE_LABEL] and trace.roles[-1] == ROLE_QUERY
    np.testing.assert_allclose(trace.weights.sum(axis=-1), 1.0, atol=1e-5)


def test_capture_does_not_change_logits(model, store):
    episode = build_standard(store, RngStream(2, 99), 8)
    x = embed_episode(episode, model, store)
    plain, none = forward(model, x)
    captured, trace = forward(model, x, capture=True, pre_softmax=True)
    assert none is None
    np.testing.assert_array_equal(plain, captured)
    assert trace.scores.shape == trace.weights.shape


def test_forward_is_causal(model, store, rng):
    """Perturbing position t leaves every earlier row of logits bit-identical."""
    episode = build_standard(store, RngStream(3, 99), 8)
    x = embed_episode(episode, model, store)
    base, _ = forward(model, x)
    for t in (4, 9, 16):
        changed = x.copy()
        changed[t] += rng.normal(size=x.shape[1]).astype(np.float32)
        out, _ = forward(model, changed)
        np.testing.assert_array_equal(out[:t], base[:t])
        assert not np.allclose(out[t], base[t])


def test_forward_is_deterministic(model, store):
    exemplars, labels, _ = _batch(store, 4)
    a = final_logits(model, exemplars, labels)
    b = final_logits(model, exemplars, labels)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (4, 32)


def test_initial_loss_is_near_log_vocab(model, store):
    exemplars, labels, targets = _batch(store, 16)
    loss, grads = loss_and_grads(model, exemplars, labels, targets)
    assert abs(loss - math.log(32)) < 0.1 * math.log(32)
    assert set(grads) == set(model.params)
    for name, g in grads.items():
        assert g.shape == model.params[name].shape, name
        assert np.all(np.isfinite(g)), name


def test_embedding_rejects_bad_inputs(model, store):
    exemplars, labels, _ = _batch(store, 2)
    with pytest.raises(DimensionError):
        final_logits(model, exemplars[:, :-1], labels)
    bad = labels.copy()
    bad[0, 0] = 32
    with pytest.raises(LabelRangeError):
        final_logits(model, exemplars, bad)
    with pytest.raises(DimensionError):
        forward(model, np.zeros((5, 16), dtype=np.float32))


@pytest.mark.parametrize("name", [
    "embed.w", "label_embed", "pos_embed", "h0.ln1.g", "h0.attn.wq", "h0.attn.wk",
    "h0.attn.wv", "h1.attn.wo", "h1.mlp.w1", "h1.mlp.b2", "ln_f.g", "head.w",
])
def test_full_model_gradients(store, name):
    """Backprop through the whole model matches finite differences in float64."""
    config = ModelConfig(layers=2, heads=2, embed_dim=8, label_vocab=32, pairs=8,
                         exemplar_shape=(8,), init_std=0.3)
    model = init_model(config, seed=1).astype(np.float64)
    exemplars, labels, targets = _batch(store, 3, seed=4)

    def fn(x):
        params = dict(model.params)
        params[name] = x
        loss, grads = loss_and_grads(model.with_params(params), exemplars, labels, targets)
        return loss, grads[name]

    assert grad_check(fn, model.params[name], eps=1e-4, max_coords=24) < 1e-2


def test_conv_model_forward_and_gradients(rng):
    config = ModelConfig(layers=1, heads=2, embed_dim=8, label_vocab=5, pairs=2,
                         embedder="conv-raster", exemplar_shape=(12, 12),
                         conv=ConvEmbedderConfig(widths=[4, 8]))
    model = init_model(config, seed=0)
    assert model.param_count() == param_count(config)
    exemplars = rng.integers(0, 256, size=(3, 3, 12, 12)).astype(np.uint8)
    labels = np.array([[0, 1], [2, 3], [4, 0]])
    logits = final_logits(model, exemplars, labels)
    assert logits.shape == (3, 5)
    loss, grads = loss_and_grads(model, exemplars, labels, np.array([0, 1, 2]))
    assert np.isfinite(loss)
    assert grads["conv.block0.w1"].shape == (4, 1, 3, 3)
    assert np.any(grads["conv.block1.w2"] != 0.0)


def test_conv_embed_single_raster(rng):
    config = ModelConfig(layers=1, heads=1, embed_dim=8, label_vocab=5, pairs=2,
                         embedder="conv-raster", exemplar_shape=(12, 12),
                         conv=ConvEmbedderConfig(widths=[4, 8]))
    model = init_model(config, seed=1)
    images = rng.integers(0, 256, size=(3, 12, 12)).astype(np.uint8)
    batch, _ = conv_forward(model.params, images, config)
    single = conv_embed(images[1], model)
    assert single.shape == (8,)
    np.testing.assert_allclose(single, batch[1], rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(conv_embed(images[1][..., None], model), single)
    with pytest.raises(DimensionError):
        conv_embed(images[1].ravel(), model)
