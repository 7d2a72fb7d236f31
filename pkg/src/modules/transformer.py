"""
Causal decoder transformer over interleaved sample/label tokens.

Layout of one episode with L context pairs (T = 2L+1 tokens):

    pos 0   2   4  ...  2L-2  2L
        x0  x1  x2 ...  xL-1  query        (exemplar embedder)
    pos   1   3  ...  2L-1
          y0  y1 ...  yL-1                 (label embedding table)

Blocks are pre-norm (LayerNorm -> attention -> residual, LayerNorm -> GELU MLP
-> residual) with learned absolute positions, an untied classifier head and
no dropout. Everything is batched over a leading episode axis.
"""
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from src.models.config import ModelConfig
from src.models.trace import AttentionTrace, token_roles
from src.modules.conv_embedder import conv_backward, conv_forward, conv_param_shapes
from src.modules.sequence_forge import resolve_batch
from src.modules.tensor_ops import (
    DTYPE,
    causal_attention,
    causal_attention_backward,
    check_finite,
    gelu,
    gelu_backward,
    layer_norm,
    layer_norm_backward,
    linear,
    linear_backward,
    softmax_xent_last_batch,
)
from src.utils.errors import DimensionError, LabelRangeError
from src.utils.logging_utils import get_logger
from src.utils.rng import RngStream

logger = get_logger(__name__)

INIT_STREAM = 0x1417
Params = Dict[str, np.ndarray]


@dataclass
class TransformerModel:
    """Model config plus its named parameter tensors."""
    config: ModelConfig
    params: Params

    def param_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def astype(self, dtype) -> "TransformerModel":
        return TransformerModel(self.config, {k: v.astype(dtype) for k, v in self.params.items()})

    def with_params(self, params: Params) -> "TransformerModel":
        return TransformerModel(self.config, params)

    def __str__(self) -> str:
        c = self.config
        return (f"TransformerModel({c.layers} layers, {c.heads} heads, dim {c.embed_dim}, "
                f"vocab {c.label_vocab}, {self.param_count():,} params)")


# =========================================================
# PARAMETERS
# =========================================================

def param_shapes(config: ModelConfig) -> "OrderedDict[str, Tuple[int, ...]]":
    """Every parameter name and shape, in initialization order."""
    d, V, T = config.embed_dim, config.label_vocab, config.token_count
    shapes = OrderedDict()
    if config.embedder == "linear-vector":
        shapes["embed.w"] = (config.exemplar_shape[0], d)
        shapes["embed.b"] = (d,)
    else:
        shapes.update(conv_param_shapes(config))
    shapes["label_embed"] = (V, d)
    shapes["pos_embed"] = (T, d)
    for l in range(config.layers):
        p = f"h{l}."
        shapes[p + "ln1.g"] = (d,)
        shapes[p + "ln1.b"] = (d,)
        for n in ("q", "k", "v", "o"):
            shapes[p + f"attn.w{n}"] = (d, d)
            shapes[p + f"attn.b{n}"] = (d,)
        shapes[p + "ln2.g"] = (d,)
        shapes[p + "ln2.b"] = (d,)
        shapes[p + "mlp.w1"] = (d, 4 * d)
        shapes[p + "mlp.b1"] = (4 * d,)
        shapes[p + "mlp.w2"] = (4 * d, d)
        shapes[p + "mlp.b2"] = (d,)
    shapes["ln_f.g"] = (d,)
    shapes["ln_f.b"] = (d,)
    shapes["head.w"] = (d, V)
    shapes["head.b"] = (V,)
    return shapes


def param_count(config: ModelConfig) -> int:
    """Closed-form parameter count."""
    d, V, T = config.embed_dim, config.label_vocab, config.token_count
    if config.embedder == "linear-vector":
        embed = config.exemplar_shape[0] * d + d
    else:
        embed, c_in = 0, 1
        for w in config.conv.widths:
            embed += (w * c_in * 9 + w) + (w * w * 9 + w) + (w * c_in + w)
            c_in = w
        embed += c_in * d + d
    per_layer = 12 * d * d + 13 * d
    return embed + V * d + T * d + config.layers * per_layer + 2 * d + d * V + V


def init_model(config: ModelConfig, seed: int) -> TransformerModel:
    """
    Truncated-normal weights (std init_std, cut at 2 std), zero biases, unit
    LayerNorm gains. Conv kernels use a He-scaled std so the residual stack
    keeps signal at depth.
    """
    config.validate_for_init()
    rng = RngStream(seed, INIT_STREAM)
    params = OrderedDict()
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            params[name] = np.ones(shape, dtype=DTYPE)
        elif leaf.startswith("w") or name in ("label_embed", "pos_embed"):
            std = config.init_std
            if len(shape) == 4:
                std = float(np.sqrt(2.0 / (shape[1] * shape[2] * shape[3])))
            params[name] = rng.truncated_normal(shape, std).astype(DTYPE)
        else:
            params[name] = np.zeros(shape, dtype=DTYPE)
    model = TransformerModel(config, dict(params))
    logger.debug(f"initialized {model} from seed {seed}")
    return model


# =========================================================
# EMBEDDING
# =========================================================

def embed_tokens(model: TransformerModel, exemplars: np.ndarray, labels: np.ndarray):
    """
    Build the interleaved token sequence.

    Args:
        exemplars: [B, L+1, *exemplar_shape]; the last entry is the query
        labels: [B, L] integer label ids

    Returns:
        (x [B, 2L+1, d], cache for embed_backward)
    """
    cfg, P = model.config, model.params
    labels = np.asarray(labels, dtype=np.int64)
    B, N = exemplars.shape[:2]
    if labels.shape != (B, N - 1) or N - 1 != cfg.pairs:
        raise DimensionError(f"episode batch with {N} exemplars and labels {labels.shape} "
                             f"does not fit pairs={cfg.pairs}")
    if tuple(exemplars.shape[2:]) != tuple(cfg.exemplar_shape):
        raise DimensionError(f"exemplar shape {exemplars.shape[2:]} != configured {cfg.exemplar_shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= cfg.label_vocab):
        raise LabelRangeError(f"label ids must lie in [0, {cfg.label_vocab})")

    dtype = P["pos_embed"].dtype
    cache = {"labels": labels, "B": B, "N": N}
    if cfg.embedder == "linear-vector":
        ex = exemplars.astype(dtype)
        e = linear(ex, P["embed.w"], P["embed.b"])
        cache["ex"] = ex
    else:
        flat, conv_cache = conv_forward(P, exemplars.reshape(B * N, *cfg.exemplar_shape), cfg)
        e = flat.reshape(B, N, -1)
        cache["conv"] = conv_cache

    x = np.empty((B, cfg.token_count, cfg.embed_dim), dtype=dtype)
    x[:, 0::2] = e
    x[:, 1::2] = P["label_embed"][labels]
    x += P["pos_embed"]
    return x, cache


def embed_backward(model: TransformerModel, cache: dict, dx: np.ndarray) -> Params:
    cfg, P = model.config, model.params
    grads = {"pos_embed": dx.sum(axis=0)}
    g_label = np.zeros_like(P["label_embed"])
    np.add.at(g_label, cache["labels"], dx[:, 1::2])
    grads["label_embed"] = g_label
    de = dx[:, 0::2]
    if cfg.embedder == "linear-vector":
        _, grads["embed.w"], grads["embed.b"] = linear_backward(de, cache["ex"], P["embed.w"])
    else:
        grads.update(conv_backward(P, cache["conv"], de.reshape(cache["B"] * cache["N"], -1)))
    return grads


def embed_episode(episode, model: TransformerModel, store) -> np.ndarray:
    """Token embeddings [2L+1, d] of one episode, references resolved in store."""
    exemplars, labels, _ = resolve_batch(store, [episode])
    x, _ = embed_tokens(model, exemplars, labels)
    return x[0]


# =========================================================
# FORWARD / BACKWARD
# =========================================================

def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    B, T, D = x.shape
    return x.reshape(B, T, heads, D // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    B, H, T, hd = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, H * hd)


def forward_batch(model: TransformerModel, x: np.ndarray, capture_scores: bool = False):
    """
    Run the decoder stack on embedded tokens.

    Args:
        x: [B, T, d] with T = 2L+1
        capture_scores: also keep masked pre-softmax scores per layer

    Returns:
        (logits [B, T, V], cache); cache["layers"][l]["w"] holds the
        post-softmax weights [B, heads, T, T]
    """
    cfg, P = model.config, model.params
    if x.ndim != 3 or x.shape[1] != cfg.token_count or x.shape[2] != cfg.embed_dim:
        raise DimensionError(f"embedded batch {x.shape} does not match T={cfg.token_count}, d={cfg.embed_dim}")
    eps = cfg.ln_eps
    layers = []
    for l in range(cfg.layers):
        p = f"h{l}."
        c = {"x_in": x}
        h = layer_norm(x, P[p + "ln1.g"], P[p + "ln1.b"], eps)
        q = _split_heads(linear(h, P[p + "attn.wq"], P[p + "attn.bq"]), cfg.heads)
        k = _split_heads(linear(h, P[p + "attn.wk"], P[p + "attn.bk"]), cfg.heads)
        v = _split_heads(linear(h, P[p + "attn.wv"], P[p + "attn.bv"]), cfg.heads)
        if capture_scores:
            att, w, scores = causal_attention(q, k, v, return_scores=True)
            c["scores"] = scores
        else:
            att, w = causal_attention(q, k, v)
        a = _merge_heads(att)
        x = x + linear(a, P[p + "attn.wo"], P[p + "attn.bo"])
        c.update(h=h, q=q, k=k, v=v, w=w, a=a, x_mid=x)
        h2 = layer_norm(x, P[p + "ln2.g"], P[p + "ln2.b"], eps)
        u = linear(h2, P[p + "mlp.w1"], P[p + "mlp.b1"])
        g = gelu(u)
        x = x + linear(g, P[p + "mlp.w2"], P[p + "mlp.b2"])
        c.update(h2=h2, u=u, g=g)
        layers.append(c)
    hf = layer_norm(x, P["ln_f.g"], P["ln_f.b"], eps)
    logits = linear(hf, P["head.w"], P["head.b"])
    check_finite(logits, "forward logits")
    return logits, {"layers": layers, "x_f": x, "hf": hf}


def backward_batch(model: TransformerModel, cache: dict, dlogits: np.ndarray) -> Tuple[np.ndarray, Params]:
    """Returns (grad wrt embedded input [B,T,d], grads of every stack parameter)."""
    cfg, P = model.config, model.params
    eps = cfg.ln_eps
    grads = {}
    dhf, grads["head.w"], grads["head.b"] = linear_backward(dlogits, cache["hf"], P["head.w"])
    dx, grads["ln_f.g"], grads["ln_f.b"] = layer_norm_backward(dhf, cache["x_f"], P["ln_f.g"], eps)
    for l in reversed(range(cfg.layers)):
        p = f"h{l}."
        c = cache["layers"][l]
        dg, grads[p + "mlp.w2"], grads[p + "mlp.b2"] = linear_backward(dx, c["g"], P[p + "mlp.w2"])
        du = gelu_backward(dg, c["u"])
        dh2, grads[p + "mlp.w1"], grads[p + "mlp.b1"] = linear_backward(du, c["h2"], P[p + "mlp.w1"])
        dxm, grads[p + "ln2.g"], grads[p + "ln2.b"] = layer_norm_backward(dh2, c["x_mid"], P[p + "ln2.g"], eps)
        dx = dx + dxm
        da, grads[p + "attn.wo"], grads[p + "attn.bo"] = linear_backward(dx, c["a"], P[p + "attn.wo"])
        dq, dk, dv = causal_attention_backward(_split_heads(da, cfg.heads), c["q"], c["k"], c["v"], c["w"])
        dh = 0
        for n, dt in (("q", dq), ("k", dk), ("v", dv)):
            dhn, grads[p + f"attn.w{n}"], grads[p + f"attn.b{n}"] = \
                linear_backward(_merge_heads(dt), c["h"], P[p + f"attn.w{n}"])
            dh = dh + dhn
        dxi, grads[p + "ln1.g"], grads[p + "ln1.b"] = layer_norm_backward(dh, c["x_in"], P[p + "ln1.g"], eps)
        dx = dx + dxi
    return dx, grads


def forward(model: TransformerModel, embedded: np.ndarray, capture: bool = False,
            pre_softmax: bool = False) -> Tuple[np.ndarray, Optional[AttentionTrace]]:
    """
    Single-episode forward.

    Args:
        embedded: [T, d] token embeddings
        capture: return an AttentionTrace of every layer and head
        pre_softmax: when capturing, also keep masked pre-softmax scores

    Returns:
        (logits [T, V], trace or None)
    """
    if embedded.ndim != 2:
        raise DimensionError(f"forward expects [T, d], got {embedded.shape}")
    logits, cache = forward_batch(model, embedded[None], capture_scores=capture and pre_softmax)
    trace = traces_from_cache(cache, model.config.pairs)[0] if capture else None
    return logits[0], trace


def traces_from_cache(cache: dict, pairs: int) -> List[AttentionTrace]:
    """One AttentionTrace per batch element of a forward_batch cache."""
    w = np.stack([c["w"] for c in cache["layers"]], axis=1)  # [B, layers, heads, T, T]
    s = None
    if all("scores" in c for c in cache["layers"]):
        s = np.stack([c["scores"] for c in cache["layers"]], axis=1)
    roles = token_roles(pairs)
    return [AttentionTrace(weights=w[b], roles=list(roles), scores=None if s is None else s[b])
            for b in range(w.shape[0])]


# =========================================================
# LOSS
# =========================================================

def loss_and_grads(model: TransformerModel, exemplars: np.ndarray, labels: np.ndarray,
                   targets: np.ndarray) -> Tuple[float, Params]:
    """Batch-mean last-token cross-entropy and gradients for every parameter."""
    x, ecache = embed_tokens(model, exemplars, labels)
    logits, cache = forward_batch(model, x)
    loss, dlogits = softmax_xent_last_batch(logits, targets)
    dx, grads = backward_batch(model, cache, dlogits)
    grads.update(embed_backward(model, ecache, dx))
    return loss, grads


def final_logits(model: TransformerModel, exemplars: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Query-position logits [B, V]."""
    x, _ = embed_tokens(model, exemplars, labels)
    logits, _ = forward_batch(model, x)
    return logits[:, -1, :]
