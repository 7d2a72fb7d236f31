"""
Residual convolutional embedder for raster exemplars.

Each block is relu(conv3x3/s2 -> relu -> conv3x3/s1 + conv1x1/s2 shortcut).
After the last block a global average pool and a linear projection map the
feature map to the model's embedding dimension.
"""
from collections import OrderedDict
from typing import Dict, Tuple

import numpy as np

from src.models.config import ModelConfig
from src.modules.tensor_ops import (
    conv2d,
    conv2d_backward,
    global_avg_pool,
    global_avg_pool_backward,
    linear,
    linear_backward,
    relu,
    relu_backward,
)
from src.utils.errors import DimensionError


def conv_param_shapes(config: ModelConfig) -> "OrderedDict[str, Tuple[int, ...]]":
    shapes = OrderedDict()
    c_in = 1
    for i, width in enumerate(config.conv.widths):
        p = f"conv.block{i}."
        shapes[p + "w1"] = (width, c_in, 3, 3)
        shapes[p + "b1"] = (width,)
        shapes[p + "w2"] = (width, width, 3, 3)
        shapes[p + "b2"] = (width,)
        shapes[p + "wsc"] = (width, c_in, 1, 1)
        shapes[p + "bsc"] = (width,)
        c_in = width
    shapes["conv.proj.w"] = (c_in, config.embed_dim)
    shapes["conv.proj.b"] = (config.embed_dim,)
    return shapes


def to_unit(images: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Scale byte rasters to [0, 1]."""
    return images.astype(dtype) / dtype(255.0) if images.dtype == np.uint8 else images.astype(dtype)


def conv_forward(params: Dict[str, np.ndarray], images: np.ndarray, config: ModelConfig):
    """
    Embed a stack of rasters.

    Args:
        params: model parameters (only ``conv.*`` are read)
        images: [N, H, W] bytes or floats
        config: model config carrying exemplar_shape and conv widths

    Returns:
        (embeddings [N, d], cache for conv_backward)
    """
    if images.ndim != 3 or tuple(images.shape[1:]) != tuple(config.exemplar_shape):
        raise DimensionError(f"raster batch {images.shape} does not match exemplar shape {config.exemplar_shape}")
    dtype = params["conv.proj.w"].dtype.type
    x = to_unit(images, dtype)[:, None, :, :]
    blocks = []
    for i in range(len(config.conv.widths)):
        p = f"conv.block{i}."
        z1 = conv2d(x, params[p + "w1"], params[p + "b1"], stride=2, pad=1)
        a1 = relu(z1)
        z2 = conv2d(a1, params[p + "w2"], params[p + "b2"], stride=1, pad=1)
        sc = conv2d(x, params[p + "wsc"], params[p + "bsc"], stride=2, pad=0)
        z = z2 + sc
        blocks.append({"x": x, "z1": z1, "a1": a1, "z": z})
        x = relu(z)
    pooled = global_avg_pool(x)
    out = linear(pooled, params["conv.proj.w"], params["conv.proj.b"])
    return out, {"blocks": blocks, "last": x, "pooled": pooled}


def conv_backward(params: Dict[str, np.ndarray], cache: dict, grad: np.ndarray) -> Dict[str, np.ndarray]:
    """Parameter gradients of the conv embedder for upstream grad [N, d]."""
    grads = {}
    gp, grads["conv.proj.w"], grads["conv.proj.b"] = linear_backward(grad, cache["pooled"], params["conv.proj.w"])
    gx = global_avg_pool_backward(gp, cache["last"].shape)
    for i in reversed(range(len(cache["blocks"]))):
        p = f"conv.block{i}."
        c = cache["blocks"][i]
        gz = relu_backward(gx, c["z"])
        ga1, grads[p + "w2"], grads[p + "b2"] = conv2d_backward(gz, c["a1"], params[p + "w2"], stride=1, pad=1)
        gz1 = relu_backward(ga1, c["z1"])
        gx_main, grads[p + "w1"], grads[p + "b1"] = conv2d_backward(gz1, c["x"], params[p + "w1"], stride=2, pad=1)
        gx_sc, grads[p + "wsc"], grads[p + "bsc"] = conv2d_backward(gz, c["x"], params[p + "wsc"], stride=2, pad=0)
        gx = gx_main + gx_sc
    return grads


def conv_embed(image: np.ndarray, model) -> np.ndarray:
    """Embed a single H x W raster to a length-d vector."""
    image = np.asarray(image)
    if image.ndim == 3 and image.shape[-1] == 1:
        image = image[..., 0]
    if image.ndim != 2:
        raise DimensionError(f"expected an H x W raster, got shape {image.shape}")
    out, _ = conv_forward(model.params, image[None], model.config)
    return out[0]
