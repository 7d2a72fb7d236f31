"""
Dense tensor primitives with hand-derived backward passes.

A Tensor here is a ``numpy.ndarray``; training uses float32 throughout.
Every primitive preserves the dtype of its inputs so the gradient checker
can probe the same code in float64. Functions accept arbitrary leading
batch axes unless stated otherwise.
"""
import math
from typing import Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from src.utils.errors import DimensionError, LabelRangeError, NumericError

DTYPE = np.float32
LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


def as_tensor(x) -> np.ndarray:
    """Coerce to a float32 array."""
    return np.asarray(x, dtype=DTYPE)


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    """Raise NumericError if x holds NaN or Inf."""
    if not np.all(np.isfinite(x)):
        bad = int(np.size(x) - np.count_nonzero(np.isfinite(x)))
        raise NumericError(f"{what}: {bad} non-finite values")
    return x


# =========================================================
# MATMUL / LINEAR
# =========================================================

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """a[m,k] @ b[k,n] -> [m,n]."""
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dims disagree: {a.shape} x {b.shape}")
    return a @ b


def matmul_backward(grad: np.ndarray, a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Gradients of sum(grad * (a @ b)) with respect to a and b."""
    return grad @ b.T, a.T @ grad


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray = None) -> np.ndarray:
    """x[..., k] @ w[k, n] (+ b[n])."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input dim {x.shape[-1]} vs weight {w.shape}")
    y = x @ w
    if b is not None:
        y = y + b
    return y


def linear_backward(grad: np.ndarray, x: np.ndarray, w: np.ndarray):
    """Returns (grad_x, grad_w, grad_b) for y = x @ w + b."""
    g2 = grad.reshape(-1, grad.shape[-1])
    x2 = x.reshape(-1, x.shape[-1])
    grad_w = x2.T @ g2
    grad_b = g2.sum(axis=0)
    grad_x = grad @ w.T
    return grad_x, grad_w, grad_b


# =========================================================
# ACTIVATIONS
# =========================================================

def gelu(x: np.ndarray) -> np.ndarray:
    """GELU, tanh approximation."""
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x ** 3)))


def gelu_backward(grad: np.ndarray, x: np.ndarray) -> np.ndarray:
    u = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
    return grad * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad: np.ndarray, x: np.ndarray) -> np.ndarray:
    return grad * (x > 0)


# =========================================================
# LAYER NORM
# =========================================================

def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = LN_EPS) -> np.ndarray:
    """Normalize the last axis with population variance, then scale and shift."""
    if x.shape[-1] < 1 or gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise DimensionError(f"layer_norm: x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    xhat = (x - mu) / np.sqrt(var + eps)
    return xhat * gain + bias


def layer_norm_backward(grad: np.ndarray, x: np.ndarray, gain: np.ndarray, eps: float = LN_EPS):
    """Returns (grad_x, grad_gain, grad_bias)."""
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    d = x.shape[-1]
    grad_gain = (grad * xhat).reshape(-1, d).sum(axis=0)
    grad_bias = grad.reshape(-1, d).sum(axis=0)
    gx = grad * gain
    grad_x = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
    return grad_x, grad_gain, grad_bias


# =========================================================
# CAUSAL ATTENTION
# =========================================================

def causal_mask(T: int) -> np.ndarray:
    """Boolean [T,T] mask, True strictly above the diagonal."""
    return np.triu(np.ones((T, T), dtype=bool), k=1)


def causal_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, return_scores: bool = False):
    """
    Scaled dot-product attention with a causal mask.

    Args:
        q, k, v: [..., T, d] with matching shapes
        return_scores: also return the masked pre-softmax scores

    Returns:
        (out [..., T, d], weights [..., T, T]) and optionally scores
    """
    if q.shape != k.shape or q.shape[:-1] != v.shape[:-1]:
        raise DimensionError(f"attention shapes disagree: q {q.shape}, k {k.shape}, v {v.shape}")
    T, d = q.shape[-2], q.shape[-1]
    if T == 0:
        raise DimensionError("attention over an empty sequence")
    scale = 1.0 / math.sqrt(d)
    scores = (q @ np.swapaxes(k, -1, -2)) * q.dtype.type(scale)
    mask = causal_mask(T)
    scores = np.where(mask, -np.inf, scores).astype(q.dtype, copy=False)
    shifted = scores - scores.max(axis=-1, keepdims=True)
    weights = np.exp(shifted)
    weights /= weights.sum(axis=-1, keepdims=True)
    out = weights @ v
    if return_scores:
        return out, weights, np.where(mask, 0.0, scores).astype(q.dtype)
    return out, weights


def causal_attention_backward(grad_out: np.ndarray, q: np.ndarray, k: np.ndarray,
                              v: np.ndarray, weights: np.ndarray):
    """Returns (grad_q, grad_k, grad_v)."""
    scale = q.dtype.type(1.0 / math.sqrt(q.shape[-1]))
    grad_v = np.swapaxes(weights, -1, -2) @ grad_out
    grad_w = grad_out @ np.swapaxes(v, -1, -2)
    # softmax backward; masked entries have zero weight so they drop out
    grad_s = weights * (grad_w - (weights * grad_w).sum(axis=-1, keepdims=True))
    grad_q = (grad_s @ k) * scale
    grad_k = (np.swapaxes(grad_s, -1, -2) @ q) * scale
    return grad_q, grad_k, grad_v


# =========================================================
# LOSS
# =========================================================

def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def softmax_xent_last(logits: np.ndarray, target: int) -> Tuple[float, np.ndarray]:
    """
    Cross-entropy on the final position only.

    Args:
        logits: [T, V]
        target: label id for the last position

    Returns:
        (loss, grad [T, V]) with grad zero on rows 0..T-2
    """
    T, V = logits.shape
    if not 0 <= target < V:
        raise LabelRangeError(f"target {target} outside label vocabulary of {V}")
    logp = _log_softmax(logits[-1])
    loss = float(-logp[target])
    grad = np.zeros_like(logits)
    grad[-1] = np.exp(logp)
    grad[-1, target] -= 1
    return loss, grad


def softmax_xent_last_batch(logits: np.ndarray, targets: np.ndarray) -> Tuple[float, np.ndarray]:
    """Batch mean of softmax_xent_last over logits [B, T, V] and targets [B]."""
    B, T, V = logits.shape
    targets = np.asarray(targets)
    if targets.min() < 0 or targets.max() >= V:
        raise LabelRangeError(f"targets outside label vocabulary of {V}")
    logp = _log_softmax(logits[:, -1, :])
    rows = np.arange(B)
    loss = float(-logp[rows, targets].mean())
    grad = np.zeros_like(logits)
    last = np.exp(logp)
    last[rows, targets] -= 1
    grad[:, -1, :] = last / B
    return loss, grad


# =========================================================
# CONVOLUTION
# =========================================================

def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    """x [B,C,H,W] -> columns [B*Ho*Wo, C*kh*kw] and (Ho, Wo)."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    B, C, Ho, Wo = win.shape[:4]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * kh * kw)
    return cols, Ho, Wo


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """x [B,C,H,W], w [O,C,kh,kw], b [O] -> [B,O,Ho,Wo]."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} vs kernel {w.shape}")
    O, C, kh, kw = w.shape
    cols, Ho, Wo = _im2col(x, kh, kw, stride, pad)
    y = cols @ w.reshape(O, -1).T + b
    return y.reshape(x.shape[0], Ho, Wo, O).transpose(0, 3, 1, 2)


def conv2d_backward(grad: np.ndarray, x: np.ndarray, w: np.ndarray, stride: int = 1, pad: int = 0):
    """Returns (grad_x, grad_w, grad_b)."""
    O, C, kh, kw = w.shape
    B, _, H, W = x.shape
    cols, Ho, Wo = _im2col(x, kh, kw, stride, pad)
    g2 = grad.transpose(0, 2, 3, 1).reshape(-1, O)
    grad_w = (g2.T @ cols).reshape(w.shape)
    grad_b = g2.sum(axis=0)
    gcols = (g2 @ w.reshape(O, -1)).reshape(B, Ho, Wo, C, kh, kw)
    gxp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride] += \
                gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    grad_x = gxp[:, :, pad:pad + H, pad:pad + W] if pad else gxp
    return grad_x, grad_w, grad_b


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """[B,C,H,W] -> [B,C]."""
    return x.mean(axis=(2, 3))


def global_avg_pool_backward(grad: np.ndarray, x_shape) -> np.ndarray:
    B, C, H, W = x_shape
    return np.broadcast_to(grad[:, :, None, None] / (H * W), x_shape).astype(grad.dtype)
