"""
Optimizer, gradient clipping and learning-rate schedule.

Adam uses the fixed betas (0.9, 0.99) and epsilon 1e-8. Updates are pure:
parameters and state are returned, never modified in place.
"""
import math
from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from src.utils.errors import DimensionError, NumericError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.99
ADAM_EPS = 1e-8

Params = Dict[str, np.ndarray]


@dataclass
class AdamState:
    """First and second moments per parameter plus the update count."""
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Params) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            step=0,
        )


def adam_step(
    params: Params,
    grads: Params,
    state: AdamState,
    lr: float,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    eps: float = ADAM_EPS,
):
    """
    One bias-corrected Adam update.

    Args:
        params: name -> parameter tensor
        grads: name -> gradient tensor, same shapes
        state: moments from the previous step
        lr: learning rate for this step

    Returns:
        (new_params, new_state)
    """
    for name, g in grads.items():
        if name not in params or g.shape != params[name].shape:
            raise DimensionError(f"adam: gradient {name} {g.shape} does not match its parameter")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"adam: non-finite gradient for {name}; step aborted")

    t = state.step + 1
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            new_params[name], new_m[name], new_v[name] = p, state.m[name], state.v[name]
            continue
        dt = p.dtype.type
        m = dt(beta1) * state.m[name] + dt(1.0 - beta1) * g
        v = dt(beta2) * state.v[name] + dt(1.0 - beta2) * (g * g)
        m_hat = m / dt(c1)
        v_hat = v / dt(c2)
        new_params[name] = p - dt(lr) * m_hat / (np.sqrt(v_hat) + dt(eps))
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(m=new_m, v=new_v, step=t)


def global_norm(grads: Params) -> float:
    """L2 norm over all gradient tensors, accumulated in float64."""
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_global_norm(grads: Params, max_norm: float, rtol: float = 1e-6) -> Params:
    """
    Rescale all gradients uniformly so their global norm is at most max_norm.

    Norms within rtol of max_norm count as already clipped, which keeps the
    operation idempotent under float32 rounding.
    """
    norm = global_norm(grads)
    if norm <= max_norm * (1.0 + rtol):
        return grads
    scale = max_norm / norm
    return {k: (g * g.dtype.type(scale)) for k, g in grads.items()}


def lr_at(step: int, max_lr: float, warmup_steps: int) -> float:
    """
    Linear warm-up to max_lr, then inverse square-root decay anchored at warm-up.

    lr = max_lr * min(step / warmup, sqrt(warmup / step)); lr(0) = 0.
    """
    if step <= 0:
        return 0.0
    return max_lr * min(step / warmup_steps, math.sqrt(warmup_steps / step))
