"""Attention traces captured from one forward pass."""
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

ROLE_SAMPLE = "sample"
ROLE_LABEL = "label"
ROLE_QUERY = "query"


def token_roles(pairs: int) -> List[str]:
    """Role of each of the 2L+1 positions."""
    roles = []
    for _ in range(pairs):
        roles += [ROLE_SAMPLE, ROLE_LABEL]
    roles.append(ROLE_QUERY)
    return roles


@dataclass
class AttentionTrace:
    """
    Post-softmax attention of every layer and head.

    weights: [layers, heads, T, T]
    scores: masked pre-softmax scores with the same shape, when captured
    roles: per-position token role
    """
    weights: np.ndarray
    roles: List[str]
    scores: Optional[np.ndarray] = None

    @property
    def layers(self) -> int:
        return self.weights.shape[0]

    @property
    def heads(self) -> int:
        return self.weights.shape[1]

    @property
    def tokens(self) -> int:
        return self.weights.shape[-1]

    def head(self, layer: int, head: int) -> np.ndarray:
        return self.weights[layer, head]

    def positions(self, role: str) -> List[int]:
        return [i for i, r in enumerate(self.roles) if r == role]

    def __str__(self) -> str:
        return f"AttentionTrace({self.layers} layers x {self.heads} heads, T={self.tokens})"
