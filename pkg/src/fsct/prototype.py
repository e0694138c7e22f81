"""Learnable weighted-mean prototypes.

Weights are tied to episode slots (way index, shot index, feature), not to
category identities, since categories change from episode to episode.
"""
from __future__ import annotations

from typing import Optional

import numpy as np

from . import tensor as T
from .nn import Module, parameter
from .tensor import ShapeError, Tensor


class PrototypeWeights(Module):
    """Per-way, per-shot, per-feature logits, softmax-normalised over shots."""

    def __init__(self, n_way: int, k_shot: int, d: int) -> None:
        self.theta = parameter(np.ones((n_way, k_shot, d)))

    @property
    def shape(self) -> tuple:
        return self.theta.shape

    def mean_weights(self) -> Tensor:
        return T.softmax(self.theta, axis=1)


def proto_embed(z_s, weights: Optional[PrototypeWeights] = None) -> Tensor:
    """Collapse n×k×d support features to n×d prototypes.

    With ``weights=None`` this is the plain arithmetic mean over shots.
    """
    z_s = T.as_tensor(z_s)
    if z_s.ndim != 3:
        raise ShapeError(f"support features must be n×k×d, got {z_s.shape}")
    if weights is None:
        return T.mean(z_s, axis=1)
    if weights.shape != z_s.shape:
        raise ShapeError(
            f"prototype weights have shape {weights.shape} but support features are {z_s.shape}; "
            "evaluation must use the (n, k) configuration the model was built for"
        )
    return T.tensor_sum(z_s * weights.mean_weights(), axis=1)
