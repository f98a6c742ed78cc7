"""Squeeze-and-Excitation on the plane and its group generalization.

The squeeze averages a feature map over its whole domain (spatial positions,
and orientations too on p4), so the per-channel gate is invariant to the
group action; broadcasting it back therefore commutes with the action.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import InvalidConfig, ShapeMismatch
from .nn import Module, he_std
from .tensor import Tensor


def squeeze(f: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    """Per-channel gate: sigmoid(W1 . relu(W2 . mean_over_domain(f))).

    w1 is [d, d/r], w2 is [d/r, d]; the mean runs over every non-channel,
    non-batch axis (|G| = H*W on the plane, 4*H*W on p4).
    """
    if f.shape[1] != w2.shape[1]:
        raise ShapeMismatch(f"squeeze: {f.shape[1]} channels vs W2 {w2.shape}")
    pooled = T.reduce_mean(f, tuple(range(2, f.ndim)))      # [B, d]
    hidden = T.relu(T.matmul(pooled, T.transpose(w2)))      # [B, d/r]
    return T.sigmoid(T.matmul(hidden, T.transpose(w1)))     # [B, d]


def excite(f: Tensor, gate: Tensor) -> Tensor:
    """Broadcast the gate across the domain: f'(g) = f(g) * gate (channelwise)."""
    if gate.shape[-1] != f.shape[1]:
        raise ShapeMismatch(f"excite: gate {gate.shape} vs channels {f.shape[1]}")
    shape = (f.shape[0], f.shape[1]) + (1,) * (f.ndim - 2)
    return T.mul(f, T.reshape(gate, shape))


class SqueezeExcite(Module):
    """SE block: gate from the domain mean through a bottleneck MLP (no biases)."""

    def __init__(self, rng, channels: int, reduction: int):
        super().__init__()
        if channels % reduction:
            raise InvalidConfig(
                f"SE reduction {reduction} must divide channels {channels}")
        hidden = channels // reduction
        self.w1 = self.param("w1", Tensor(rng.normal(0, he_std(hidden), (channels, hidden))))
        self.w2 = self.param("w2", Tensor(rng.normal(0, he_std(channels), (hidden, channels))))

    def forward(self, x, ctx):
        return excite(x, squeeze(x, self.w1, self.w2))
