"""Asymmetric classification loss and the combined training objective.

The asymmetric loss treats positive and negative labels differently:
positives get a focal factor (1 - p)^gamma_pos, negatives get p_m^gamma_neg
where p_m = max(p - clip, 0) shifts easy negatives to exactly zero loss.
The total objective adds the semantic-map loss and the transport loss to
the classification loss with two weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "AslConfig",
    "LossWeights",
    "asl",
    "classification_loss",
    "semantic_map_loss",
    "total_loss",
]

PROB_FLOOR = 1e-7


@dataclass
class AslConfig:
    """Focusing exponents and the negative-side probability shift."""

    gamma_pos: float = 0.0
    gamma_neg: float = 2.0
    clip: float = 0.05

    def __post_init__(self):
        if self.gamma_pos < 0 or self.gamma_neg < 0:
            raise ValueError("focusing exponents must be >= 0")
        if not 0.0 <= self.clip < 1.0:
            raise ValueError(f"clip {self.clip} outside [0, 1)")


@dataclass
class LossWeights:
    """Scales for the semantic-map term (lambda1) and transport term (lambda2)."""

    lambda1: float = 0.04
    lambda2: float = 0.5

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be >= 0")


def asl(p, y, cfg: AslConfig) -> Tensor:
    """Asymmetric loss on probabilities, averaged over classes.

    Positive labels contribute -(1-p)^g+ log p, negatives contribute
    -(p_m)^g- log(1 - p_m) with p_m = max(p - clip, 0). Probabilities
    are clamped to [1e-7, 1 - 1e-7] first so the result stays finite.
    Always nonnegative.
    """
    y = np.asarray(y, dtype=float)
    if not isinstance(p, Tensor):
        p = Tensor(np.asarray(p, dtype=float))
    p = T.clamp(p, PROB_FLOOR, 1.0 - PROB_FLOOR)
    pos = T.mul(T.pow_const(T.sub(1.0, p), cfg.gamma_pos), T.log(p))
    p_m = T.clamp(T.sub(p, cfg.clip), 0.0, 1.0)
    neg = T.mul(T.pow_const(p_m, cfg.gamma_neg), T.log(T.sub(1.0, p_m)))
    per_class = T.add(T.mul(pos, y), T.mul(neg, 1.0 - y))
    return T.neg(T.mean(per_class))


def classification_loss(z: Tensor, y, cfg: AslConfig) -> Tensor:
    """Asymmetric loss applied to logits: asl(sigmoid(z), y)."""
    return asl(T.sigmoid(z), y, cfg)


def semantic_map_loss(m: Tensor, y, cfg: AslConfig) -> Tensor:
    """Asymmetric loss on the most confident patch per class.

    m is the (P x C) semantic map; the per-class max over patches is the
    class logit, so gradient reaches only each class's argmax patch.
    """
    peak = T.max_reduce(m, axis=0)
    return asl(T.sigmoid(peak), y, cfg)


def total_loss(l_cls, l_m, l_ot, w: LossWeights) -> Tensor:
    """l_cls + lambda1 * l_m + lambda2 * l_ot."""
    return T.add(l_cls, T.add(T.mul(l_m, w.lambda1), T.mul(l_ot, w.lambda2)))
