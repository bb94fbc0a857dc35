"""Differentiable lower bounds on mutual information.

jsd      E_joint[-softplus(-T)] - E_marg[softplus(T)]          in (-inf, 0]
infonce  ln n + mean log-softmax of the matching pair            <= ln n
dv       E_joint[T] - log E_marg[e^T]                            unbounded

The JSD value is monotonically related to MI but is not MI; shifted by
2 ln 2 it lands in [0, 2 ln 2] and is reported on that "JSD scale", never
as nats.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LN2 = math.log(2.0)
KINDS = ("jsd", "infonce", "dv")


@dataclass
class ScoreSet:
    """Critic scores on joint (``pos``) and product-of-marginals (``neg``) pairs."""

    pos: Tensor
    neg: Tensor

    def __post_init__(self):
        self.pos = ad.as_tensor(self.pos)
        self.neg = ad.as_tensor(self.neg)
        if self.pos.size == 0 or self.neg.size == 0:
            raise ValueError("score set needs at least one positive and one negative score")


@dataclass
class BoundEstimate:
    value: Tensor
    kind: str

    def __float__(self) -> float:
        return self.value.item()


def jsd_bound(s: ScoreSet) -> BoundEstimate:
    pos_term = ad.reduce("mean", ad.negate(ad.softplus(ad.negate(s.pos))))
    neg_term = ad.reduce("mean", ad.softplus(s.neg))
    return BoundEstimate(pos_term - neg_term, "jsd")


def infonce_bound(score_matrix, temperature=1.0) -> BoundEstimate:
    """Symmetric InfoNCE over an (n, n) matrix whose diagonal holds the positives.

    ``temperature`` may be a float or a scalar Tensor (learnable).
    """
    S = ad.as_tensor(score_matrix)
    if S.data.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ad.ShapeError(f"InfoNCE needs a square score matrix, got {S.shape}")
    if isinstance(temperature, Tensor):
        if not (temperature.data > 0).all():
            raise ValueError("temperature must be positive")
        logits = S * ad.exp(ad.negate(ad.log(temperature)))
    else:
        if not temperature > 0:
            raise ValueError("temperature must be positive")
        logits = ad.scale(S, 1.0 / temperature)
    n = S.shape[0]
    diag = ad.reduce("sum", logits * np.eye(n), axes=1)
    row = ad.reduce("mean", diag - ad.reduce("log_sum_exp", logits, axes=1))
    col = ad.reduce("mean", diag - ad.reduce("log_sum_exp", logits, axes=0))
    return BoundEstimate(ad.scale(row + col, 0.5) + math.log(n), "infonce")


def dv_bound(s: ScoreSet) -> BoundEstimate:
    """mean(pos) - log_sum_exp(neg) + ln k, i.e. log of the empirical mean of e^T."""
    k = s.neg.size
    neg = ad.reshape(s.neg, (k,))
    value = ad.reduce("mean", s.pos) - ad.reduce("log_sum_exp", neg) + math.log(k)
    return BoundEstimate(value, "dv")


@dataclass(frozen=True)
class MIEstimate:
    value: float
    kind: str
    unit: str  # "nats" or "jsd-scale"


def mi_from_trained_critic(kind: str, scores) -> MIEstimate:
    """Turn held-out critic scores into an MI estimate.

    dv/infonce report their bound in nats. jsd reports value + 2 ln 2, an
    estimate of 2 * JSD(joint || marginals) on [0, 2 ln 2].
    """
    if kind not in KINDS:
        raise ValueError(f"unknown estimator {kind!r}")
    if kind == "infonce":
        if isinstance(scores, ScoreSet):
            raise TypeError("infonce needs a square score matrix, not a ScoreSet")
        return MIEstimate(float(infonce_bound(scores)), kind, "nats")
    if not isinstance(scores, ScoreSet):
        raise TypeError(f"{kind} needs a ScoreSet of positive and negative scores")
    if kind == "dv":
        return MIEstimate(float(dv_bound(scores)), kind, "nats")
    return MIEstimate(float(jsd_bound(scores)) + 2 * LN2, kind, "jsd-scale")
