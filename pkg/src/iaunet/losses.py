"""Training objective: identity classification, batch-hard ranking, and
part-attention supervision, combined by fixed weights."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractViolation, DimensionError
from .tensor import Tensor

BCE_CLAMP = 1e-6
# larger than any cosine distance (max 2); shifts masked entries out of
# the running without perturbing float32 precision of the kept ones
_MASK_SHIFT = 4.0


@dataclass
class LossWeights:
    """Weights of the combined objective and the ranking margin."""
    lambda1: float = 1.0
    lambda2: float = 0.5
    margin: float = 0.3

    def __post_init__(self):
        if self.margin < 0 or self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigurationError(
                f"loss weights must be nonnegative: {self}")


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of the target classes.

    Stabilized with a detached max shift (log-sum-exp form).
    """
    B, K = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (B,):
        raise DimensionError(f"targets {targets.shape} for logits {logits.shape}")
    if targets.min() < 0 or targets.max() >= K:
        raise ContractViolation(
            f"target out of range [0, {K}): {targets.min()}..{targets.max()}")
    shift = logits.data.max(axis=1, keepdims=True)
    e = T.exp(T.sub(logits, Tensor(shift)))
    lse = T.add(T.log(T.sum_(e, axis=1)), Tensor(shift[:, 0]))
    onehot = np.zeros((B, K), dtype=logits.data.dtype)
    onehot[np.arange(B), targets] = 1.0
    picked = T.sum_(T.mul(logits, Tensor(onehot)), axis=1)
    return T.mean_(T.sub(lse, picked))


def cosine_distance(f: Tensor, g: Tensor) -> Tensor:
    """1 - cos(f, g) for two nonzero vectors; range [0, 2]."""
    if f.shape != g.shape or f.ndim != 1:
        raise DimensionError(f"cosine_distance on vectors, got {f.shape} vs {g.shape}")
    nf = float(np.linalg.norm(f.data))
    ng = float(np.linalg.norm(g.data))
    if nf == 0.0 or ng == 0.0:
        raise ContractViolation("cosine distance of a zero vector is undefined")
    fn = T.div(f, T.sqrt(T.sum_(T.mul(f, f))))
    gn = T.div(g, T.sqrt(T.sum_(T.mul(g, g))))
    return T.sub(Tensor(np.asarray(1.0, dtype=f.data.dtype)), T.sum_(T.mul(fn, gn)))


def cosine_distance_matrix(f: Tensor) -> Tensor:
    """Pairwise cosine distances of row vectors, (B, B)."""
    norms_sq = T.sum_(T.mul(f, f), axis=1, keepdims=True)
    if np.any(norms_sq.data == 0.0):
        raise ContractViolation("cosine distance of a zero vector is undefined")
    unit = T.div(f, T.sqrt(norms_sq))
    sim = T.matmul(unit, T.transpose(unit, (1, 0)))
    return T.sub(Tensor(np.asarray(1.0, dtype=f.data.dtype)), sim)


def batch_hard_triplet(features: Tensor, labels, margin: float = 0.3,
                       reduction: str = "sum") -> Tensor:
    """Hinge on each anchor's hardest positive vs hardest negative.

    ``reduction="sum"`` accumulates over anchors; ``"mean"`` divides by
    the batch size so the term is batch-shape invariant (the form used
    in training).
    """
    labels = np.asarray(labels)
    B = features.shape[0]
    if labels.shape != (B,):
        raise DimensionError(f"labels {labels.shape} for features {features.shape}")
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2:
        raise ContractViolation("batch-hard mining needs at least 2 classes")
    if counts.min() < 2:
        raise ContractViolation("batch-hard mining needs at least 2 samples per class")

    dist = cosine_distance_matrix(features)
    same = (labels[:, None] == labels[None, :]).astype(features.data.dtype)
    # shift non-candidates out of each selection instead of masking by
    # multiplication, so gradients always route to genuine candidates
    hardest_pos = T.max_(T.sub(dist, Tensor(_MASK_SHIFT * (1.0 - same))), axis=1)
    hardest_neg = T.min_(T.add(dist, Tensor(_MASK_SHIFT * same)), axis=1)
    m = Tensor(np.asarray(margin, dtype=features.data.dtype))
    hinge = T.relu(T.add(m, T.sub(hardest_pos, hardest_neg)))
    total = T.sum_(hinge)
    if reduction == "sum":
        return total
    if reduction == "mean":
        return total * (1.0 / B)
    raise ConfigurationError(f"unknown reduction {reduction!r}")


def part_attention_bce(attention: Tensor, masks) -> Tensor:
    """Binary cross entropy between attention maps and part masks.

    Normalized by T*H*W*N and summed over the batch; attention values
    are clamped to [1e-6, 1 - 1e-6] before the logs.
    """
    m = masks.data if isinstance(masks, Tensor) else np.asarray(masks)
    if m.shape != attention.shape:
        raise DimensionError(f"masks {m.shape} vs attention {attention.shape}")
    m = m.astype(attention.data.dtype)
    a = T.clip(attention, BCE_CLAMP, 1.0 - BCE_CLAMP)
    one = Tensor(np.asarray(1.0, dtype=attention.data.dtype))
    terms = T.add(T.mul(Tensor(m), T.log(a)),
                  T.mul(Tensor(1.0 - m), T.log(T.sub(one, a))))
    per_position = int(np.prod(attention.shape[1:]))
    return T.neg(T.sum_(terms)) * (1.0 / per_position)


def total_loss(l_cls, l_tri, l_p, weights: LossWeights) -> Tensor:
    """Weighted sum of the three components."""
    def as_tensor(x):
        return x if isinstance(x, Tensor) else Tensor(np.asarray(float(x)))

    l_cls, l_tri, l_p = as_tensor(l_cls), as_tensor(l_tri), as_tensor(l_p)
    return T.add(l_cls, T.add(l_tri * weights.lambda1, l_p * weights.lambda2))
