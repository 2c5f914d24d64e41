"""Counting loss, similarity-map labels and the signal-to-noise similarity loss."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .counting import DensityMap
from .tensor_core import ShapeError, Tensor, _make, add, reshape, scale, square, sub, total

logger = logging.getLogger(__name__)

NEGATIVE, POSITIVE, IGNORED = 0, 1, -1


class LabelRule(str, enum.Enum):
    AT_LEAST_ONE = "at_least_one"
    # one-dot blocks are IGNORED; only blocks with two or more dots are positive
    MORE_THAN_ONE = "more_than_one"


@dataclass
class SimilarityLabels:
    labels: np.ndarray  # int grid [h_x, w_x] of POSITIVE / NEGATIVE / IGNORED
    r: int

    @property
    def positive(self) -> np.ndarray:
        return self.labels == POSITIVE

    @property
    def negative(self) -> np.ndarray:
        return self.labels == NEGATIVE


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.0

    def __post_init__(self):
        if not np.isfinite(self.alpha) or self.alpha < 0:
            raise ValueError(f"alpha must be finite and non-negative, got {self.alpha}")


def counting_loss(pred: DensityMap | Tensor, gt: DensityMap | Tensor) -> Tensor:
    """Sum of squared per-pixel differences."""
    p = pred.map if isinstance(pred, DensityMap) else pred
    g = gt.map if isinstance(gt, DensityMap) else gt
    if p.shape != g.shape:
        raise ShapeError(f"density maps differ in shape: {p.shape} vs {g.shape}")
    return total(square(sub(p, g)))


def assign_labels(
    dots: Sequence[Sequence[float]], h_x: int, w_x: int, r: int, rule: LabelRule = LabelRule.AT_LEAST_ONE
) -> SimilarityLabels:
    counts = np.zeros((h_x, w_x), dtype=int)
    for x, y in dots:
        i, j = int(y) // r, int(x) // r
        if 0 <= i < h_x and 0 <= j < w_x:
            counts[i, j] += 1
    if LabelRule(rule) is LabelRule.AT_LEAST_ONE:
        labels = np.where(counts >= 1, POSITIVE, NEGATIVE)
    else:
        labels = np.select([counts >= 2, counts == 1], [POSITIVE, IGNORED], NEGATIVE)
    return SimilarityLabels(labels.astype(int), r)


def _logsumexp(v: np.ndarray) -> float:
    m = v.max()
    return float(m + np.log(np.exp(v - m).sum()))


def snr_loss(scores: Tensor, positive: np.ndarray, negative: np.ndarray) -> Tensor:
    """-log(sum_pos exp / (sum_pos exp + sum_neg exp)) over a flat score vector.

    Evaluated as logsumexp(pos+neg) - logsumexp(pos).
    """
    s = scores.data.reshape(-1)
    pos = positive.reshape(-1).astype(bool)
    valid = pos | negative.reshape(-1).astype(bool)
    lse_all = _logsumexp(s[valid])
    lse_pos = _logsumexp(s[pos])
    shape = scores.shape

    def bw(g):
        grad = np.zeros_like(s)
        grad[valid] = np.exp(s[valid] - lse_all)
        grad[pos] -= np.exp(s[pos] - lse_pos)
        return ((g[0] * grad).reshape(shape),)

    return _make(np.array([lse_all - lse_pos]), (scores,), bw, "similarity_loss")


def similarity_loss(maps: Tensor | Sequence[Tensor], labels: SimilarityLabels) -> Tensor:
    """SNR loss per similarity map, averaged over maps.

    ``maps`` is one [h_x, w_x] map or a sequence of per-exemplar maps. A map
    with no positive position contributes zero and is logged as skipped.
    """
    if isinstance(maps, Tensor) and maps.data.ndim == 2:
        maps = [maps]
    maps = list(maps)
    if not labels.positive.any():
        logger.warning("similarity loss skipped: no positive positions")
        return Tensor(np.zeros(1))
    terms = []
    for m in maps:
        if m.shape != labels.labels.shape:
            raise ShapeError(f"similarity map {m.shape} does not match labels {labels.labels.shape}")
        terms.append(snr_loss(m, labels.positive, labels.negative))
    out = terms[0]
    for t in terms[1:]:
        out = add(out, t)
    return scale(out, 1.0 / len(terms))


def total_loss(count_l: Tensor, sim_l: Tensor, weights: LossWeights) -> Tensor:
    if weights.alpha == 0:
        return count_l
    return add(count_l, scale(sim_l, weights.alpha))


def similarity_loss_direct(scores: np.ndarray, positive: np.ndarray, negative: np.ndarray) -> float:
    """Unstabilised closed-form evaluation; reference for the stabilised path."""
    e = np.exp(np.asarray(scores, dtype=float).reshape(-1))
    pos = e[positive.reshape(-1).astype(bool)].sum()
    neg = e[negative.reshape(-1).astype(bool)].sum()
    return float(-np.log(pos / (pos + neg)))
