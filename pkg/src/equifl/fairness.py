"""Group-fairness metrics and the differentiable parity penalty.

Hard-decision metrics (``delta_dp``, ``delta_eo``) take binary predictions,
obtained from probabilities with :func:`hard_decisions`. The training-time
surrogate (``soft_dp_penalty``) works on probabilities directly.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .errors import DimensionError, InputError, NumericError

DECISION_THRESHOLD = 0.5


class PenaltyKind(str, enum.Enum):
    SOFT_DP = "soft_dp"
    NONE = "none"


@dataclass(frozen=True)
class GroupOutcomes:
    """Per-group confusion counts, indexed by group id."""

    total: np.ndarray
    predicted_positive: np.ndarray
    actual_positive: np.ndarray
    true_positive: np.ndarray

    @classmethod
    def from_arrays(cls, predictions, labels, sensitive, num_groups=None) -> "GroupOutcomes":
        preds, sens = _check_pair(predictions, sensitive)
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != preds.shape:
            raise DimensionError(f"labels length {labels.shape[0]} != predictions length {preds.shape[0]}")
        k = int(sens.max()) + 1 if num_groups is None else int(num_groups)
        total = np.bincount(sens, minlength=k)
        pred_pos = np.bincount(sens, weights=preds, minlength=k).astype(np.int64)
        act_pos = np.bincount(sens, weights=labels, minlength=k).astype(np.int64)
        tp = np.bincount(sens, weights=preds * labels, minlength=k).astype(np.int64)
        return cls(total, pred_pos, act_pos, tp)

    def positive_rates(self) -> dict[int, float]:
        return {g: self.predicted_positive[g] / self.total[g] for g in np.flatnonzero(self.total)}

    def true_positive_rates(self) -> dict[int, float]:
        return {g: self.true_positive[g] / self.actual_positive[g] for g in np.flatnonzero(self.actual_positive)}


def _check_pair(values, sensitive):
    values = np.asarray(values)
    sens = np.asarray(sensitive, dtype=np.int64)
    if values.ndim != 1 or sens.ndim != 1:
        raise DimensionError("expected 1-D vectors")
    if values.shape[0] != sens.shape[0]:
        raise DimensionError(f"length mismatch: {values.shape[0]} values vs {sens.shape[0]} group ids")
    if values.shape[0] == 0:
        raise InputError("empty input")
    if sens.min() < 0:
        raise InputError("group ids must be non-negative")
    return values, sens


def _max_gap(rates: dict[int, float]) -> float:
    if len(rates) < 2:
        return 0.0
    vals = list(rates.values())
    return float(max(vals) - min(vals))


def hard_decisions(probabilities) -> np.ndarray:
    """Threshold probabilities at 0.5 into {0, 1} class predictions."""
    return (np.asarray(probabilities) >= DECISION_THRESHOLD).astype(np.int64)


def delta_dp(predictions, sensitive) -> float:
    """Largest gap in positive-prediction rate between any two present groups."""
    preds, sens = _check_pair(predictions, sensitive)
    out = GroupOutcomes.from_arrays(preds, np.zeros_like(preds), sens)
    return _max_gap(out.positive_rates())


def delta_eo(predictions, labels, sensitive) -> float:
    """Largest gap in true-positive rate between groups.

    Groups without any actual positive are left out of the comparison.
    """
    out = GroupOutcomes.from_arrays(predictions, labels, sensitive)
    return _max_gap(out.true_positive_rates())


def soft_dp_penalty(probabilities, sensitive) -> tuple[float, np.ndarray]:
    """Max pairwise gap of group-mean probabilities, with its subgradient.

    The selected pair is the first one (in ascending group-id order) that
    attains the maximum gap. Rows of the higher-mean group of that pair get
    ``+1/size`` and rows of the lower one ``-1/size``; when the gap is zero
    the returned subgradient is zero.

    Returns:
        ``(value, grad)`` where ``grad`` has the length of ``probabilities``.
    """
    probs, sens = _check_pair(probabilities, sensitive)
    probs = probs.astype(np.float64, copy=False)
    if not np.all(np.isfinite(probs)):
        raise NumericError("non-finite probabilities in fairness penalty")
    counts = np.bincount(sens)
    sums = np.bincount(sens, weights=probs)
    present = np.flatnonzero(counts)
    grad = np.zeros_like(probs)
    if present.size < 2:
        return 0.0, grad
    means = sums[present] / counts[present]

    best, pair = -1.0, None
    for a, b in combinations(range(present.size), 2):
        gap = abs(means[a] - means[b])
        if gap > best:
            best, pair = gap, (a, b)
    if best == 0.0:
        return 0.0, grad

    a, b = pair
    hi, lo = (a, b) if means[a] > means[b] else (b, a)
    g_hi, g_lo = present[hi], present[lo]
    grad[sens == g_hi] = 1.0 / counts[g_hi]
    grad[sens == g_lo] = -1.0 / counts[g_lo]
    return float(best), grad
