"""Evaluation-time group fairness and accuracy metrics over hard predictions.

All metrics are computed from empirical frequencies of (y_true, y_pred,
attribute) and never look at scores.  Empty groups raise instead of silently
contributing zero, since a zero would fake fairness on degenerate data.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateGroupError, InvalidArgumentError


@dataclass
class PredictionSet:
    """Aligned arrays of true labels, hard predictions, scores, and binary attributes."""

    y_true: np.ndarray
    y_pred: np.ndarray
    y_score: np.ndarray
    attributes: dict[str, np.ndarray]

    def __post_init__(self):
        self.y_true = np.asarray(self.y_true, dtype=np.int8)
        self.y_pred = np.asarray(self.y_pred, dtype=np.int8)
        self.y_score = np.asarray(self.y_score, dtype=np.float64)
        n = self.y_true.shape[0]
        if n < 1:
            raise InvalidArgumentError("PredictionSet: needs at least one row")
        if self.y_pred.shape[0] != n or self.y_score.shape[0] != n:
            raise InvalidArgumentError("PredictionSet: array length mismatch")
        for name in ("y_true", "y_pred"):
            col = getattr(self, name)
            if not np.all((col == 0) | (col == 1)):
                raise InvalidArgumentError(f"PredictionSet: {name} must be binary")
        if np.any(self.y_score < 0) or np.any(self.y_score > 1):
            raise InvalidArgumentError("PredictionSet: scores must lie in [0, 1]")
        converted = {}
        for name, col in self.attributes.items():
            col = np.asarray(col, dtype=np.int8)
            if col.shape[0] != n:
                raise InvalidArgumentError(f"PredictionSet: attribute {name!r} length mismatch")
            if not np.all((col == 0) | (col == 1)):
                raise InvalidArgumentError(f"PredictionSet: attribute {name!r} must be binary")
            converted[name] = col
        self.attributes = converted

    @property
    def n(self) -> int:
        return int(self.y_true.shape[0])

    def attribute(self, name: str) -> np.ndarray:
        if name not in self.attributes:
            raise InvalidArgumentError(f"unknown attribute {name!r}")
        return self.attributes[name]


@dataclass
class FairnessReport:
    """Per-run metric bundle: accuracy, accuracy parity, and per-attribute gaps.

    ``delta_dp`` / ``delta_eo`` are filled only when a baseline report is
    attached via :func:`fairness_delta`; negative deltas mean the gap shrank.
    """

    acc: float
    ap: float
    dp: dict[str, float]
    eo: dict[str, float]
    eo_by_label: dict[str, dict[int, float]] = field(default_factory=dict)
    delta_dp: dict[str, float] | None = None
    delta_eo: dict[str, float] | None = None

    @property
    def attribute_names(self) -> list[str]:
        return list(self.dp.keys())

    def to_dict(self) -> dict:
        out = {
            "acc": self.acc,
            "ap": self.ap,
            "dp": dict(self.dp),
            "eo": dict(self.eo),
            "eo_by_label": {k: {str(y): g for y, g in v.items()} for k, v in self.eo_by_label.items()},
        }
        if self.delta_dp is not None:
            out["delta_dp"] = dict(self.delta_dp)
        if self.delta_eo is not None:
            out["delta_eo"] = dict(self.delta_eo)
        return out


def _group_masks(preds: PredictionSet, attribute: str) -> tuple[np.ndarray, np.ndarray]:
    a = preds.attribute(attribute)
    g0, g1 = a == 0, a == 1
    if not g0.any() or not g1.any():
        raise DegenerateGroupError(f"attribute {attribute!r} has an empty group")
    return g0, g1


def demographic_parity(preds: PredictionSet, attribute: str) -> float:
    """|P(pred=1 | a=0) - P(pred=1 | a=1)| from empirical frequencies."""
    g0, g1 = _group_masks(preds, attribute)
    return float(abs(np.mean(preds.y_pred[g0]) - np.mean(preds.y_pred[g1])))


def equalized_odds_gaps(preds: PredictionSet, attribute: str) -> dict[int, float]:
    """Positive-rate gap between groups, conditioned on each true label value."""
    g0, g1 = _group_masks(preds, attribute)
    gaps: dict[int, float] = {}
    for y in (0, 1):
        cell0 = g0 & (preds.y_true == y)
        cell1 = g1 & (preds.y_true == y)
        if not cell0.any() or not cell1.any():
            raise DegenerateGroupError(f"attribute {attribute!r}: empty (y={y}, group) cell")
        gaps[y] = float(abs(np.mean(preds.y_pred[cell0]) - np.mean(preds.y_pred[cell1])))
    return gaps


def equalized_odds(preds: PredictionSet, attribute: str) -> float:
    """Worst-case over true labels of the per-label positive-rate gap.

    The per-label gaps are exposed via :func:`equalized_odds_gaps` so reports
    can show both the TPR and FPR components behind the max.
    """
    gaps = equalized_odds_gaps(preds, attribute)
    return max(gaps.values())


def balanced_accuracy(preds: PredictionSet) -> float:
    """Mean over (attribute, group) cells of the within-group accuracy.

    The within-group accuracy P(pred = y_true | a) does not depend on the
    label value being summed over, so the label sum and the |labels| divisor
    cancel and the metric reduces to a plain mean over the 2K groups.
    """
    accs = []
    for name in preds.attributes:
        g0, g1 = _group_masks(preds, name)
        for g in (g0, g1):
            accs.append(np.mean(preds.y_pred[g] == preds.y_true[g]))
    if not accs:
        raise DegenerateGroupError("balanced_accuracy: no attributes")
    return float(np.mean(accs))


def accuracy_parity(preds: PredictionSet) -> float:
    """Mean over attributes of the summed |P(pred=y|a) - P(pred=y'|a')| gaps.

    The sum runs over ordered pairs of distinct (group, predicted-label)
    cells, so each unordered pair is counted twice.
    """
    total = 0.0
    names = list(preds.attributes)
    if not names:
        raise DegenerateGroupError("accuracy_parity: no attributes")
    for name in names:
        g0, g1 = _group_masks(preds, name)
        cells = []
        for g in (g0, g1):
            for y in (0, 1):
                cells.append(np.mean(preds.y_pred[g] == y))
        s = 0.0
        for i, p in enumerate(cells):
            for j, q in enumerate(cells):
                if i != j:
                    s += abs(p - q)
        total += s
    return float(total / len(names))


def evaluate(preds: PredictionSet) -> FairnessReport:
    """Compute the full metric bundle for one prediction set."""
    dp = {name: demographic_parity(preds, name) for name in preds.attributes}
    eo_by_label = {name: equalized_odds_gaps(preds, name) for name in preds.attributes}
    eo = {name: max(gaps.values()) for name, gaps in eo_by_label.items()}
    return FairnessReport(
        acc=balanced_accuracy(preds),
        ap=accuracy_parity(preds),
        dp=dp,
        eo=eo,
        eo_by_label=eo_by_label,
    )


def fairness_delta(biased: FairnessReport, debiased: FairnessReport) -> FairnessReport:
    """Attach per-attribute gap changes (debiased minus biased) to the debiased report.

    Negative values mean the gap shrank after mitigation.
    """
    if set(biased.dp) != set(debiased.dp):
        raise InvalidArgumentError(
            f"fairness_delta: attribute mismatch {sorted(biased.dp)} vs {sorted(debiased.dp)}"
        )
    delta_dp = {k: debiased.dp[k] - biased.dp[k] for k in debiased.dp}
    delta_eo = {k: debiased.eo[k] - biased.eo[k] for k in debiased.eo}
    return FairnessReport(
        acc=debiased.acc,
        ap=debiased.ap,
        dp=dict(debiased.dp),
        eo=dict(debiased.eo),
        eo_by_label={k: dict(v) for k, v in debiased.eo_by_label.items()},
        delta_dp=delta_dp,
        delta_eo=delta_eo,
    )
