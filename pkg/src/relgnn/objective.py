"""Class-balanced multi-label loss and F1/AUC evaluation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numeric as nm
from .errors import DimensionError, InputError, UndefinedMetricError, ValidationError
from .graph import LabelTable
from .numeric import Tensor

OFFSET = 0.05
SPAN = 1.05


@dataclass
class ClassBalance:
    r_pos: np.ndarray

    @property
    def r_neg(self) -> np.ndarray:
        return 1.0 - self.r_pos

    @classmethod
    def uniform(cls, num_aus: int) -> "ClassBalance":
        return cls(np.full(num_aus, 0.5))


def compute_balance(labels: LabelTable) -> ClassBalance:
    """Per-AU fraction of positive training samples."""
    if labels.num_samples < 1:
        raise InputError("cannot compute class balance of an empty table")
    return ClassBalance(labels.rows.sum(axis=0) / labels.num_samples)


def _check_inputs(p: Tensor, labels) -> np.ndarray:
    l = np.asarray(labels, dtype=np.float64)
    if l.shape != p.shape:
        raise DimensionError(f"probabilities {p.shape} vs labels {l.shape}")
    if not np.isin(l, (0.0, 1.0)).all():
        raise ValidationError("labels must be 0 or 1")
    if not ((p.data >= 0.0) & (p.data <= 1.0)).all():
        raise ValidationError("probabilities must lie in [0, 1]")
    return l


def weighted_smoothed_bce(p: Tensor, labels, w_pos, w_neg) -> Tensor:
    """-(1/(C·N)) Σ 2·{w_pos·[l=1]·ln((p+.05)/1.05) + w_neg·[l=0]·ln((1.05-p)/1.05)}.

    ``w_pos`` and ``w_neg`` are per-column weights (length C).
    """
    l = _check_inputs(p, labels)
    P = p.data
    c = P.shape[-1]
    wp = np.broadcast_to(np.asarray(w_pos, dtype=np.float64), (c,))
    wn = np.broadcast_to(np.asarray(w_neg, dtype=np.float64), (c,))
    norm = 2.0 / P.size
    terms = wp * l * np.log((P + OFFSET) / SPAN) + wn * (1.0 - l) * np.log((SPAN - P) / SPAN)
    value = -norm * terms.sum()

    def backward(g):
        d = wp * l / (P + OFFSET) - wn * (1.0 - l) / (SPAN - P)
        return (-g * norm * d,)

    return nm.record(np.array(value), (p,), backward)


def balanced_loss(p: Tensor, labels, bal: ClassBalance) -> Tensor:
    """Positives weighted by the negative ratio and negatives by the positive ratio."""
    if bal.r_pos.shape != (p.shape[-1],):
        raise DimensionError(f"balance has {bal.r_pos.shape[0]} AUs, predictions {p.shape[-1]}")
    return weighted_smoothed_bce(p, labels, bal.r_neg, bal.r_pos)


def bce_loss(p: Tensor, labels) -> Tensor:
    """Unweighted counterpart: same smoothing, weight ½ on both terms."""
    return weighted_smoothed_bce(p, labels, 0.5, 0.5)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def binarize_predictions(p, threshold: float = 0.5) -> np.ndarray:
    """1 where p >= threshold (ties go to the positive class)."""
    return (np.asarray(p, dtype=np.float64) >= threshold).astype(np.int8)


def f1_score(pred, truth) -> tuple[float, float, float]:
    """(precision, recall, f1); zero when the denominator is zero."""
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    if pred.shape != truth.shape:
        raise DimensionError(f"pred {pred.shape} vs truth {truth.shape}")
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def auc(scores, truth) -> float:
    """Probability that a random positive outscores a random negative (ties count ½)."""
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth).astype(bool)
    if scores.shape != truth.shape:
        raise DimensionError(f"scores {scores.shape} vs truth {truth.shape}")
    pos, neg = scores[truth], np.sort(scores[~truth])
    if pos.size == 0 or neg.size == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative sample")
    below = np.searchsorted(neg, pos, side="left")
    below_or_equal = np.searchsorted(neg, pos, side="right")
    # doubled counts stay integral: 2·wins + ties
    doubled = int(np.sum(below + below_or_equal, dtype=np.int64))
    return doubled / (2 * pos.size * neg.size)


def roc_points(scores, truth) -> np.ndarray:
    """ROC vertices as rows (threshold, fpr, tpr), thresholds descending from +inf."""
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth).astype(bool)
    n_pos, n_neg = int(truth.sum()), int((~truth).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC needs at least one positive and one negative sample")
    order = np.argsort(-scores, kind="stable")
    s, t = scores[order], truth[order]
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = np.cumsum(t)[last]
    fp = np.cumsum(~t)[last]
    return np.column_stack([np.r_[np.inf, s[last]], np.r_[0, fp] / n_neg, np.r_[0, tp] / n_pos])


METRICS = ("f1", "precision", "recall", "auc")


@dataclass
class MetricReport:
    au_ids: list[int]
    per_au: dict[int, dict[str, float | None]]
    flags: list[str] = field(default_factory=list)

    @property
    def macro(self) -> dict[str, float | None]:
        out = {}
        for m in METRICS:
            vals = [v[m] for v in self.per_au.values() if v[m] is not None]
            out[m] = float(np.mean(vals)) if vals else None
        return out

    @property
    def macro_f1(self) -> float:
        return self.macro["f1"]

    def to_obj(self) -> dict:
        return {"au_ids": self.au_ids,
                "per_au": {f"AU{a}": self.per_au[a] for a in self.au_ids},
                "macro": self.macro,
                "flags": self.flags}

    def to_json(self) -> str:
        return json.dumps(self.to_obj(), indent=1, sort_keys=False) + "\n"


def metric_report(probs, labels, au_ids: Sequence[int], threshold: float = 0.5) -> MetricReport:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    pred = binarize_predictions(probs, threshold)
    per_au, flags = {}, []
    for k, au in enumerate(au_ids):
        p, r, f = f1_score(pred[:, k], labels[:, k])
        if p + r == 0:
            flags.append(f"AU{au}: f1 zero-division")
        try:
            a = auc(probs[:, k], labels[:, k])
        except UndefinedMetricError:
            a = None
            flags.append(f"AU{au}: auc undefined (single class)")
        per_au[int(au)] = {"f1": f, "precision": p, "recall": r, "auc": a}
    return MetricReport([int(a) for a in au_ids], per_au, flags)


def average_reports(reports: Sequence[MetricReport]) -> MetricReport:
    """Per-AU arithmetic mean over reports (e.g. the three test folds)."""
    if not reports:
        raise InputError("no reports to average")
    au_ids = reports[0].au_ids
    if any(r.au_ids != au_ids for r in reports):
        raise ValidationError("reports cover different AU sets")
    per_au = {}
    for au in au_ids:
        entry = {}
        for m in METRICS:
            vals = [r.per_au[au][m] for r in reports if r.per_au[au][m] is not None]
            entry[m] = float(np.mean(vals)) if vals else None
        per_au[au] = entry
    flags = [f"fold {k}: {f}" for k, r in enumerate(reports) for f in r.flags]
    return MetricReport(list(au_ids), per_au, flags)

