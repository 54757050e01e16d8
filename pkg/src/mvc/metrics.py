"""Classification and region-identification metrics.

Conventions: AU-ROC is the Mann-Whitney statistic with mid-rank ties, AU-PR
is step-interpolated average precision over unique score thresholds, F1 is
0 when undefined, and the Jaccard index of two empty masks is 1.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import ShapeError


def confusion_and_accuracy(true_labels, predicted_labels, num_classes: int):
    """Return ``(confusion, per_class_accuracy, overall_accuracy, empty_rows)``.

    Rows of the confusion matrix are true classes, columns predictions. A class
    with no samples gets accuracy 0 and is listed in ``empty_rows``.
    """
    t = np.asarray(true_labels, dtype=np.int64)
    p = np.asarray(predicted_labels, dtype=np.int64)
    if t.shape != p.shape:
        raise ShapeError(f"label sequences differ in length: {t.size} vs {p.size}")
    for arr in (t, p):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"labels must lie in [0, {num_classes})")
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (t, p), 1)
    rows = confusion.sum(axis=1)
    diag = np.diag(confusion)
    per_class = np.where(rows > 0, diag / np.maximum(rows, 1), 0.0)
    overall = float(diag.sum() / confusion.sum()) if confusion.sum() else 0.0
    empty = [int(c) for c in np.flatnonzero(rows == 0)]
    return confusion, per_class, overall, empty


def f1_binary(true, predicted) -> float:
    t = np.asarray(true).astype(bool).ravel()
    p = np.asarray(predicted).astype(bool).ravel()
    if t.shape != p.shape:
        raise ShapeError(f"sequences differ in length: {t.size} vs {p.size}")
    tp = int(np.sum(t & p))
    denom = 2 * tp + int(np.sum(~t & p)) + int(np.sum(t & ~p))
    return 2 * tp / denom if denom else 0.0


def au_roc(scores, labels) -> float:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).astype(bool).ravel()
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AU-ROC is undefined without both positive and negative labels")
    ranks = rankdata(s, method="average")
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def au_pr(scores, labels) -> float:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).astype(bool).ravel()
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("AU-PR is undefined without positive labels")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    # last index of each run of equal scores = one threshold
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp_at = tp[last]
    precision = tp_at / (last + 1)
    recall = tp_at / n_pos
    d_recall = np.diff(np.r_[0.0, recall])
    return float(np.sum(d_recall * precision))


def jaccard_similarity(mask_a, mask_b) -> float:
    a = np.asarray(mask_a).astype(bool)
    b = np.asarray(mask_b).astype(bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = int(np.sum(a | b))
    if union == 0:
        return 1.0
    return int(np.sum(a & b)) / union


def _safe(fn, *args):
    try:
        return fn(*args)
    except ValueError:
        return None


@dataclass
class RegionScores:
    f1: float | None = None
    au_roc: float | None = None
    au_pr: float | None = None
    jaccard: float | None = None


def region_scores(true_flags, pred_flags, scores, jaccards) -> RegionScores:
    if len(true_flags) == 0:
        return RegionScores()
    return RegionScores(
        f1=f1_binary(true_flags, pred_flags),
        au_roc=_safe(au_roc, scores, true_flags),
        au_pr=_safe(au_pr, scores, true_flags),
        jaccard=float(np.mean(jaccards)) if len(jaccards) else None,
    )


def macro(scores: list[RegionScores]) -> RegionScores:
    out = RegionScores()
    for key in ("f1", "au_roc", "au_pr", "jaccard"):
        vals = [getattr(s, key) for s in scores if getattr(s, key) is not None]
        setattr(out, key, float(np.mean(vals)) if vals else None)
    return out


@dataclass
class MetricsReport:
    classes: tuple[str, ...]
    counts: list[int] = field(default_factory=list)
    confusion: list[list[int]] | None = None
    per_class_accuracy: list[float] | None = None
    overall_accuracy: float | None = None
    region_per_class: dict[str, RegionScores] = field(default_factory=dict)
    region_pooled: RegionScores | None = None
    region_macro: RegionScores | None = None

    def records(self) -> list[dict]:
        """One flat record per line of the serialized report."""
        recs = [{"record": "summary", "classes": list(self.classes), "counts": self.counts,
                 "overall_accuracy": self.overall_accuracy}]
        if self.confusion is not None:
            recs.append({"record": "confusion", "rows": "true", "columns": "predicted",
                         "matrix": self.confusion})
        for i, name in enumerate(self.classes):
            rec = {"record": "class", "class": name, "count": self.counts[i] if self.counts else None}
            if self.per_class_accuracy is not None:
                rec["accuracy"] = self.per_class_accuracy[i]
            if name in self.region_per_class:
                rec.update(asdict(self.region_per_class[name]))
            recs.append(rec)
        if self.region_pooled is not None:
            recs.append({"record": "overall_pooled", **asdict(self.region_pooled)})
            recs.append({"record": "overall_macro", **asdict(self.region_macro)})
        return recs

    def to_text(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records())
