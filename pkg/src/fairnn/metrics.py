"""Evaluation metrics on hard predictions, latent-space probes and exports."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import roc_auc_score
from sklearn.model_selection import StratifiedGroupKFold, cross_val_predict

MISSING = float("nan")


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def positives(self) -> int:
        return self.tp + self.fn

    @property
    def negatives(self) -> int:
        return self.tn + self.fp

    def __add__(self, other: "Confusion") -> "Confusion":
        return Confusion(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)


@dataclass(frozen=True)
class GroupConfusion:
    protected: Confusion
    nonprotected: Confusion

    @property
    def pooled(self) -> Confusion:
        return self.protected + self.nonprotected


def _confusion(c, p) -> Confusion:
    return Confusion(
        int(np.sum(c & p)), int(np.sum(~c & p)), int(np.sum(~c & ~p)), int(np.sum(c & ~p))
    )


def confusion(c, pred, group) -> GroupConfusion:
    """Per-group TP/FP/TN/FN counts; ``group == 1`` is the protected group."""
    c, pred, group = (np.asarray(a).reshape(-1) for a in (c, pred, group))
    if not (len(c) == len(pred) == len(group)):
        raise ValueError(f"length mismatch: {len(c)}, {len(pred)}, {len(group)}")
    for name, a in (("labels", c), ("predictions", pred), ("group", group)):
        if not np.isin(a, (0, 1)).all():
            raise ValueError(f"{name} must be binary")
    c, pred, group = c.astype(bool), pred.astype(bool), group.astype(bool)
    return GroupConfusion(_confusion(c[group], pred[group]), _confusion(c[~group], pred[~group]))


def _rate(num: int, den: int) -> float:
    return num / den if den else MISSING


def balanced_accuracy(gc: GroupConfusion) -> float:
    """``(TPR + TNR) / 2`` on pooled counts; NaN if a class is absent."""
    p = gc.pooled
    tpr = _rate(p.tp, p.positives)
    tnr = _rate(p.tn, p.negatives)
    return (tpr + tnr) / 2


@dataclass(frozen=True)
class FairnessReport:
    """Predictive and equalized-odds figures; missing values are NaN.

    ``d_fpr`` and ``d_fnr`` are non-protected minus protected.
    """

    accuracy: float
    balanced_accuracy: float
    tpr_s: float
    tpr_sbar: float
    tnr_s: float
    tnr_sbar: float
    d_fpr: float
    d_fnr: float
    eq_odds: float

    def to_dict(self) -> dict:
        return asdict(self)


def fairness_report(gc: GroupConfusion) -> FairnessReport:
    s, sb = gc.protected, gc.nonprotected
    pooled = gc.pooled
    n = pooled.positives + pooled.negatives
    fpr_s, fpr_sb = _rate(s.fp, s.negatives), _rate(sb.fp, sb.negatives)
    fnr_s, fnr_sb = _rate(s.fn, s.positives), _rate(sb.fn, sb.positives)
    d_fpr = fpr_sb - fpr_s
    d_fnr = fnr_sb - fnr_s
    return FairnessReport(
        accuracy=_rate(pooled.tp + pooled.tn, n),
        balanced_accuracy=balanced_accuracy(gc),
        tpr_s=_rate(s.tp, s.positives),
        tpr_sbar=_rate(sb.tp, sb.positives),
        tnr_s=_rate(s.tn, s.negatives),
        tnr_sbar=_rate(sb.tn, sb.negatives),
        d_fpr=d_fpr,
        d_fnr=d_fnr,
        eq_odds=abs(d_fpr) + abs(d_fnr),
    )


def evaluate(c, pred, group) -> FairnessReport:
    return fairness_report(confusion(c, pred, group))


def selection_score(report: FairnessReport) -> float:
    """``(1 - balanced_accuracy) + eq_odds``; lower is better, NaN counts as worst."""
    v = (1.0 - report.balanced_accuracy) + report.eq_odds
    return math.inf if math.isnan(v) else v


# ---------------------------------------------------------------------------
# Latent probes and exports
# ---------------------------------------------------------------------------


def latent_probe_auc(Z, group, folds: int = 5, seed: int = 0) -> float:
    """Cross-validated ROC AUC of a logistic probe predicting the group from ``Z``.

    0.5 means the groups are indistinguishable to a linear probe. Identical
    codes always share a fold; otherwise a held-out code's exact twin in the
    training folds biases the estimate.
    """
    Z = np.asarray(Z, dtype=np.float64)
    group = np.asarray(group).astype(int).reshape(-1)
    if Z.ndim != 2 or Z.shape[0] != group.shape[0]:
        raise ValueError("Z rows must match the group mask")
    counts = np.bincount(group, minlength=2)
    if counts.min() == 0:
        raise ValueError("both groups must be present")
    std = Z.std(axis=0)
    if not np.any(std > 1e-12):
        return 0.5
    Zs = (Z - Z.mean(axis=0)) / np.where(std > 1e-12, std, 1.0)
    twins = np.unique(Z, axis=0, return_inverse=True)[1].reshape(-1)
    folds = int(min(folds, counts.min(), twins.max() + 1))
    if folds < 2:
        return 0.5
    cv = StratifiedGroupKFold(n_splits=folds, shuffle=True, random_state=seed)
    probe = LogisticRegression(max_iter=1000)
    scores = cross_val_predict(probe, Zs, group, cv=cv, groups=twins, method="predict_proba")[:, 1]
    return float(roc_auc_score(group, scores))


SCATTER_HEADER = ("z1", "z2", "group", "label")


def export_latent_scatter(Z, group, labels, dims, path=None) -> str:
    """CSV of two latent coordinates with group and label per row.

    Returns the CSV text and writes it to ``path`` if given.
    """
    Z = np.asarray(Z, dtype=np.float64)
    i, j = (int(d) for d in dims)
    if i == j:
        raise ValueError("dims must name two different latent coordinates")
    if not (0 <= i < Z.shape[1] and 0 <= j < Z.shape[1]):
        raise ValueError(f"dims {dims} out of range for latent width {Z.shape[1]}")
    group = np.asarray(group).astype(int)
    labels = np.asarray(labels).astype(int)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SCATTER_HEADER)
    for row in zip(Z[:, i], Z[:, j], group, labels):
        w.writerow([repr(float(row[0])), repr(float(row[1])), int(row[2]), int(row[3])])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


# ---------------------------------------------------------------------------
# Summary rows
# ---------------------------------------------------------------------------

REPORT_FIELDS = tuple(f.name for f in fields(FairnessReport))
SUMMARY_FIELDS = ("dataset", "seed", "alpha", "beta", "preferential_sampling", "recon") + REPORT_FIELDS


def format_value(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def summary_row(report: FairnessReport, **keys) -> dict:
    row = {k: keys.get(k, "") for k in SUMMARY_FIELDS[:6]}
    row.update(report.to_dict())
    return row


def write_csv(rows, path, fieldnames=SUMMARY_FIELDS) -> None:
    """UTF-8, comma-separated, header row first; NaN becomes an empty field."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fieldnames)
        for r in rows:
            w.writerow([format_value(r.get(f, "")) for f in fieldnames])
