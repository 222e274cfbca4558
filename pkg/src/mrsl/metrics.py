"""Classification metrics: ROC/AUC, sensitivity at fixed specificity,
confusion tables, and per-category FPR/FDR with overall error.

AUC is the rank-based (Mann-Whitney) statistic, so tied scores contribute
half a concordance per tied pair and the value matches the brute-force
pairwise count exactly.  Sensitivity at a specificity target is read off the
ROC polyline; on a vertical segment the top vertex is used, matching the
convention that ties in specificity resolve to the best attainable
sensitivity.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.stats import rankdata


def _check_binary(scores, labels):
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be matching 1-D arrays")
    if scores.size == 0:
        raise ValueError("empty input")
    if not np.all(np.isfinite(scores)):
        raise ValueError("non-finite score")
    if not np.all(np.isin(labels, (0, 1))):
        raise ValueError("labels must be 0/1")
    labels = labels.astype(np.int64)
    if labels.min() == labels.max():
        raise ValueError("both classes must be present")
    return scores, labels


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC of ``scores`` against binary ``labels``.

    Computed from average ranks, which keeps every value an exact multiple
    of 0.5 / (n0*n1): identical to counting concordant pairs with ties at
    one half.
    """
    scores, labels = _check_binary(scores, labels)
    n1 = int(labels.sum())
    n0 = labels.size - n1
    ranks = rankdata(scores, method="average")
    return float((ranks[labels == 1].sum() - n1 * (n1 + 1) / 2.0) / (n0 * n1))


def roc_auc_by_group(scores, labels, groups) -> dict:
    """Per-group AUC diagnostics; groups with one class map to None."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    groups = np.asarray(groups)
    out = {}
    for g in dict.fromkeys(groups.tolist()):  # first-appearance order
        m = groups == g
        try:
            out[g] = roc_auc(scores[m], labels[m])
        except ValueError:
            out[g] = None
    return out


@dataclass(frozen=True)
class RocCurve:
    """ROC polyline vertices in sweep order (thresholds descending).

    The classifier at threshold t predicts positive when score >= t.  The
    vertex arrays carry a leading (fpr=0, sens=0) point for the empty
    positive set; the final vertex is always (1, 1).
    """

    thresholds: np.ndarray
    sensitivity: np.ndarray
    specificity: np.ndarray
    auc: float

    @property
    def fpr(self) -> np.ndarray:
        return 1.0 - self.specificity


def roc_curve(scores, labels) -> RocCurve:
    scores, labels = _check_binary(scores, labels)
    n1 = int(labels.sum())
    n0 = labels.size - n1
    order = np.argsort(-scores, kind="stable")
    s_sorted = scores[order]
    l_sorted = labels[order]
    # last index of each run of equal scores -> cumulative counts at that cut
    distinct = np.nonzero(np.diff(s_sorted))[0]
    last = np.concatenate([distinct, [scores.size - 1]])
    tp = np.cumsum(l_sorted)[last]
    fp = np.cumsum(1 - l_sorted)[last]
    sens = np.concatenate([[0.0], tp / n1])
    fpr = np.concatenate([[0.0], fp / n0])
    thresholds = np.concatenate([[np.inf], s_sorted[last]])
    return RocCurve(
        thresholds=thresholds,
        sensitivity=sens,
        specificity=1.0 - fpr,
        auc=roc_auc(scores, labels),
    )


def sensitivity_at_specificity(scores, labels, target: float,
                               method: str = "interpolate") -> float:
    """Sensitivity where the ROC polyline crosses specificity == ``target``.

    ``method="interpolate"`` (default) linearly interpolates between the two
    bracketing sweep vertices; ``method="step"`` returns the sensitivity of
    the most liberal threshold whose specificity still meets the target.
    """
    if not 0.0 < target < 1.0:
        raise ValueError("target specificity must lie in (0, 1)")
    curve = roc_curve(scores, labels)
    fpr = curve.fpr
    sens = curve.sensitivity
    x = 1.0 - target
    idx = int(np.searchsorted(fpr, x, side="right"))
    # idx-1 is the last sweep vertex with fpr <= x, i.e. the top of any
    # vertical stack at x.
    if method == "step" or fpr[idx - 1] == x:
        return float(sens[idx - 1])
    if method != "interpolate":
        raise ValueError(f"unknown method {method!r}")
    f0, f1 = fpr[idx - 1], fpr[idx]
    s0, s1 = sens[idx - 1], sens[idx]
    return float(s0 + (s1 - s0) * (x - f0) / (f1 - f0))


# ------------------------------------------------------------------ ordinal


@dataclass(frozen=True)
class ConfusionTable:
    """counts[t-1][p-1] = number of voxels with true category t predicted p."""

    counts: np.ndarray
    Z: int

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion_table(pred, true, Z: int) -> ConfusionTable:
    pred = np.asarray(pred)
    true = np.asarray(true)
    if pred.shape != true.shape or pred.ndim != 1 or pred.size == 0:
        raise ValueError("pred and true must be matching non-empty 1-D arrays")
    Z = int(Z)
    for name, a in (("pred", pred), ("true", true)):
        if not np.all((a >= 1) & (a <= Z)):
            raise ValueError(f"{name} categories must lie in 1..{Z}")
    counts = np.zeros((Z, Z), dtype=np.int64)
    np.add.at(counts, (true.astype(np.int64) - 1, pred.astype(np.int64) - 1), 1)
    return ConfusionTable(counts=_ro(counts), Z=Z)


def _ro(a):
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class CategoryRates:
    """Per-category false-positive and false-discovery rates.

    An entry is None when undefined: FPR(z) when no voxel has true category
    z, FDR(z) when category z is never predicted (rendered "NA" in tables).
    """

    fpr: tuple
    fdr: tuple
    overall_error: float


def category_rates(table: ConfusionTable) -> CategoryRates:
    counts = table.counts
    row = counts.sum(axis=1)
    col = counts.sum(axis=0)
    diag = np.diag(counts)
    fpr = tuple(
        None if row[z] == 0 else float((row[z] - diag[z]) / row[z])
        for z in range(table.Z)
    )
    fdr = tuple(
        None if col[z] == 0 else float((col[z] - diag[z]) / col[z])
        for z in range(table.Z)
    )
    overall = float(1.0 - diag.sum() / counts.sum())
    return CategoryRates(fpr=fpr, fdr=fdr, overall_error=overall)


# ------------------------------------------------------------------ reports


def binary_report(scores, labels, groups=None) -> dict:
    """AUC plus sensitivity at 80% and 90% specificity, as a JSON-able dict."""
    rep = {
        "auc": roc_auc(scores, labels),
        "s80": sensitivity_at_specificity(scores, labels, 0.80),
        "s90": sensitivity_at_specificity(scores, labels, 0.90),
    }
    if groups is not None:
        rep["auc_by_subject"] = {
            str(k): v for k, v in roc_auc_by_group(scores, labels, groups).items()
        }
    return rep


def ordinal_report(pred, true, Z: int) -> dict:
    table = confusion_table(pred, true, Z)
    rates = category_rates(table)
    return {
        "confusion": table.counts.tolist(),
        "fpr": list(rates.fpr),
        "fdr": list(rates.fdr),
        "overall_error": rates.overall_error,
    }


def _fmt_rate(v: Optional[float]) -> str:
    return "NA" if v is None else f"{v:.2f}"


def format_ordinal_report(rep: dict) -> str:
    """Aligned-text confusion table with FPR/FDR rows, two-decimal rates."""
    counts = rep["confusion"]
    Z = len(counts)
    head = [""] + [f"pred {z}" for z in range(1, Z + 1)]
    rows = [head]
    for t in range(Z):
        rows.append([f"true {t + 1}"] + [str(c) for c in counts[t]])
    rows.append(["FPR"] + [_fmt_rate(v) for v in rep["fpr"]])
    rows.append(["FDR"] + [_fmt_rate(v) for v in rep["fdr"]])
    widths = [max(len(r[j]) for r in rows) for j in range(Z + 1)]
    lines = ["  ".join(r[j].rjust(widths[j]) for j in range(Z + 1)) for r in rows]
    lines.append(f"overall error: {rep['overall_error']:.2f}")
    return "\n".join(lines)


def format_binary_report(rep: dict) -> str:
    lines = [f"AUC: {rep['auc']:.3f}",
             f"S80: {rep['s80']:.3f}",
             f"S90: {rep['s90']:.3f}"]
    return "\n".join(lines)
