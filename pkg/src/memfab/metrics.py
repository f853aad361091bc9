"""Empirical ROC machinery, AUC, interpolated TPR at fixed FPR, EER and Error Area."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

LOG_FLOOR = 1e-4


class SingleClassError(ValueError):
    pass


class ProtocolMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class RocCurve:
    """Vertices of the empirical ROC, ordered by decreasing threshold.

    Vertex i predicts positive for scores strictly greater than `thresholds[i]`; the first
    threshold is the maximum score (nothing positive) and the last is -inf (everything positive).
    """

    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    positive_label_meaning: str = "member"


def _as_scores_labels(scores, labels):
    if labels is None:
        pairs = list(scores)
        scores = [s for s, _ in pairs]
        labels = [l for _, l in pairs]
    s = np.asarray(scores, dtype=np.float64).ravel()
    l = np.asarray(labels).astype(bool).ravel()
    if s.shape != l.shape:
        raise ValueError("scores and labels differ in length")
    if np.isnan(s).any():
        raise ValueError("NaN score")
    return s, l


def roc_curve(scores, labels=None, positive_label_meaning: str = "member") -> RocCurve:
    """Exact ROC over all distinct thresholds. Accepts (score, label) pairs or two arrays."""
    s, l = _as_scores_labels(scores, labels)
    n_pos, n_neg = int(l.sum()), int((~l).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError("ROC needs both positive and negative examples")
    order = np.argsort(-s, kind="mergesort")
    s, l = s[order], l[order]
    # last index of each run of equal scores: tied examples cross the threshold together
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(l)[ends]
    fp = np.cumsum(~l)[ends]
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    thresholds = np.r_[s[ends], -np.inf]
    return RocCurve(thresholds, fpr, tpr, positive_label_meaning)


def auc(curve: RocCurve) -> float:
    return float(np.trapezoid(curve.tpr, curve.fpr))


def tpr_at_fpr(curve: RocCurve, q: float) -> float:
    """TPR at FPR=q, linearly interpolated between the bracketing vertices."""
    if not 0 <= q <= 1:
        raise ValueError("q must lie in [0, 1]")
    fpr, tpr = curve.fpr, curve.tpr
    i = int(np.searchsorted(fpr, q, side="right")) - 1  # last vertex with fpr <= q
    if i >= len(fpr) - 1 or fpr[i] == q:
        return float(tpr[i])
    j = i + 1
    return float(tpr[i] + (tpr[j] - tpr[i]) * (q - fpr[i]) / (fpr[j] - fpr[i]))


def eer(curve: RocCurve) -> float:
    """Rate r where FPR = FNR = r, interpolated linearly at the crossing."""
    gap = curve.fpr + curve.tpr - 1.0  # FPR - FNR; nondecreasing from -1 to 1
    j = int(np.argmax(gap >= 0))
    if gap[j] == 0 or j == 0:
        return float(curve.fpr[j])
    i = j - 1
    t = -gap[i] / (gap[j] - gap[i])
    return float(curve.fpr[i] + t * (curve.fpr[j] - curve.fpr[i]))


@dataclass(frozen=True)
class TnrTprCurve:
    """x = TNR over fabricated members (called nonmember), y = TPR over true members."""

    thresholds: np.ndarray
    tnr: np.ndarray
    tpr: np.ndarray


def tnr_tpr_curve(outcome_or_member_scores, fabricated_scores=None) -> TnrTprCurve:
    """Build the curve from an MFA game outcome or from raw (member, fabricated) scores."""
    if fabricated_scores is None:
        outcome = outcome_or_member_scores
        if getattr(outcome, "protocol", None) != "mfa":
            raise ProtocolMismatchError("TNR-TPR curves are defined for MFA game outcomes")
        member_scores, fabricated_scores = outcome.member_scores(), outcome.fabricated_scores()
    else:
        member_scores = outcome_or_member_scores
    m = np.asarray(member_scores, dtype=np.float64)
    f = np.asarray(fabricated_scores, dtype=np.float64)
    roc = roc_curve(np.r_[m, f], np.r_[np.ones(len(m)), np.zeros(len(f))])
    return TnrTprCurve(roc.thresholds, 1.0 - roc.fpr, roc.tpr)


def error_area(curve: TnrTprCurve) -> float:
    """1 - area under the TNR-TPR curve; 0 when the inferer separates both populations perfectly."""
    # tnr decreases along the sweep, so integrate on the reversed arrays
    return float(1.0 - np.trapezoid(curve.tpr[::-1], curve.tnr[::-1]))


def summarize(curve: RocCurve) -> dict:
    return {
        "auc": auc(curve),
        "tpr_at_1pct_fpr": tpr_at_fpr(curve, 0.01),
        "tpr_at_0.1pct_fpr": tpr_at_fpr(curve, 0.001),
        "eer": eer(curve),
    }


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------


def write_curve_csv(curve: RocCurve | TnrTprCurve, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(curve, TnrTprCurve):
        header, xs = ("threshold", "tnr", "tpr"), curve.tnr
    else:
        header, xs = ("threshold", "fpr", "tpr"), curve.fpr
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in zip(curve.thresholds, xs, curve.tpr):
            w.writerow([repr(float(v)) for v in row])
    return path


def plot_curves(curves: dict, path: str | Path, log: bool = False, title: str | None = None) -> Path:
    """Render labelled curves to an image; log axes floor zeros at 1e-4 for display."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    xlabel = "FPR"
    for name, c in curves.items():
        if isinstance(c, TnrTprCurve):
            x, xlabel = c.tnr, "TNR (fabricated)"
        else:
            x = c.fpr
        y = c.tpr
        if log:
            x, y = np.maximum(x, LOG_FLOOR), np.maximum(y, LOG_FLOOR)
        ax.plot(x, y, label=name)
    if log:
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlim(LOG_FLOOR, 1)
        ax.set_ylim(LOG_FLOOR, 1)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("TPR (members)")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path

