"""Image-level evaluation: AUROC, AP, chi-square histogram distance, Welch's t-test."""

import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

from .exceptions import (
    DegenerateLabels,
    DegenerateRange,
    DegenerateVariance,
    EmptySelection,
    MissingSidecar,
    ShapeMismatch,
)


def _scored(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ShapeMismatch(f"scores and labels must be equal-length vectors, got {scores.shape}, {labels.shape}")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return scores, labels.astype(np.int64)


def auroc(scores, labels):
    """Mann-Whitney AUC; a tied positive/negative pair counts one half."""
    scores, labels = _scored(scores, labels)
    pos, neg = scores[labels == 1], np.sort(scores[labels == 0])
    if len(pos) == 0 or len(neg) == 0:
        raise DegenerateLabels("AUROC needs at least one positive and one negative")
    below = np.searchsorted(neg, pos, side="left")
    at_or_below = np.searchsorted(neg, pos, side="right")
    twice_u = int((below + at_or_below).sum())  # 2*(#greater) + #ties, exact
    return twice_u / (2 * len(pos) * len(neg))


def average_precision(scores, labels):
    """Mean of precision@rank over the positives' ranks (no interpolation).

    Sorting is by descending score; ties keep their original order.
    """
    scores, labels = _scored(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise DegenerateLabels("average precision needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    ranks = np.flatnonzero(hits) + 1
    # summed exactly, then rounded once
    total = sum(Fraction(i, int(r)) for i, r in enumerate(ranks, start=1))
    return float(total / n_pos)


def roc_points(scores, labels):
    """``(fpr, tpr, thresholds)`` at every distinct score, highest first."""
    scores, labels = _scored(scores, labels)
    n_pos, n_neg = int(labels.sum()), int((1 - labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels("ROC needs both classes")
    thresholds = np.unique(scores)[::-1]
    tpr = np.array([((scores >= t) & (labels == 1)).sum() / n_pos for t in thresholds])
    fpr = np.array([((scores >= t) & (labels == 0)).sum() / n_neg for t in thresholds])
    return np.concatenate([[0.0], fpr]), np.concatenate([[0.0], tpr]), np.concatenate([[np.inf], thresholds])


def chi2_distance(scores_neg, scores_pos, bins=30):
    """sum_i (a_i - b_i)^2 / (a_i + b_i) over unit-mass histograms on a shared range."""
    a_raw = np.asarray(scores_neg, dtype=np.float64)
    b_raw = np.asarray(scores_pos, dtype=np.float64)
    if a_raw.size == 0 or b_raw.size == 0:
        raise ValueError("chi2_distance needs two non-empty samples")
    lo = min(a_raw.min(), b_raw.min())
    hi = max(a_raw.max(), b_raw.max())
    if hi <= lo:
        raise DegenerateRange("all scores are equal; histogram range is empty")
    a = np.histogram(a_raw, bins=bins, range=(lo, hi))[0] / a_raw.size
    b = np.histogram(b_raw, bins=bins, range=(lo, hi))[0] / b_raw.size
    return chi2_from_histograms(a, b)


def chi2_from_histograms(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    total = a + b
    nz = total > 0
    return float((((a - b) ** 2)[nz] / total[nz]).sum())


# Welch's t-test

def _betacf(a, b, x, tol=1e-12, max_iter=10000):
    """Continued fraction for the regularized incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc_regularized(a, b, x):
    """I_x(a, b) for a, b > 0 and 0 <= x <= 1."""
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must lie in [0, 1], got {x}")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_two_sided_p(t, df):
    return betainc_regularized(df / 2.0, 0.5, df / (df + t * t))


def significance_tag(p):
    """Bracket notation: ``ns`` above 0.05, ``**`` in (0.01, 0.05], ``***`` at or below 0.01."""
    if p > 0.05:
        return "ns"
    if p > 0.01:
        return "**"
    return "***"


@dataclass(frozen=True)
class WelchResult:
    t: float
    df: float
    p: float
    tag: str


def welch_ttest(sample_a, sample_b):
    """Two-sided Welch t-test for unequal variances."""
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("each sample needs at least two observations")
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    se2 = va + vb
    if se2 <= 0.0:
        raise DegenerateVariance("both samples have zero variance")
    t = float((a.mean() - b.mean()) / math.sqrt(se2))
    df = float(se2 ** 2 / (va ** 2 / (a.size - 1) + vb ** 2 / (b.size - 1)))
    p = min(1.0, max(0.0, student_t_two_sided_p(t, df)))
    return WelchResult(t=t, df=df, p=p, tag=significance_tag(p))


def purity(selected, hidden_labels, target_label=1):
    """Fraction of ``selected`` indices whose hidden label equals ``target_label``."""
    if hidden_labels is None:
        raise MissingSidecar("hidden labels are unavailable; cannot audit pseudo-labels")
    selected = np.asarray(selected, dtype=np.intp)
    if selected.size == 0:
        raise EmptySelection("cannot compute purity of an empty selection")
    return float(np.mean(np.asarray(hidden_labels)[selected] == target_label))


# reports

def mean_halfwidth(values):
    """``(mean, 1.96 * std)`` with the sample (ddof=1) standard deviation."""
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        return float(values.mean()), 0.0
    return float(values.mean()), float(1.96 * values.std(ddof=1))


@dataclass
class MetricsReport:
    auc: float
    ap: float
    n_pos: int
    n_neg: int
    chi2: float = None
    replicates: dict = field(default_factory=dict)

    def to_dict(self):
        return {k: v for k, v in asdict(self).items() if v is not None and v != {}}


def evaluate(scores, labels, bins=30):
    scores, labels = _scored(scores, labels)
    try:
        chi2 = chi2_distance(scores[labels == 0], scores[labels == 1], bins)
    except DegenerateRange:
        chi2 = 0.0
    return MetricsReport(
        auc=auroc(scores, labels),
        ap=average_precision(scores, labels),
        n_pos=int(labels.sum()),
        n_neg=int((labels == 0).sum()),
        chi2=chi2,
    )
