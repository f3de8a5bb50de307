"""Discrimination, calibration, stability and group-fairness metrics.

Ranking metrics handle ties explicitly: AUC-ROC is the Mann-Whitney statistic
with half credit for ties, AUC-PR is step-wise average precision evaluated at
distinct score thresholds (so a constant score yields exactly the positive
prevalence). Decisions for rate-based metrics are ``score >= delta``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import UndefinedMetricError


def _as_arrays(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be aligned 1-D sequences")
    return s, y


def _class_counts(y) -> tuple:
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    return n_pos, n_neg


def auc_roc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 P(tie)."""
    s, y = _as_arrays(scores, labels)
    n_pos, n_neg = _class_counts(y)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("auc_roc needs both classes present")
    order = np.argsort(s, kind="mergesort")
    s_sorted = s[order]
    uniq, first_idx, counts = np.unique(s_sorted, return_index=True, return_counts=True)
    group_mid_rank = first_idx + (counts + 1) / 2.0  # 1-based average rank per tie group
    ranks = np.empty(len(s), dtype=np.float64)
    ranks[order] = group_mid_rank[np.searchsorted(uniq, s_sorted)]
    u = float(np.sum(ranks[y == 1])) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def _descending_blocks(s, y):
    """Sort descending (stable) and return cumulative tp / total at each distinct score."""
    order = np.argsort(-s, kind="mergesort")
    s_d = s[order]
    y_d = y[order]
    tp = np.cumsum(y_d == 1)
    block_end = np.nonzero(np.append(s_d[1:] != s_d[:-1], True))[0]
    return s_d[block_end], tp[block_end].astype(np.float64), (block_end + 1).astype(np.float64)


def auc_pr(scores, labels) -> float:
    """Step-wise average precision over distinct score thresholds."""
    s, y = _as_arrays(scores, labels)
    n_pos, _ = _class_counts(y)
    if n_pos == 0:
        raise UndefinedMetricError("auc_pr needs at least one positive")
    _, tp, k = _descending_blocks(s, y)
    precision = tp / k
    recall = tp / n_pos
    recall_prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - recall_prev) * precision))


def recall_at_fpr(scores, labels, target_fpr: float = 0.01) -> float:
    """TPR at the most permissive threshold keeping FPR <= target_fpr.

    Decisions are score >= threshold; the admissible false-positive count is
    floor(target_fpr * n_neg), which is 0 when negatives are scarce.
    """
    s, y = _as_arrays(scores, labels)
    n_pos, n_neg = _class_counts(y)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("recall_at_fpr needs both classes present")
    allowed_fp = int(np.floor(target_fpr * n_neg + 1e-12))
    _, tp, k = _descending_blocks(s, y)
    fp = k - tp
    n_valid = int(np.sum(fp <= allowed_fp))  # fp is non-decreasing over blocks
    if n_valid == 0:
        return 0.0
    return float(tp[n_valid - 1] / n_pos)


def brier(scores, labels) -> float:
    """Mean squared error between score and binary outcome."""
    s, y = _as_arrays(scores, labels)
    if len(s) == 0:
        raise UndefinedMetricError("brier needs at least one row")
    return float(np.mean((s - y.astype(np.float64)) ** 2))


def _bin_index(s: np.ndarray, n_bins: int) -> np.ndarray:
    clipped = np.clip(s, 0.0, 1.0)
    idx = np.floor(clipped * n_bins).astype(np.int64)
    return np.minimum(idx, n_bins - 1)  # right-closed last bin


def ece(scores, labels, n_bins: int = 15) -> float:
    """Expected calibration error over equal-width bins on [0, 1]."""
    s, y = _as_arrays(scores, labels)
    n = len(s)
    if n == 0:
        raise UndefinedMetricError("ece needs at least one row")
    idx = _bin_index(s, n_bins)
    total = 0.0
    for b in range(n_bins):
        in_bin = idx == b
        n_b = int(np.sum(in_bin))
        if n_b == 0:
            continue
        conf = float(np.mean(s[in_bin]))
        acc = float(np.mean(y[in_bin] == 1))
        total += (n_b / n) * abs(acc - conf)
    return total


def reliability_table(scores, labels, n_bins: int = 15) -> list:
    """Per-bin (lo, hi, count, mean_score, frac_positive) rows for plotting."""
    s, y = _as_arrays(scores, labels)
    idx = _bin_index(s, n_bins)
    rows = []
    for b in range(n_bins):
        in_bin = idx == b
        n_b = int(np.sum(in_bin))
        lo, hi = b / n_bins, (b + 1) / n_bins
        if n_b == 0:
            rows.append((lo, hi, 0, None, None))
        else:
            rows.append((lo, hi, n_b, float(np.mean(s[in_bin])), float(np.mean(y[in_bin] == 1))))
    return rows


def nll(scores, labels, eps: float = 1e-6) -> float:
    """Mean negative log-likelihood of clamped probability scores."""
    s, y = _as_arrays(scores, labels)
    s = np.clip(s, eps, 1.0 - eps)
    y = y.astype(np.float64)
    return float(-np.mean(y * np.log(s) + (1.0 - y) * np.log(1.0 - s)))


@dataclass
class MetricBundle:
    """Headline metrics for one model variant on one partition."""

    auc_roc: float
    auc_pr: float
    recall_at_fpr: float
    brier: float
    ece: float
    n_pos: int
    n_neg: int

    def to_json_dict(self) -> dict:
        return {
            "auc_roc": self.auc_roc,
            "auc_pr": self.auc_pr,
            "recall_at_fpr": self.recall_at_fpr,
            "brier": self.brier,
            "ece": self.ece,
            "n_pos": self.n_pos,
            "n_neg": self.n_neg,
        }


def compute_bundle(scores, labels, target_fpr: float = 0.01, ece_bins: int = 15) -> MetricBundle:
    s, y = _as_arrays(scores, labels)
    n_pos, n_neg = _class_counts(y)
    return MetricBundle(
        auc_roc=auc_roc(s, y),
        auc_pr=auc_pr(s, y),
        recall_at_fpr=recall_at_fpr(s, y, target_fpr),
        brier=brier(s, y),
        ece=ece(s, y, ece_bins),
        n_pos=n_pos,
        n_neg=n_neg,
    )


@dataclass
class FairnessGaps:
    """Max-minus-min group rates at a fixed decision threshold."""

    dp_gap: float
    eo_gap: float
    tpr_gap: float
    fpr_gap: float
    delta: float
    per_group_rates: dict

    def to_json_dict(self) -> dict:
        return {
            "dp_gap": self.dp_gap,
            "eo_gap": self.eo_gap,
            "tpr_gap": self.tpr_gap,
            "fpr_gap": self.fpr_gap,
            "delta": self.delta,
            "per_group_rates": {str(g): dict(r) for g, r in self.per_group_rates.items()},
        }


def _gap(values: list) -> float:
    defined = [v for v in values if v is not None]
    if len(defined) < 2:
        return 0.0
    return max(defined) - min(defined)


def fairness_gaps(scores, labels, groups: Sequence, delta: float = 0.5) -> FairnessGaps:
    """Demographic-parity, TPR, FPR and equalized-odds gaps across groups.

    A group with no members under a rate's condition is skipped for that rate.
    """
    s, y = _as_arrays(scores, labels)
    groups = list(groups)
    if len(groups) != len(s):
        raise ValueError("groups must align with scores")
    decisions = s >= delta
    rates = {}
    for g in sorted(set(groups), key=str):
        in_g = np.array([gi == g for gi in groups])
        pos_rate = float(np.mean(decisions[in_g]))
        cond_pos = in_g & (y == 1)
        cond_neg = in_g & (y == 0)
        tpr = float(np.mean(decisions[cond_pos])) if np.any(cond_pos) else None
        fpr = float(np.mean(decisions[cond_neg])) if np.any(cond_neg) else None
        rates[g] = {"positive_rate": pos_rate, "tpr": tpr, "fpr": fpr}
    tpr_gap = _gap([r["tpr"] for r in rates.values()])
    fpr_gap = _gap([r["fpr"] for r in rates.values()])
    return FairnessGaps(
        dp_gap=_gap([r["positive_rate"] for r in rates.values()]),
        eo_gap=max(tpr_gap, fpr_gap),
        tpr_gap=tpr_gap,
        fpr_gap=fpr_gap,
        delta=delta,
        per_group_rates=rates,
    )


@dataclass
class StabilityReport:
    """Early vs late AUC-PR on the test weeks plus the per-week series."""

    early_auc_pr: float
    late_auc_pr: float
    drop: float
    week_series: list  # (week, auc_pr) for weeks with at least one positive
    omitted_weeks: list  # weeks skipped for lack of positives

    def to_json_dict(self) -> dict:
        return {
            "early_auc_pr": self.early_auc_pr,
            "late_auc_pr": self.late_auc_pr,
            "drop": self.drop,
            "week_series": [[int(w), ap] for w, ap in self.week_series],
            "omitted_weeks": [int(w) for w in self.omitted_weeks],
        }


def stability_report(scores, labels, weeks, split_week: int) -> StabilityReport:
    """AUC-PR drop from the early period (week <= split_week) to the late one."""
    s, y = _as_arrays(scores, labels)
    w = np.asarray(weeks)
    early = w <= split_week
    late = ~early
    for name, m in (("early", early), ("late", late)):
        if not np.any(m) or int(np.sum(y[m] == 1)) == 0:
            raise UndefinedMetricError(f"stability_report: {name} period has no positives")
    early_ap = auc_pr(s[early], y[early])
    late_ap = auc_pr(s[late], y[late])
    series, omitted = [], []
    for wk in sorted(set(int(x) for x in w)):
        in_wk = w == wk
        if int(np.sum(y[in_wk] == 1)) == 0:
            omitted.append(wk)
            continue
        series.append((wk, auc_pr(s[in_wk], y[in_wk])))
    return StabilityReport(
        early_auc_pr=early_ap,
        late_auc_pr=late_ap,
        drop=early_ap - late_ap,
        week_series=series,
        omitted_weeks=omitted,
    )
