"""Filter-bubble and accuracy metrics over recommendation slates."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import category_distribution

SEVERITY_THRESHOLDS = (0.2, 0.4, 0.6, 0.8)
SEVERITY_REFERENCE_CATEGORIES = 10


@dataclass
class RecommendationSlate:
    """Ranked top-k items for one user, with provenance."""

    user: int
    items: np.ndarray
    scores: np.ndarray | None = None
    provenance: dict = field(default_factory=dict)
    truncated: bool = False     # fewer than k candidates were available

    def __post_init__(self):
        self.items = np.asarray(self.items, dtype=np.int64)
        if len(np.unique(self.items)) != len(self.items):
            raise ValueError("slate items must be distinct")


@dataclass
class BubbleReport:
    coverage: float
    iso_index: float
    mcd: float
    severity: int
    window: tuple[int, int] | None = None

    def to_dict(self) -> dict:
        return {
            "coverage": self.coverage,
            "iso_index": self.iso_index,
            "mcd": self.mcd,
            "severity": self.severity,
            "window": list(self.window) if self.window else None,
        }


def coverage(slate_items, item_categories: np.ndarray) -> float:
    """Number of distinct categories with at least one active bit in the slate."""
    items = np.asarray(slate_items, dtype=np.int64)
    if items.size == 0:
        raise ValueError("coverage of an empty slate is undefined")
    return float(np.count_nonzero(item_categories[items].any(axis=0)))


def exposure_counts(slates, n_items: int) -> np.ndarray:
    """Per-item exposure counts over a group's slates."""
    counts = np.zeros(n_items, dtype=np.int64)
    for items in slates:
        counts[np.asarray(items, dtype=np.int64)] += 1
    return counts


def isolation_index(exposure_a: np.ndarray, exposure_b: np.ndarray) -> float:
    """Exposure-segregation between two groups.

    Weighted average item exposure of group a minus that of group b,
    weights a_i / (a_i + b_i); items with no joint exposure are skipped.
    0 means identical exposure, 1 fully disjoint.
    """
    a = np.asarray(exposure_a, dtype=np.float64)
    b = np.asarray(exposure_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("exposure vectors must have the same length")
    a_n, b_n = a.sum(), b.sum()
    if a_n == 0 or b_n == 0:
        raise ValueError("isolation index undefined for a group with no exposure")
    joint = a + b
    active = joint > 0
    share = np.zeros_like(a)
    share[active] = a[active] / joint[active]
    return float(np.sum((a / a_n) * share) - np.sum((b / b_n) * share))


def pairwise_isolation(group_exposures: list[np.ndarray]) -> float:
    """Mean isolation index over all unordered group pairs."""
    if len(group_exposures) < 2:
        raise ValueError("need at least two groups")
    values = [
        isolation_index(group_exposures[i], group_exposures[j])
        for i in range(len(group_exposures))
        for j in range(i + 1, len(group_exposures))
    ]
    return float(math.fsum(values) / len(values))


def majority_category(train_items, item_categories: np.ndarray) -> int:
    """Largest category of a history, ties toward the lowest index."""
    items = np.asarray(train_items, dtype=np.int64)
    if items.size == 0:
        raise ValueError("majority category of an empty history is undefined")
    return int(np.argmax(category_distribution(items, item_categories)))


def mcd(slate_items, train_items, item_categories: np.ndarray) -> float:
    """Fraction of the slate carrying the user's historically largest category."""
    top = majority_category(train_items, item_categories)
    return tcd(slate_items, top, item_categories)


def tcd(slate_items, target_category: int, item_categories: np.ndarray) -> float:
    """Fraction of the slate whose category set contains the target."""
    items = np.asarray(slate_items, dtype=np.int64)
    if items.size == 0:
        return 0.0
    return float(np.mean(item_categories[items, target_category] > 0))


def dis_euc(slate_dist, original_group_dist, target_group_dist) -> float:
    """Distance to the target group's mean minus distance to the original's.

    Lower is better: the user's recommendations sit closer to the target
    group than to their own.
    """
    d = np.asarray(slate_dist, dtype=np.float64)
    g_orig = np.asarray(original_group_dist, dtype=np.float64)
    g_tgt = np.asarray(target_group_dist, dtype=np.float64)
    if not (d.shape == g_orig.shape == g_tgt.shape):
        raise ValueError("distributions must share one dimension")
    return float(np.linalg.norm(d - g_tgt) - np.linalg.norm(d - g_orig))


def recall_at_k(slate_items, test_positives) -> float:
    """|slate ∩ positives| / |positives|."""
    positives = np.asarray(test_positives, dtype=np.int64)
    if positives.size == 0:
        raise ValueError("recall undefined without test positives; skip the user")
    hits = np.intersect1d(np.asarray(slate_items, dtype=np.int64), positives).size
    return hits / positives.size


def ndcg_at_k(slate_items, test_positives) -> float:
    """Binary-gain NDCG with log2 discount; ideal over min(k, #positives)."""
    items = np.asarray(slate_items, dtype=np.int64)
    positives = set(np.asarray(test_positives, dtype=np.int64).tolist())
    if not positives:
        raise ValueError("ndcg undefined without test positives; skip the user")
    if items.size == 0:
        return 0.0
    discounts = 1.0 / np.log2(np.arange(2, len(items) + 2))
    gains = np.asarray([1.0 if i in positives else 0.0 for i in items])
    dcg = float(gains @ discounts)
    n_ideal = min(len(items), len(positives))
    idcg = float(discounts[:n_ideal].sum())
    return dcg / idcg


def w_ndcg_at_k(slate_items, test_positives, target_category: int, item_categories) -> float:
    """NDCG with gains 2 (positive in target category), 1 (other positive), 0.

    The ideal ordering places all gain-2 items before gain-1 items.
    """
    items = np.asarray(slate_items, dtype=np.int64)
    positives = np.asarray(test_positives, dtype=np.int64)
    if positives.size == 0:
        raise ValueError("w-ndcg undefined without test positives; skip the user")
    if items.size == 0:
        return 0.0
    pos_set = set(positives.tolist())
    in_target = item_categories[:, target_category] > 0
    gains = np.asarray(
        [(2.0 if in_target[i] else 1.0) if i in pos_set else 0.0 for i in items]
    )
    discounts = 1.0 / np.log2(np.arange(2, len(items) + 2))
    dcg = float(gains @ discounts)
    n2 = int(np.count_nonzero(in_target[positives]))
    n1 = positives.size - n2
    ideal_gains = np.asarray([2.0] * n2 + [1.0] * n1)[: len(items)]
    idcg = float(ideal_gains @ discounts[: len(ideal_gains)])
    return dcg / idcg


def severity_signals(report: BubbleReport) -> tuple[float, float, float]:
    return (
        1.0 - report.coverage / SEVERITY_REFERENCE_CATEGORIES,
        report.iso_index,
        report.mcd,
    )


def severity(reports: list[BubbleReport]) -> int:
    """Severity level 1..5 from the latest report, +1 for a rising MCD trend.

    Level = position of the mean of the three normalized signals within
    fixed thresholds; the trend bump applies when MCD grew from the
    first to the last window.
    """
    if not reports:
        raise ValueError("severity needs at least one report")
    latest = reports[-1]
    score = math.fsum(severity_signals(latest)) / 3.0
    level = 1 + sum(score > t for t in SEVERITY_THRESHOLDS)
    if len(reports) >= 2 and reports[-1].mcd > reports[0].mcd:
        level = min(level + 1, 5)
    return level


def build_report(
    slate: RecommendationSlate,
    train_items,
    item_categories: np.ndarray,
    iso_index: float = 0.0,
    window: tuple[int, int] | None = None,
) -> BubbleReport:
    """Assemble a per-user report; severity from this single window.

    Degenerate users (no history, or no recommendable items left) get
    zeroed components rather than errors so snapshot precomputation
    cannot fail."""
    report = BubbleReport(
        coverage=coverage(slate.items, item_categories) if len(slate.items) else 0.0,
        iso_index=iso_index,
        mcd=(
            mcd(slate.items, train_items, item_categories)
            if len(np.asarray(train_items)) and len(slate.items) else 0.0
        ),
        severity=0,
        window=window,
    )
    report.severity = severity([report])
    return report


def bias_amplification_report(
    history_dists: np.ndarray,
    slate_dists: np.ndarray,
    group_labels,
) -> dict:
    """Per-group paired category shares in history vs recommendations.

    For each group: mean history distribution, mean recommendation
    distribution, the majority (history) category, and the share delta
    on that category. Positive delta = amplification.
    """
    history_dists = np.asarray(history_dists, dtype=np.float64)
    slate_dists = np.asarray(slate_dists, dtype=np.float64)
    labels = np.asarray(group_labels)
    out = {}
    for group in sorted(set(labels.tolist())):
        rows = labels == group
        hist = history_dists[rows].mean(axis=0)
        rec = slate_dists[rows].mean(axis=0)
        top = int(np.argmax(hist))
        out[group] = {
            "n_users": int(rows.sum()),
            "history": hist.tolist(),
            "recommendation": rec.tolist(),
            "majority_category": top,
            "majority_delta": float(rec[top] - hist[top]),
        }
    return out


def macro_mean(values) -> float:
    """Compensated mean so aggregation order cannot perturb results."""
    values = list(values)
    if not values:
        return float("nan")
    return math.fsum(values) / len(values)
