"""Grade-threshold fitting and classification metrics.

The scorer emits a single probability per sample; two thresholds fitted on
validation data carve it into the three relevance grades.  Metrics are
macro-averaged over grades so the rare middle grade counts as much as the
dominant ones.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import RelevanceGrade
from .errors import ConfigError, DataFormatError, DimensionMismatchError
from .util import order_stat_quantile

GRID_PERCENTILES = tuple(range(1, 100))
DEGENERATE_THRESHOLDS = (1.0 / 3.0, 2.0 / 3.0)


@dataclass(frozen=True)
class GradeThresholds:
    """Two cut points splitting a score in [0, 1] into three grades.

    score < t_wr is irrelevant, t_wr <= score < t_sr is weak relevance,
    score >= t_sr is strong relevance.
    """

    t_wr: float
    t_sr: float

    def __post_init__(self) -> None:
        if not (0.0 < self.t_wr < self.t_sr < 1.0):
            raise ConfigError(
                "thresholds", f"need 0 < t_wr < t_sr < 1, got "
                f"({self.t_wr}, {self.t_sr})"
            )

    def predict(self, scores: np.ndarray) -> np.ndarray:
        s = np.asarray(scores, dtype=np.float64)
        grades = np.full(s.shape, RelevanceGrade.WR.value, dtype=np.int8)
        grades[s < self.t_wr] = RelevanceGrade.IR.value
        grades[s >= self.t_sr] = RelevanceGrade.SR.value
        return grades


def _check_pair(scores, grades) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    g = np.asarray(grades).ravel()
    if s.shape != g.shape:
        raise DimensionMismatchError(
            f"{s.size} scores vs {g.size} grades"
        )
    if s.size == 0:
        raise DataFormatError("empty score array")
    if g.size and (g.min() < 0 or g.max() > 2):
        raise DataFormatError("grade outside the three-grade range")
    return s, g.astype(np.int8)


def _macro_f1_from_counts(pred_counts: np.ndarray, true_counts: np.ndarray,
                          tp: np.ndarray) -> float:
    """Macro F1 given per-grade predicted totals, true totals, and matches."""
    denom = pred_counts + true_counts
    f1 = np.where(denom > 0, 2.0 * tp / np.maximum(denom, 1), 0.0)
    return float(f1.mean())


def fit_grade_thresholds(
    val_scores, val_grades
) -> GradeThresholds:
    """Exhaustive percentile-grid search maximizing validation macro F1.

    Candidates are the 1..99 percentile order statistics of the validation
    scores; every ordered pair is scored and the best macro F1 wins, with
    ties resolved toward the wider middle band.  Identical scores carry no
    signal and fall back to (1/3, 2/3) with a warning.
    """
    scores, grades = _check_pair(val_scores, val_grades)
    present = set(int(g) for g in np.unique(grades))
    if present != {0, 1, 2}:
        missing = [RelevanceGrade(v).name for v in sorted({0, 1, 2} - present)]
        raise DataFormatError(
            f"threshold fitting needs all three grades; missing {missing}"
        )
    if float(scores.max() - scores.min()) == 0.0:
        warnings.warn(
            "all validation scores identical; using default grade thresholds",
            stacklevel=2,
        )
        return GradeThresholds(*DEGENERATE_THRESHOLDS)

    candidates = sorted(
        {order_stat_quantile(scores, p / 100.0) for p in GRID_PERCENTILES}
    )
    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    sorted_grades = grades[order]
    n = scores.size
    true_counts = np.array(
        [np.count_nonzero(grades == v) for v in range(3)], dtype=np.int64
    )
    # below[c, g] = number of grade-g samples with score < candidate c
    positions = np.searchsorted(sorted_scores, candidates, side="left")
    cum = np.zeros((n + 1, 3), dtype=np.int64)
    for v in range(3):
        cum[1:, v] = np.cumsum(sorted_grades == v)
    below = cum[positions]

    best_key = None
    best_pair = None
    for i in range(len(candidates)):
        for j in range(i + 1, len(candidates)):
            t_wr, t_sr = candidates[i], candidates[j]
            low, mid = below[i], below[j]
            pred_ir = low
            pred_wr = mid - low
            pred_sr = true_counts - mid
            tp = np.array([pred_ir[0], pred_wr[1], pred_sr[2]], dtype=np.int64)
            pred_totals = np.array(
                [pred_ir.sum(), pred_wr.sum(), pred_sr.sum()], dtype=np.int64
            )
            f1 = _macro_f1_from_counts(pred_totals, true_counts, tp)
            key = (f1, t_sr - t_wr, -t_wr)
            if best_key is None or key > best_key:
                best_key = key
                best_pair = (t_wr, t_sr)
    if best_pair is None:
        warnings.warn(
            "score spread too small for a threshold grid; using defaults",
            stacklevel=2,
        )
        return GradeThresholds(*DEGENERATE_THRESHOLDS)
    return GradeThresholds(*best_pair)


@dataclass(frozen=True)
class GradeScores:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass(frozen=True)
class Metrics:
    """Classification quality over the three grades."""

    macro_f1: float
    accuracy: float
    per_grade: dict[RelevanceGrade, GradeScores]
    n: int


def compute_metrics(scores, grades, thresholds: GradeThresholds) -> Metrics:
    """Threshold the scores and compare predicted grades to the labels."""
    s, g = _check_pair(scores, grades)
    pred = thresholds.predict(s)
    acc = float(np.mean(pred == g))
    per_grade: dict[RelevanceGrade, GradeScores] = {}
    f1s = []
    for grade in RelevanceGrade:
        v = grade.value
        tp = int(np.count_nonzero((pred == v) & (g == v)))
        n_pred = int(np.count_nonzero(pred == v))
        n_true = int(np.count_nonzero(g == v))
        precision = tp / n_pred if n_pred else 0.0
        recall = tp / n_true if n_true else 0.0
        f1 = (
            2.0 * precision * recall / (precision + recall)
            if precision + recall > 0
            else 0.0
        )
        per_grade[grade] = GradeScores(
            precision=precision, recall=recall, f1=f1, support=n_true
        )
        f1s.append(f1)
    return Metrics(
        macro_f1=float(np.mean(f1s)),
        accuracy=acc,
        per_grade=per_grade,
        n=int(s.size),
    )


@dataclass(frozen=True)
class HistogramReport:
    """Per-grade normalized score histograms over [0, 1]."""

    bin_edges: np.ndarray
    by_grade: dict[RelevanceGrade, np.ndarray]
    overlap_wr_sr: float


def score_histogram(scores, grades, bins: int = 40) -> HistogramReport:
    """Normalized per-grade histograms plus the WR/SR overlap statistic.

    Each grade's histogram sums to 1 over the bins (zeros when the grade is
    absent); the overlap is the summed bin-wise minimum of the WR and SR
    histograms, 1.0 for identical score multisets and 0.0 for disjoint
    supports.
    """
    if bins < 2:
        raise ConfigError("bins", "needs at least 2 bins")
    s, g = _check_pair(scores, grades)
    edges = np.linspace(0.0, 1.0, bins + 1)
    by_grade: dict[RelevanceGrade, np.ndarray] = {}
    for grade in RelevanceGrade:
        values = np.clip(s[g == grade.value], 0.0, 1.0)
        counts, _ = np.histogram(values, bins=edges)
        total = counts.sum()
        by_grade[grade] = (
            counts / total if total else np.zeros(bins, dtype=np.float64)
        )
    overlap = float(
        np.minimum(by_grade[RelevanceGrade.WR], by_grade[RelevanceGrade.SR]).sum()
    )
    return HistogramReport(bin_edges=edges, by_grade=by_grade,
                           overlap_wr_sr=overlap)


def wr_mid_fraction(scores, grades, low: float = 0.5, high: float = 0.95) -> float:
    """Fraction of weak-relevance scores strictly inside (low, high)."""
    s, g = _check_pair(scores, grades)
    wr = s[g == RelevanceGrade.WR.value]
    if wr.size == 0:
        return 0.0
    return float(np.mean((wr > low) & (wr < high)))


def write_histogram(report: HistogramReport, path) -> None:
    lines = ["# bin_left\tbin_right\th_SR\th_WR\th_IR"]
    h_sr = report.by_grade[RelevanceGrade.SR]
    h_wr = report.by_grade[RelevanceGrade.WR]
    h_ir = report.by_grade[RelevanceGrade.IR]
    for i in range(len(h_sr)):
        lines.append(
            f"{report.bin_edges[i]:.6g}\t{report.bin_edges[i + 1]:.6g}\t"
            f"{h_sr[i]:.6g}\t{h_wr[i]:.6g}\t{h_ir[i]:.6g}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
