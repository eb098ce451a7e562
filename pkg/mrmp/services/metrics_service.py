"""
Metrics Service
다중 레이블 평가 지표 (ACC, ebF1, miF1, maF1), 레이블별 AUC, 검증셋 임계값 탐색
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from mrmp.errors import ShapeError
from mrmp.models.schemas import METRIC_NAMES, MetricsReport

logger = logging.getLogger(__name__)

DEFAULT_GRID: tuple[float, ...] = tuple(round(0.05 * k, 2) for k in range(1, 20))


@dataclass(frozen=True)
class ConfusionCounts:
    """Per-label confusion matrix entries over M instances"""

    tp: np.ndarray
    fp: np.ndarray
    tn: np.ndarray
    fn: np.ndarray


def _check_pair(Y: np.ndarray, other: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    Y = np.asarray(Y)
    other = np.asarray(other)
    if Y.shape != other.shape or Y.ndim != 2:
        raise ShapeError(f"label matrices must be equal M x L, got {Y.shape} and {other.shape}")
    return Y, other


def binarize(scores: np.ndarray, threshold: float) -> np.ndarray:
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    return (np.asarray(scores) > threshold).astype(np.uint8)


def confusion_counts(Y: np.ndarray, Y_hat: np.ndarray) -> ConfusionCounts:
    Y, Y_hat = _check_pair(Y, Y_hat)
    y = Y.astype(bool)
    p = Y_hat.astype(bool)
    return ConfusionCounts(
        tp=(y & p).sum(axis=0),
        fp=(~y & p).sum(axis=0),
        tn=(~y & ~p).sum(axis=0),
        fn=(y & ~p).sum(axis=0),
    )


def evaluate(Y: np.ndarray, Y_hat: np.ndarray) -> dict[str, float]:
    """ACC (subset accuracy), ebF1, miF1, maF1; empty denominators score 1"""
    Y, Y_hat = _check_pair(Y, Y_hat)
    if Y.shape[0] == 0:
        raise ShapeError("cannot evaluate an empty set")
    y = Y.astype(np.int64)
    p = Y_hat.astype(np.int64)

    acc = float(np.mean(np.all(y == p, axis=1)))

    overlap = (y * p).sum(axis=1)
    sizes = y.sum(axis=1) + p.sum(axis=1)
    eb_terms = np.divide(2 * overlap, sizes, out=np.ones(len(sizes)), where=sizes > 0)

    counts = confusion_counts(Y, Y_hat)
    label_denoms = 2 * counts.tp + counts.fp + counts.fn
    ma_terms = np.divide(2 * counts.tp, label_denoms, out=np.ones(len(label_denoms)), where=label_denoms > 0)
    pooled = int(label_denoms.sum())
    mif1 = 2 * int(counts.tp.sum()) / pooled if pooled else 1.0

    return {
        "acc": acc,
        "ebf1": float(eb_terms.mean()),
        "mif1": float(mif1),
        "maf1": float(ma_terms.mean()),
    }


def auc_per_label(Y: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Mann-Whitney AUC per label (ties count 1/2); NaN where a label has one class only"""
    Y, scores = _check_pair(Y, scores)
    result = np.full(Y.shape[1], np.nan)
    for j in range(Y.shape[1]):
        positive = Y[:, j].astype(bool)
        n_pos = int(positive.sum())
        n_neg = len(positive) - n_pos
        if n_pos == 0 or n_neg == 0:
            continue
        ranks = rankdata(scores[:, j])
        result[j] = (ranks[positive].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg)
    return result


def tune_threshold(
    Y_val: np.ndarray,
    scores_val: np.ndarray,
    metric: str = "ebf1",
    grid: Optional[Sequence[float]] = None,
) -> tuple[float, float]:
    """Grid search for the global threshold maximizing `metric`; ties go to the point closest to 0.5"""
    if metric not in METRIC_NAMES:
        raise ValueError(f"unknown metric '{metric}', expected one of {METRIC_NAMES}")
    Y_val, scores_val = _check_pair(Y_val, scores_val)
    if Y_val.shape[0] == 0:
        raise ShapeError("threshold tuning needs a non-empty validation set")

    best: Optional[tuple[float, float]] = None
    for t in grid or DEFAULT_GRID:
        value = evaluate(Y_val, binarize(scores_val, t))[metric]
        if best is None or value > best[1] or (value == best[1] and abs(t - 0.5) < abs(best[0] - 0.5)):
            best = (float(t), value)
    return best


def tune_thresholds(Y_val, scores_val, grid: Optional[Sequence[float]] = None) -> dict[str, float]:
    return {name: tune_threshold(Y_val, scores_val, name, grid)[0] for name in METRIC_NAMES}


def metrics_report(Y: np.ndarray, scores: np.ndarray, thresholds: Mapping[str, float]) -> MetricsReport:
    """Each metric at its own tuned threshold, plus per-label AUC"""
    values = {name: evaluate(Y, binarize(scores, thresholds.get(name, 0.5)))[name] for name in METRIC_NAMES}
    auc = auc_per_label(Y, scores)
    undefined = int(np.isnan(auc).sum())
    if undefined:
        logger.warning("AUC undefined for %d labels with a single class", undefined)
    return MetricsReport(
        **values,
        auc=[None if np.isnan(a) else float(a) for a in auc],
        thresholds={name: thresholds.get(name, 0.5) for name in METRIC_NAMES},
    )


def write_metrics_csv(report: MetricsReport, path: Path) -> Path:
    """metric,value,threshold rows, then auc_<j> rows (empty value when undefined)"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["metric", "value", "threshold"])
        for name in METRIC_NAMES:
            writer.writerow([name, f"{getattr(report, name):.6f}", f"{report.thresholds[name]:.2f}"])
        for j, value in enumerate(report.auc):
            writer.writerow([f"auc_{j}", "" if value is None else f"{value:.6f}", ""])
    return path


def write_label_auc_csv(
    auc: Iterable[float],
    degree_plus: Sequence[int],
    degree_minus: Sequence[int],
    path: Path,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["label", "auc", "degree_plus", "degree_minus"])
        for j, value in enumerate(auc):
            writer.writerow([j, "" if np.isnan(value) else f"{value:.6f}", int(degree_plus[j]), int(degree_minus[j])])
    return path
