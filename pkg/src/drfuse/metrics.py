"""PRAUC (average precision), macro averaging and bootstrap intervals."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import InvalidInputError, UndefinedMetricError

log = logging.getLogger(__name__)


def prauc(scores, labels) -> float:
    """Average precision: mean precision at the rank of each positive.

    Samples are ranked by descending score; ties keep their input order.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise InvalidInputError("scores and labels differ in length")
    n_pos = int((labels == 1).sum())
    if n_pos == 0:
        raise UndefinedMetricError("no positive labels")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order] == 1
    precision = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return math.fsum(precision[hits]) / n_pos


@dataclass
class MacroResult:
    macro: float
    per_class: np.ndarray  # NaN for skipped classes
    n_skipped: int


def macro_prauc(scores, labels, warn: bool = True) -> MacroResult:
    """Unweighted mean of per-class PRAUC over classes with at least one positive."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim == 1:
        scores, labels = scores[:, None], labels[:, None]
    if scores.shape != labels.shape:
        raise InvalidInputError(f"shape mismatch {scores.shape} vs {labels.shape}")
    per_class = np.full(scores.shape[1], np.nan)
    for c in range(scores.shape[1]):
        if (labels[:, c] == 1).any():
            per_class[c] = prauc(scores[:, c], labels[:, c])
    skipped = int(np.isnan(per_class).sum())
    if skipped and warn:
        log.warning("%d class(es) without positives excluded from macro PRAUC", skipped)
    macro = float(np.nanmean(per_class)) if skipped < len(per_class) else math.nan
    return MacroResult(macro, per_class, skipped)


def macro_prauc_value(scores, labels) -> float:
    return macro_prauc(scores, labels, warn=False).macro


def bootstrap_ci(
    scores,
    labels,
    metric: Callable[[np.ndarray, np.ndarray], float] = macro_prauc_value,
    n_iter: int = 1000,
    level: float = 0.95,
    seed: int = 0,
) -> tuple[float, float]:
    """Percentile bootstrap interval over resampled test samples.

    Each iteration draws from its own generator spawned off ``seed``, so
    the interval does not depend on evaluation order.  Iterations whose
    metric is undefined (NaN) are dropped.
    """
    scores, labels = np.asarray(scores), np.asarray(labels)
    n = len(scores)
    if n == 0:
        raise InvalidInputError("empty test set")
    values = []
    for child in np.random.SeedSequence(seed).spawn(n_iter):
        idx = np.random.default_rng(child).integers(0, n, size=n)
        try:
            v = metric(scores[idx], labels[idx])
        except UndefinedMetricError:
            continue
        if not math.isnan(v):
            values.append(v)
    if not values:
        raise UndefinedMetricError("metric undefined in every bootstrap resample")
    tail = (1 - level) / 2 * 100
    lo, hi = np.percentile(values, [tail, 100 - tail])
    return float(lo), float(hi)
