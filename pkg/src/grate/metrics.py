"""Prediction metrics."""
from __future__ import annotations

import math
from typing import Iterable

import numpy as np
from scipy.stats import rankdata


class UndefinedMetricError(ValueError):
    pass


def rmse(pairs: Iterable[tuple[float, float]]) -> float:
    arr = np.asarray(list(pairs), dtype=float)
    if arr.size == 0:
        raise UndefinedMetricError("rmse of an empty list")
    return math.sqrt(float(np.mean((arr[:, 0] - arr[:, 1]) ** 2)))


def auc(pairs: Iterable[tuple[float, float]]) -> float:
    """Mann-Whitney AUC with ties counted as one half.

    Average ranks make this exact: it equals the all-pairs count of
    ``score_pos > score_neg`` plus half the ties, over ``n_pos * n_neg``.
    """
    arr = np.asarray(list(pairs), dtype=float)
    if arr.size == 0:
        raise UndefinedMetricError("auc of an empty list")
    scores, labels = arr[:, 0], arr[:, 1]
    pos = labels >= 0.5
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("auc needs both classes")
    ranks = rankdata(scores)
    # rank sums are multiples of 0.5, exact in float64 for any realistic n
    u = float(ranks[pos].sum()) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)
