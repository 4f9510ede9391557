"""Evaluation metrics for 2-D experiments."""

from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment

from .objectives import ObstacleField, obstacle_integrand


def wasserstein2(a, b, max_points: int = 2000, seed: int = 0) -> float:
    """Exact empirical 2-Wasserstein distance between equal-size point sets.

    Computed with an optimal assignment on squared Euclidean costs; sets
    larger than max_points are subsampled (without replacement) first.
    """
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    rng = np.random.default_rng(seed)
    m = min(len(a), len(b), max_points)
    if len(a) > m:
        a = a[rng.choice(len(a), m, replace=False)]
    if len(b) > m:
        b = b[rng.choice(len(b), m, replace=False)]
    cost = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=2)
    rows, cols = linear_sum_assignment(cost)
    return float(np.sqrt(cost[rows, cols].mean()))


def region_fraction(points, field: ObstacleField) -> float:
    """Fraction of points inside the obstacle's truncation region
    (mixture density >= tau)."""
    points = np.asarray(points, dtype=float).reshape(-1, points.shape[-1])
    pen = np.asarray(obstacle_integrand(field, points))
    return float(np.mean(pen > 0.0))
