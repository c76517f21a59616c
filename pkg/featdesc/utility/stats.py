import logging
import math
from typing import Optional, Sequence

import numpy as np
from scipy.stats import bootstrap

logger = logging.getLogger(__name__)

Z_95 = 1.96


def normal_ci(passed: int, n: int, z: float = Z_95) -> tuple[float, float]:
    """p +- z * sqrt(p(1-p)/n), clipped to [0, 1]."""
    if n <= 0:
        return 0.0, 0.0
    p = passed / n
    half = z * math.sqrt(p * (1.0 - p) / n)
    return max(0.0, p - half), min(1.0, p + half)


def bootstrap_ci(
    values: Sequence[float],
    n_resamples: int = 9999,
    confidence: float = 0.95,
    seed: int = 0,
) -> tuple[Optional[float], Optional[float]]:
    """Percentile bootstrap CI of the mean; None when fewer than two values."""
    data = np.asarray(values, dtype=np.float64)
    if data.size < 2:
        return None, None
    if np.all(data == data[0]):
        return float(data[0]), float(data[0])
    result = bootstrap(
        (data,),
        np.mean,
        n_resamples=n_resamples,
        confidence_level=confidence,
        method="percentile",
        rng=np.random.default_rng(seed),
    )
    return float(result.confidence_interval.low), float(result.confidence_interval.high)
