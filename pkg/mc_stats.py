"""Monte Carlo summary statistics shared by the simulation and verification modules"""

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy.stats import norm


@dataclass(frozen=True)
class Estimate:
    """Sample mean with its standard error"""
    mean: float
    stderr: float
    count: int

    def ci(self, alpha: float = 0.05) -> Tuple[float, float]:
        z = float(norm.ppf(1 - alpha / 2))
        return self.mean - z * self.stderr, self.mean + z * self.stderr

    def to_dict(self) -> dict:
        lower, upper = self.ci()
        return {
            "mean": self.mean,
            "stderr": self.stderr,
            "count": self.count,
            "ci95": [lower, upper],
        }


def fsum_mean(x: np.ndarray) -> float:
    """Compensated mean, independent of how the samples were chunked"""
    x = np.asarray(x, dtype=float).ravel()
    if x.size == 0:
        return 0.0
    return math.fsum(x.tolist()) / x.size


def standard_error(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=float).ravel()
    n = x.size
    if n < 2:
        return 0.0
    return float(np.std(x, ddof=1) / np.sqrt(n))


def estimate(x: np.ndarray) -> Estimate:
    x = np.asarray(x, dtype=float).ravel()
    return Estimate(mean=fsum_mean(x), stderr=standard_error(x), count=int(x.size))


def difference(a: np.ndarray, b: np.ndarray) -> Estimate:
    """Paired difference a - b on common random numbers"""
    return estimate(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))


def combined_stderr(*stderrs: float) -> float:
    return float(math.sqrt(math.fsum(s * s for s in stderrs)))


def path_rng(seed: int, path_id: int) -> np.random.Generator:
    """Per-path generator; the stream depends only on (seed, path_id)"""
    return np.random.default_rng([int(seed), int(path_id)])


def fit_slope(x: np.ndarray, y: np.ndarray) -> float:
    """Least-squares slope of log y against log x"""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    slope, _ = np.polyfit(np.log(x), np.log(y), 1)
    return float(slope)
