from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np
from scipy import stats
from statsmodels.stats.proportion import proportion_confint

from msalab.errors import ParameterError

logger = logging.getLogger(__name__)

TargetVerdict = Literal["consistent", "exceeds", "not-falsifiable"]


@dataclass(frozen=True)
class Proportion:
    successes: int
    trials: int

    @property
    def estimate(self) -> float:
        return self.successes / self.trials if self.trials else 0.0

    @property
    def ci(self) -> tuple[float, float]:
        return wilson_interval(self.successes, self.trials)


def wilson_interval(successes: int, trials: int, alpha: float = 0.05) -> tuple[float, float]:
    """Two-sided Wilson score interval; (0, 1) when there are no trials."""
    if trials <= 0:
        return 0.0, 1.0
    lo, hi = proportion_confint(count=successes, nobs=trials, alpha=alpha, method="wilson")
    return max(0.0, float(lo)), min(1.0, float(hi))


def smoothed_rate(successes: np.ndarray | int, trials: int) -> np.ndarray:
    # (k + 1/2) / (n + 1) keeps log-rates finite at k = 0
    return (np.asarray(successes, dtype=float) + 0.5) / (trials + 1.0)


@dataclass(frozen=True)
class LinearFit:
    slope: float
    intercept: float
    slope_ci: tuple[float, float]
    r_squared: float
    points: int


def linear_fit(x: Sequence[float], y: Sequence[float], alpha: float = 0.05) -> LinearFit:
    """
    Least-squares line with a t-based confidence interval for the slope.

    Raises:
        ParameterError: fewer than two points
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) < 2:
        raise ParameterError(f"A line fit needs at least two points, got {len(x)}")
    res = stats.linregress(x, y)
    if len(x) > 2:
        half = stats.t.ppf(1.0 - alpha / 2.0, len(x) - 2) * res.stderr
        ci = (float(res.slope - half), float(res.slope + half))
    else:
        ci = (-math.inf, math.inf)
    return LinearFit(
        slope=float(res.slope),
        intercept=float(res.intercept),
        slope_ci=ci,
        r_squared=float(res.rvalue ** 2),
        points=len(x),
    )


@dataclass(frozen=True)
class SlopeEstimate:
    slope: float
    ci: tuple[float, float]
    resamples: int


def bootstrap_slope(
        successes: Sequence[int],
        trials: Sequence[int],
        x: Sequence[float],
        resamples: int = 2000,
        seed: int = 0,
        alpha: float = 0.05,
) -> SlopeEstimate:
    """
    Slope of log(rate) against x with a percentile bootstrap interval. Each
    resample redraws the trials of every scale with replacement, which for
    Bernoulli outcomes is a binomial draw at the observed rate.
    """
    x = np.asarray(x, dtype=float)
    k = np.asarray(successes, dtype=np.int64)
    n = np.asarray(trials, dtype=np.int64)
    if len(x) < 2 or not len(x) == len(k) == len(n):
        raise ParameterError("bootstrap_slope needs matching sequences with at least two scales")

    def slopes(counts: np.ndarray) -> np.ndarray:
        logs = np.log((counts + 0.5) / (n + 1.0))
        xc = x - x.mean()
        return (logs - logs.mean(axis=-1, keepdims=True)) @ xc / (xc @ xc)

    point = float(slopes(k[None, :])[0])
    rng = np.random.default_rng(seed)
    draws = rng.binomial(n[None, :], (k / np.maximum(n, 1))[None, :], size=(resamples, len(x)))
    boot = slopes(draws)
    lo, hi = np.quantile(boot, [alpha / 2.0, 1.0 - alpha / 2.0])
    return SlopeEstimate(slope=point, ci=(float(lo), float(hi)), resamples=resamples)


def compare_to_target(ci_lo: float, target: float, trials: int) -> TargetVerdict:
    """
    "exceeds" when the whole interval sits above the target; "not-falsifiable"
    when the target is too small to be resolved with this many trials.
    """
    if ci_lo > target:
        return "exceeds"
    if target * trials < 3.0:
        return "not-falsifiable"
    return "consistent"


@dataclass(frozen=True)
class MeanEstimate:
    mean: float
    ci: tuple[float, float]
    samples: int


def mean_interval(values: Sequence[float], alpha: float = 0.05) -> MeanEstimate:
    """Sample mean with a t-based interval."""
    arr = np.asarray(values, dtype=float)
    mean = float(arr.mean()) if arr.size else 0.0
    if arr.size < 2:
        return MeanEstimate(mean=mean, ci=(mean, mean), samples=int(arr.size))
    half = float(stats.t.ppf(1.0 - alpha / 2.0, arr.size - 1) * arr.std(ddof=1) / math.sqrt(arr.size))
    return MeanEstimate(mean=mean, ci=(mean - half, mean + half), samples=int(arr.size))
