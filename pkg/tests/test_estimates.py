from __future__ import annotations

import math

import numpy as np
import pytest

from msalab.errors import ParameterError
from msalab.estimates import (
    Proportion,
    bootstrap_slope,
    compare_to_target,
    linear_fit,
    mean_interval,
    smoothed_rate,
    wilson_interval,
)


def test_wilson_interval_known_values():
    lo, hi = wilson_interval(5, 10)
    assert lo == pytest.approx(0.2366, abs=1e-3)
    assert hi == pytest.approx(0.7634, abs=1e-3)
    lo, hi = wilson_interval(0, 10)
    assert lo == 0.0
    assert hi == pytest.approx(0.2775, abs=1e-3)


def test_wilson_interval_without_trials():
    assert wilson_interval(0, 0) == (0.0, 1.0)


def test_proportion():
    p = Proportion(successes=3, trials=12)
    assert p.estimate == 0.25
    lo, hi = p.ci
    assert lo < 0.25 < hi
    assert Proportion(0, 0).estimate == 0.0


def test_smoothed_rate_is_finite_at_zero():
    rates = smoothed_rate(np.array([0, 9]), 9)
    assert rates[0] == pytest.approx(0.05)
    assert rates[1] == pytest.approx(0.95)
    assert np.all(np.isfinite(np.log(rates)))


def test_linear_fit_recovers_an_exact_line():
    x = np.arange(6, dtype=float)
    fit = linear_fit(x, 3.0 - 0.5 * x)
    assert fit.slope == pytest.approx(-0.5)
    assert fit.intercept == pytest.approx(3.0)
    assert fit.r_squared == pytest.approx(1.0)
    assert fit.slope_ci[0] == pytest.approx(-0.5)
    assert fit.points == 6


def test_linear_fit_two_points_has_an_unbounded_interval():
    fit = linear_fit([0.0, 1.0], [1.0, 2.0])
    assert fit.slope == pytest.approx(1.0)
    assert fit.slope_ci == (-math.inf, math.inf)
    with pytest.raises(ParameterError):
        linear_fit([1.0], [1.0])


def test_linear_fit_interval_covers_the_noisy_slope():
    rng = np.random.default_rng(0)
    x = np.linspace(0, 10, 40)
    fit = linear_fit(x, -0.3 * x + rng.normal(0.0, 0.1, size=x.size))
    assert fit.slope_ci[0] < -0.3 < fit.slope_ci[1]


def test_bootstrap_slope_of_exponential_rates():
    x = [1.0, 2.0, 3.0]
    n = 10000
    k = [round(n * math.exp(-v)) for v in x]
    estimate = bootstrap_slope(k, [n] * 3, x, resamples=500, seed=1)
    assert estimate.slope == pytest.approx(-1.0, abs=0.01)
    assert estimate.ci[0] <= estimate.slope <= estimate.ci[1]
    assert estimate.resamples == 500


def test_bootstrap_slope_is_reproducible():
    a = bootstrap_slope([10, 4, 1], [50, 50, 50], [8.0, 16.0, 32.0], seed=7)
    b = bootstrap_slope([10, 4, 1], [50, 50, 50], [8.0, 16.0, 32.0], seed=7)
    assert a == b


def test_bootstrap_slope_validation():
    with pytest.raises(ParameterError):
        bootstrap_slope([1], [10], [1.0])
    with pytest.raises(ParameterError):
        bootstrap_slope([1, 2], [10], [1.0, 2.0])


def test_compare_to_target():
    assert compare_to_target(0.2, 0.1, 100) == "exceeds"
    assert compare_to_target(0.0, 0.1, 100) == "consistent"
    assert compare_to_target(0.0, 1e-6, 100) == "not-falsifiable"


def test_mean_interval():
    estimate = mean_interval([1.0, 2.0, 3.0, 4.0])
    assert estimate.mean == pytest.approx(2.5)
    assert estimate.ci[0] < 2.5 < estimate.ci[1]
    assert estimate.samples == 4
    single = mean_interval([7.0])
    assert single.ci == (7.0, 7.0)
