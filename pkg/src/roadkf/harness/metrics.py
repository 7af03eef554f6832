"""Horizontal-error statistics."""

import numpy as np


def percentile(errors, q):
    """Percentile with linear interpolation between order statistics.

    For sorted values x_0..x_{n-1} the q-th percentile sits at rank
    h = (n - 1) q / 100 and is x_floor(h) + (h - floor(h)) (x_ceil(h) - x_floor(h)).
    """
    x = np.sort(np.asarray(errors, dtype=np.float64).ravel())
    if x.size == 0:
        raise ValueError("no errors to summarize")
    h = (x.size - 1) * q / 100.0
    lo = int(np.floor(h))
    hi = min(lo + 1, x.size - 1)
    return float(x[lo] + (h - lo) * (x[hi] - x[lo]))


def he50(errors):
    return percentile(errors, 50.0)


def he95(errors):
    return percentile(errors, 95.0)


def cdf(errors):
    """Empirical CDF as (sorted errors, cumulative fraction)."""
    x = np.sort(np.asarray(errors, dtype=np.float64).ravel())
    return x, np.arange(1, x.size + 1) / x.size


def summarize(errors):
    return {"he50_m": he50(errors), "he95_m": he95(errors), "epochs": int(np.size(errors))}


def mean_std(values):
    v = np.asarray(values, dtype=np.float64)
    if np.all(v == v[0]):
        return float(v[0]), 0.0  # exact, free of summation rounding
    return float(v.mean()), float(v.std())
