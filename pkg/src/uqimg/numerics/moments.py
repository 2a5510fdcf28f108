"""Streaming and batch first/second moments in centered form."""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MomentAccumulator:
    count: int
    mean: np.ndarray
    m2: np.ndarray  # sum of squared deviations from the running mean

    @classmethod
    def empty(cls, shape):
        z = np.zeros(shape, dtype=np.float64)
        return cls(0, z, z.copy())


def accumulate(acc, sample):
    """Welford update; returns a new accumulator."""
    x = np.asarray(sample, dtype=np.float64)
    if acc.count and x.shape != acc.mean.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {acc.mean.shape}")
    if acc.count == 0:
        return MomentAccumulator(1, x.copy(), np.zeros_like(x))
    n = acc.count + 1
    delta = x - acc.mean
    mean = acc.mean + delta / n
    m2 = acc.m2 + delta * (x - mean)
    return MomentAccumulator(n, mean, m2)


def merge(a, b):
    """Chan et al. pairwise combination of two partial accumulators."""
    if a.count == 0:
        return b
    if b.count == 0:
        return a
    if a.mean.shape != b.mean.shape:
        raise ValueError(f"shape mismatch: {a.mean.shape} vs {b.mean.shape}")
    n = a.count + b.count
    delta = b.mean - a.mean
    frac_b = b.count / n
    mean = a.mean + delta * frac_b
    m2 = a.m2 + b.m2 + delta * delta * (a.count * frac_b)
    return MomentAccumulator(n, mean, m2)


def finalize(acc, convention="population"):
    if convention == "population":
        if acc.count < 1:
            raise ValueError("population variance needs at least 1 sample")
        var = acc.m2 / acc.count
    elif convention == "unbiased":
        if acc.count < 2:
            raise ValueError("unbiased variance needs at least 2 samples")
        var = acc.m2 / (acc.count - 1)
    else:
        raise ValueError(f"unknown divisor convention {convention!r}")
    if np.any(var < -1e-12 * np.maximum(1.0, np.abs(acc.mean) ** 2)):
        raise ArithmeticError("negative variance beyond rounding floor")
    return acc.mean.copy(), np.maximum(var, 0.0)


def centered_moments(samples, axis=0, convention="population"):
    """Two-pass mean and variance of ``samples`` along ``axis``."""
    x = np.asarray(samples, dtype=np.float64)
    n = x.shape[axis]
    mean = x.mean(axis=axis)
    dev = x - np.expand_dims(mean, axis)
    ss = (dev * dev).sum(axis=axis)
    divisor = n if convention == "population" else n - 1
    if divisor < 1:
        raise ValueError("insufficient count for variance")
    return mean, np.maximum(ss / divisor, 0.0)
